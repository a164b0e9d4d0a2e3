import json

import numpy as np
import pandas as pd
import pytest
import yaml

from simstock.artifacts import load_checkpoint, read_csv, save_checkpoint, write_csv
from simstock.cli import EXIT_CONFIG, EXIT_DATA, main
from simstock.config import ConfigError, RunConfig, from_dict, load_config

TINY = {
    "seed": 3,
    "synthetic": {"n_tickers": 12, "n_duplicates": 1, "start": "2018-01-01", "end": "2021-12-31"},
    "model": {"d": 4, "d_k": 4, "d_v": 4},
    "domains": {"start": "2018-01-01", "end": "2018-12-31"},
    "train": {"first_steps": 5, "inner_steps": 2, "gen_steps": 1, "epochs": 1},
    "reference": {"start": "2019-01-01", "end": "2019-12-31"},
    "test": {"start": "2020-01-01", "end": "2020-12-31"},
    "similar": {"k": 50},
    "track": {"k_grid": [2, 3], "targets": ["T000"], "test": {"start": "2020-01-01", "end": "2021-12-31"}},
}


def _config_file(tmp_path, data):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_defaults_validate_and_hash_is_stable():
    a, b = RunConfig().validate(), RunConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.paths.out = "elsewhere"
    assert a.hash() == b.hash()
    b.seed = 1
    assert a.hash() != b.hash()
    assert RunConfig().header().startswith("# config_hash=")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="model.width"):
        from_dict({"model": {"width": 3}})
    with pytest.raises(ConfigError, match="seed"):
        from_dict({"seed": "x"})


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="model.lam"):
        from_dict({"model": {"lam": 1.5}}).validate()
    with pytest.raises(ConfigError, match="ablate.lambdas"):
        from_dict({"ablate": {"lambdas": [0.3, -0.1]}}).validate()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_missing_panel_exit_code(tmp_path, capsys):
    path = _config_file(tmp_path, {"paths": {"panel": str(tmp_path / "absent.csv")}})
    assert main(["ingest", "--config", path]) == EXIT_CONFIG
    assert "paths.panel" in capsys.readouterr().err


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["ingest", "--config", _config_file(tmp_path, {"bogus": 1})]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_embed_before_train_is_data_error(tmp_path, capsys):
    path = _config_file(tmp_path, dict(TINY, paths={"out": str(tmp_path / "out")}))
    assert main(["embed", "--config", path]) == EXIT_DATA
    assert "train" in capsys.readouterr().err


def test_csv_header_round_trip(tmp_path):
    frame = pd.DataFrame({"a": [1.0, 2.5], "b": ["x", "y"]})
    path = write_csv(frame, tmp_path / "f.csv", "# config_hash=abc seed=1")
    assert path.read_text().splitlines()[0] == "# config_hash=abc seed=1"
    assert read_csv(path).equals(frame)


def test_checkpoint_checksums(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2)}
    save_checkpoint(tmp_path / "ck", arrays, {"config_hash": "abc"})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["config_hash"] == "abc"
    assert all(np.array_equal(back[k], v) for k, v in arrays.items())
    np.save(tmp_path / "ck" / "w.npy", np.zeros((2, 3)))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_small_pipeline(tmp_path):
    out = tmp_path / "out"
    path = _config_file(tmp_path, dict(TINY, paths={"out": str(out)}))
    for cmd in ("ingest", "train", "embed"):
        assert main([cmd, "--config", path]) == 0, cmd
    with pytest.warns(RuntimeWarning, match="exceeds"):  # k larger than the universe
        assert main(["similar", "--config", path]) == 0
    assert main(["track", "--config", path]) == 0
    header = RunConfig().header().split()[0]
    for name in ("panel.csv", "train_log.csv", "similar.csv", "track_report.csv"):
        first = (out / name).read_text().splitlines()[0]
        assert first.startswith("# config_hash=") and first != header
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert "config_hash" in manifest
    report = read_csv(out / "track_report.csv")
    assert set(report["method"]) == {"SimStock", "Corr"}
    assert np.isfinite(report[["TE", "TEV"]].to_numpy()).all()
