"""Deterministic artifact files: headed CSVs and .npy checkpoints with a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.12g"


def write_csv(frame: pd.DataFrame, path, header: str, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        frame.to_csv(fh, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path, **kw) -> pd.DataFrame:
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    return pd.read_csv(path, skiprows=1 if first.startswith("#") else 0, **kw)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(directory, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """One ``.npy`` per array plus ``manifest.json`` listing their checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(arrays):
        path = directory / f"{name}.npy"
        np.save(path, np.ascontiguousarray(arrays[name], dtype=np.float64), allow_pickle=False)
        files[name] = _digest(path)
    manifest = dict(meta, files=files)
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}; run 'train' first")
    meta = json.loads(mpath.read_text())
    arrays = {}
    for name, digest in meta["files"].items():
        path = directory / f"{name}.npy"
        if _digest(path) != digest:
            raise ValueError(f"checksum mismatch for {path}")
        arrays[name] = np.load(path, allow_pickle=False)
    return arrays, meta
