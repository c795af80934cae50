"""Checkpoints: one EDTF file per tensor plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import edtf
from .autodiff.edtf import atomic_write_bytes
from .errors import DataError

MANIFEST = "checkpoint.json"


def dumps(obj) -> str:
    """Canonical JSON used for every artifact, so reruns are byte-identical."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, dumps(obj).encode("utf-8"))


def save_checkpoint(directory: str | Path, state: dict[str, np.ndarray], meta: dict) -> Path:
    """Write every tensor, then the manifest last so a readable manifest implies a complete checkpoint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(state):
        fname = f"{name}.edtf"
        edtf.save(directory / fname, np.asarray(state[name]))
        files[name] = fname
    write_json(directory / MANIFEST, {**meta, "tensors": files})
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise DataError(f"no checkpoint manifest at {manifest}")
    meta = json.loads(manifest.read_text())
    files = meta.pop("tensors")
    state = {name: edtf.load(directory / fname) for name, fname in files.items()}
    return state, meta
