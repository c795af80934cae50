"""Labeled segment collections on disk: a manifest CSV pointing at EDTF grids."""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio.features import MelSpectrogram, segment
from .audio.io import ManifestRow, read_manifest, write_manifest
from .autodiff import edtf
from .errors import DataError


def utterance_id(m: MelSpectrogram) -> str:
    """Segments of one utterance share the part of ``source_id`` before ``#``."""
    return m.source_id.split("#", 1)[0]


def group_by_utterance(segments: Iterable[MelSpectrogram]) -> "OrderedDict[str, list[MelSpectrogram]]":
    groups: OrderedDict[str, list[MelSpectrogram]] = OrderedDict()
    for s in segments:
        groups.setdefault(utterance_id(s), []).append(s)
    return groups


def speakers(segments: Iterable[MelSpectrogram]) -> list[str]:
    return sorted({s.speaker for s in segments})


def write_corpus(segments: Sequence[MelSpectrogram], outdir: str | Path, manifest: str = "manifest.csv") -> Path:
    """One EDTF file per segment, named after its ``source_id``, plus the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in segments:
        name = f"{s.source_id}.edtf"
        edtf.save(outdir / name, np.asarray(s.values))
        rows.append(ManifestRow(name, s.emotion, s.speaker, s.text))
    path = outdir / manifest
    write_manifest(path, rows)
    return path


def load_corpus(manifest: str | Path, frames_per_segment: int | None = None) -> list[MelSpectrogram]:
    """Read every EDTF grid listed in ``manifest``.

    Paths are relative to the manifest. Grids wider than
    ``frames_per_segment`` are split with :func:`segment`; a stem that already
    carries ``#k`` is taken as a single segment of its utterance.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    out = []
    for row in read_manifest(manifest):
        path = manifest.parent / row.path
        if path.suffix != ".edtf":
            raise DataError(f"{row.path}: expected an EDTF spectrogram (run featurize on WAV manifests first)")
        values = edtf.load(path)
        if values.ndim != 2:
            raise DataError(f"{row.path}: expected a 2-D grid, got shape {values.shape}")
        stem = Path(row.path).stem
        m = MelSpectrogram(values, source_id=stem, emotion=row.emotion, speaker=row.speaker, text=row.text)
        if "#" in stem and (frames_per_segment is None or values.shape[1] == frames_per_segment):
            out.append(m)
        else:
            out.extend(segment(m, frames_per_segment or values.shape[1]))
    return out
