"""WAV ingestion, PGM image dumps and the label manifest."""
from __future__ import annotations

import csv
import io
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import EMOTIONS
from ..autodiff.edtf import atomic_write_bytes
from ..errors import DataError
from .features import Waveform

MANIFEST_COLUMNS = ("path", "emotion", "speaker", "text")


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono RIFF file as floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if f.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV ({f.getcomptype()}) is not supported; need PCM 16-bit mono")
            if channels != 1:
                raise DataError(f"{path}: {channels} channels; need mono")
            if width != 2:
                raise DataError(f"{path}: {8 * width}-bit samples; need PCM 16-bit")
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM 16-bit mono RIFF WAV ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())
    atomic_write_bytes(path, buf.getvalue())


def pgm_bytes(values: np.ndarray) -> bytes:
    """Binary P5 image of a [-1, 1] grid; row 0 of ``values`` lands on the bottom row."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    if v.ndim != 2:
        raise ValueError(f"PGM dump needs a 2-D grid, got shape {v.shape}")
    pixels = np.round((v + 1.0) * 127.5).astype(np.uint8)[::-1]
    header = f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(values))


def read_pgm(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_pgm` up to quantization; returns values in [-1, 1]."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5":
        raise DataError(f"{path}: not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + width * height], dtype=np.uint8).reshape(height, width)
    return pixels[::-1].astype(np.float64) / 127.5 - 1.0


@dataclass(frozen=True)
class ManifestRow:
    path: str
    emotion: str
    speaker: str
    text: str


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return []
        if tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(reader.fieldnames)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if rec["emotion"] not in EMOTIONS:
                raise DataError(f"{path}:{line}: unknown emotion {rec['emotion']!r}; expected one of {EMOTIONS}")
            rows.append(ManifestRow(rec["path"], rec["emotion"], rec["speaker"], rec["text"] or ""))
    return rows


def manifest_text(rows: list[ManifestRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in rows:
        writer.writerow([r.path, r.emotion, r.speaker, r.text])
    return buf.getvalue()


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    atomic_write_bytes(path, manifest_text(rows).encode("utf-8"))
