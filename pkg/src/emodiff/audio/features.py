"""STFT, mel filterbank, normalized log-mel spectrograms and segmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fft import fft, ifft

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 80
FRAMES_PER_SEGMENT = 256
LOG_FLOOR = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class MelSpectrogram:
    """A normalized ``n_mels x F`` log-mel grid plus labels.

    ``valid_frames`` counts the leading frames that hold real signal; the rest
    (if any) is floor padding added by :func:`segment`.
    """

    values: np.ndarray
    source_id: str = ""
    emotion: str = ""
    speaker: str = ""
    text: str = ""
    frame_hop: int = HOP
    valid_frames: int = -1

    def __post_init__(self):
        if self.valid_frames < 0:
            self.valid_frames = self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    n_mels: int = N_MELS
    n_fft: int = N_FFT
    sample_rate: int = SAMPLE_RATE
    f_min: float = 0.0
    f_max: float = 8000.0
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= Nyquist, got {self.f_min}, {self.f_max}")
        n_bins = self.n_fft // 2 + 1
        freqs = np.arange(n_bins) * self.sample_rate / self.n_fft
        edges = mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.n_mels + 2))
        lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        rising = (freqs[None, :] - lo) / (mid - lo)
        falling = (hi - freqs[None, :]) / (hi - mid)
        w = np.maximum(0.0, np.minimum(rising, falling))
        peaks = w.max(axis=1, keepdims=True)
        if np.any(peaks <= 0):
            raise ValueError("mel filterbank has an empty filter; increase n_fft or reduce n_mels")
        w = w / peaks
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    def pseudo_inverse(self) -> np.ndarray:
        return np.linalg.pinv(self.weights)


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine map of log-mel energies ``[log_min, log_max]`` onto ``[-1, 1]``."""

    log_min: float
    log_max: float

    def __post_init__(self):
        if not (math.isfinite(self.log_min) and math.isfinite(self.log_max)) or self.log_max <= self.log_min:
            raise ValueError(f"degenerate normalization range [{self.log_min}, {self.log_max}]")

    def normalize(self, log_mel: np.ndarray) -> np.ndarray:
        scaled = 2.0 * (log_mel - self.log_min) / (self.log_max - self.log_min) - 1.0
        return np.clip(scaled, -1.0, 1.0)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values) + 1.0) * 0.5 * (self.log_max - self.log_min) + self.log_min

    @classmethod
    def from_log_mels(cls, log_mels) -> NormalizationSpec:
        lo = min(float(np.min(m)) for m in log_mels)
        hi = max(float(np.max(m)) for m in log_mels)
        return cls(lo, hi)

    def to_json(self) -> dict:
        return {"log_min": self.log_min, "log_max": self.log_max}


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(n_samples: int, hop: int = HOP) -> int:
    return n_samples // hop + 1


def stft(w: Waveform | np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Complex ``(n_fft/2+1) x F`` STFT with Hann window and reflection padding."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot take the STFT of an empty waveform")
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    count = n_frames(x.size, hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(count)[:, None]
    frames = xp[idx] * hann(n_fft)[None, :]
    return fft(frames)[:, : n_fft // 2 + 1].T


def istft(spec: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_bins, count = spec.shape
    full = np.concatenate([spec, np.conj(spec[-2:0:-1])], axis=0).T
    frames = ifft(full).real * hann(n_fft)[None, :]
    total = n_fft + hop * (count - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = hann(n_fft) ** 2
    for i in range(count):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += win_sq
    out = np.where(norm > 1e-10, out / np.maximum(norm, 1e-10), 0.0)
    pad = n_fft // 2
    out = out[pad:]
    if length is None:
        length = hop * (count - 1)
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def log_mel(w: Waveform | np.ndarray, fb: MelFilterbank, hop: int = HOP) -> np.ndarray:
    """Natural-log mel power ``log(fb @ |STFT|^2 + 1e-5)``."""
    power = np.abs(stft(w, fb.n_fft, hop)) ** 2
    return np.log(fb.weights @ power + LOG_FLOOR)


def mel_spectrogram(w: Waveform, fb: MelFilterbank, norm: NormalizationSpec, **labels) -> MelSpectrogram:
    return MelSpectrogram(norm.normalize(log_mel(w, fb)), **labels)


def segment(m: MelSpectrogram, frames_per_segment: int = FRAMES_PER_SEGMENT, floor: float = -1.0) -> list[MelSpectrogram]:
    """Split into non-overlapping windows; the last (or only) one is floor-padded."""
    total = m.valid_frames
    count = max(1, math.ceil(total / frames_per_segment))
    out = []
    for k in range(count):
        chunk = m.values[:, k * frames_per_segment : min((k + 1) * frames_per_segment, total)]
        valid = chunk.shape[1]
        if valid < frames_per_segment:
            chunk = np.concatenate([chunk, np.full((m.values.shape[0], frames_per_segment - valid), floor)], axis=1)
        out.append(replace(m, values=chunk.copy(), source_id=f"{m.source_id}#{k}", valid_frames=valid))
    return out


def unsegment(segments: list[MelSpectrogram]) -> np.ndarray:
    """Concatenate segments and drop floor padding."""
    return np.concatenate([s.values[:, : s.valid_frames] for s in segments], axis=1)
