"""Phase reconstruction from magnitude spectrograms."""
from __future__ import annotations

import numpy as np

from .features import HOP, LOG_FLOOR, MelFilterbank, MelSpectrogram, NormalizationSpec, Waveform, istft, stft


def magnitude_residual(samples: np.ndarray, target: np.ndarray, n_fft: int, hop: int) -> float:
    """Relative Frobenius distance between ``|STFT(samples)|`` and ``target``."""
    denom = np.linalg.norm(target)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(np.abs(stft(samples, n_fft, hop)) - target) / denom)


def peak_locked_phase(magnitude: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Phase-vocoder initial phase with bins locked to their nearest spectral peak.

    Peak frequencies use the Hann-window bin-offset estimator. Frame 0 is
    anchored to a real spectrum because reflection padding makes it
    even-symmetric around its centre.
    """
    n_bins, count = magnitude.shape
    k = np.arange(n_bins)
    phase = np.zeros(magnitude.shape)
    acc = np.pi * k.astype(np.float64)
    for m in range(count):
        col = magnitude[:, m]
        inner = (col[1:-1] > col[:-2]) & (col[1:-1] >= col[2:]) & (col[1:-1] > 1e-6 * col.max())
        peaks = np.nonzero(inner)[0] + 1
        if peaks.size:
            a0, left, right = col[peaks], col[peaks - 1], col[peaks + 1]
            a1 = np.maximum(left, right)
            offset = np.clip((2.0 * a1 - a0) / (a0 + a1), 0.0, 0.5)
            freq = peaks + np.where(right >= left, offset, -offset)
            nearest = np.searchsorted((peaks[:-1] + peaks[1:]) / 2.0, k)
            owner, inst = peaks[nearest], freq[nearest]
        else:
            owner, inst = k, k.astype(np.float64)
        if m:
            acc = acc + 2.0 * np.pi * inst * hop / n_fft
        phase[:, m] = acc[owner] + np.pi * (k - owner)
    return phase


def griffin_lim_magnitude(
    magnitude: np.ndarray,
    iterations: int = 60,
    n_fft: int | None = None,
    hop: int = HOP,
    momentum: float = 0.99,
    seed: int = 0,
    init: str = "peak",
    length: int | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Fast Griffin-Lim on a linear magnitude spectrogram.

    ``init`` is ``"peak"`` (peak-locked phase vocoder) or ``"random"``
    (uniform phase from ``seed``). Returns the waveform and the
    magnitude-consistency residual after each iteration.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    n_fft = n_fft or 2 * (magnitude.shape[0] - 1)
    if length is None:
        length = hop * (magnitude.shape[1] - 1)
    if not np.any(magnitude):
        return np.zeros(length), [0.0] * iterations
    if init == "peak":
        angles = np.exp(1j * peak_locked_phase(magnitude, n_fft, hop))
    elif init == "random":
        angles = np.exp(2j * np.pi * np.random.default_rng(seed).random(magnitude.shape))
    else:
        raise ValueError(f"unknown init {init!r}; expected 'peak' or 'random'")
    scale = np.linalg.norm(magnitude)
    previous = np.zeros_like(angles)
    residuals = []
    for _ in range(iterations):
        x = istft(magnitude * angles, n_fft, hop, length)
        rebuilt = stft(x, n_fft, hop)
        residuals.append(float(np.linalg.norm(np.abs(rebuilt) - magnitude) / scale))
        accelerated = rebuilt - (momentum / (1.0 + momentum)) * previous if momentum else rebuilt
        previous = rebuilt
        angles = accelerated / np.maximum(np.abs(accelerated), 1e-16)
    x = istft(magnitude * angles, n_fft, hop, length)
    residuals[-1] = magnitude_residual(x, magnitude, n_fft, hop)
    return x, residuals


def mel_to_linear_magnitude(m: MelSpectrogram | np.ndarray, fb: MelFilterbank, norm: NormalizationSpec) -> np.ndarray:
    values = m.values if isinstance(m, MelSpectrogram) else np.asarray(m)
    mel_power = np.exp(norm.denormalize(values)) - LOG_FLOOR
    mel_power[mel_power < 1e-9] = 0.0  # at or below the log floor: silence
    linear_power = np.maximum(fb.pseudo_inverse() @ mel_power, 0.0)
    return np.sqrt(linear_power)


def griffin_lim(
    m: MelSpectrogram,
    fb: MelFilterbank,
    norm: NormalizationSpec,
    iterations: int = 60,
    seed: int = 0,
) -> Waveform:
    """Invert a normalized mel spectrogram to audio, peak-normalized to 0.95."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    magnitude = mel_to_linear_magnitude(m, fb, norm)
    samples, _ = griffin_lim_magnitude(magnitude, iterations, fb.n_fft, m.frame_hop if isinstance(m, MelSpectrogram) else HOP, seed=seed)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 0:
        samples = samples * (0.95 / peak)
    return Waveform(samples, fb.sample_rate)
