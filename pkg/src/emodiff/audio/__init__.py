"""Waveform to normalized log-mel conversion and back."""
from .features import (
    FRAMES_PER_SEGMENT,
    HOP,
    N_FFT,
    N_MELS,
    SAMPLE_RATE,
    MelFilterbank,
    MelSpectrogram,
    NormalizationSpec,
    Waveform,
    hann,
    istft,
    log_mel,
    mel_spectrogram,
    segment,
    stft,
    unsegment,
)
from .fft import fft, ifft, naive_dft
from .griffin_lim import griffin_lim, griffin_lim_magnitude, magnitude_residual, peak_locked_phase

__all__ = [
    "FRAMES_PER_SEGMENT", "HOP", "N_FFT", "N_MELS", "SAMPLE_RATE", "MelFilterbank", "MelSpectrogram",
    "NormalizationSpec", "Waveform", "fft", "griffin_lim", "griffin_lim_magnitude", "hann", "peak_locked_phase", "ifft", "istft",
    "log_mel", "magnitude_residual", "mel_spectrogram", "naive_dft", "segment", "stft", "unsegment",
]
