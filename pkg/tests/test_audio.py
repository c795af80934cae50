import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emodiff.audio import (
    MelFilterbank,
    MelSpectrogram,
    NormalizationSpec,
    Waveform,
    fft,
    griffin_lim,
    griffin_lim_magnitude,
    ifft,
    istft,
    log_mel,
    magnitude_residual,
    mel_spectrogram,
    naive_dft,
    segment,
    stft,
    unsegment,
)
from emodiff.audio.features import LOG_FLOOR, hz_to_mel, mel_to_hz, n_frames
from emodiff.audio.io import (
    ManifestRow,
    pgm_bytes,
    read_manifest,
    read_pgm,
    read_wav,
    write_manifest,
    write_pgm,
    write_wav,
)
from emodiff.errors import DataError

SR = 22050


def tone(freq, seconds=1.0, amp=0.5, phase=0.0):
    t = np.arange(int(SR * seconds)) / SR
    return amp * np.cos(2 * np.pi * freq * t + phase)


# fft


def test_fft_delta_is_flat():
    x = np.zeros(16)
    x[0] = 1
    assert np.allclose(fft(x), np.ones(16))


def test_fft_of_tone_hits_single_bin():
    n = 64
    X = fft(np.cos(2 * np.pi * 5 * np.arange(n) / n))
    assert abs(X[5] - n / 2) < 1e-12 and abs(X[n - 5] - n / 2) < 1e-12
    X[[5, n - 5]] = 0
    assert np.max(np.abs(X)) < 1e-12


def test_fft_matches_naive_dft(rng):
    x = rng.standard_normal(1024) + 1j * rng.standard_normal(1024)
    assert np.max(np.abs(fft(x) - naive_dft(x))) < 1e-9


@pytest.mark.parametrize("n", [2**k for k in range(13)])
def test_fft_ifft_identity(n, rng):
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    assert np.max(np.abs(ifft(fft(x)) - x)) <= 1e-10
    assert np.max(np.abs(fft(ifft(x)) - x)) <= 1e-10


@pytest.mark.parametrize("n", [0, 3, 100, 1000])
def test_fft_rejects_non_power_of_two(n):
    with pytest.raises(ValueError, match="power of two"):
        fft(np.zeros(n))


def test_fft_batches_over_leading_axes(rng):
    x = rng.standard_normal((3, 5, 32))
    assert np.allclose(fft(x), naive_dft(x))


# stft


def test_stft_of_zeros_is_zero():
    S = stft(np.zeros(SR))
    assert S.shape == (513, 87)
    assert not np.any(S)


def test_stft_frame_count_one_second():
    assert stft(tone(440)).shape[1] == 87 == n_frames(SR)


def test_stft_peak_bin_for_1khz():
    mag = np.abs(stft(tone(1000)))
    # 1000 Hz * 1024 / 22050 = 46.4; edge frames see the reflection kink
    assert np.all(np.argmax(mag[:, 2:-2], axis=0) == 46)


def test_istft_inverts_stft(rng):
    x = rng.standard_normal(5000)
    assert np.max(np.abs(x - istft(stft(x), length=5000))) < 1e-10


def test_stft_rejects_empty():
    with pytest.raises(ValueError):
        stft(np.zeros(0))


# mel


def test_hz_mel_round_trip():
    f = np.linspace(0, 11025, 50)
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)


def test_filterbank_shape_and_peaks():
    fb = MelFilterbank()
    w = fb.weights
    assert w.shape == (80, 513)
    assert np.all(w.max(axis=1) == 1.0)
    assert np.all((w > 0).sum(axis=1) >= 1)
    # each row has a unique maximum
    assert np.all((w == w.max(axis=1, keepdims=True)).sum(axis=1) == 1)


def test_filterbank_adjacent_rows_overlap():
    w = MelFilterbank().weights
    assert np.all(np.einsum("ij,ij->i", w[:-1], w[1:]) > 0)


def test_filterbank_upper_edge_is_8khz():
    w = MelFilterbank().weights
    freqs = np.arange(513) * SR / 1024
    assert not np.any(w[:, freqs >= 8000])


def test_filterbank_rejects_empty_filters():
    with pytest.raises(ValueError, match="empty filter"):
        MelFilterbank(n_mels=400, n_fft=256)


def test_silence_maps_to_minus_one():
    fb = MelFilterbank()
    norm = NormalizationSpec(np.log(LOG_FLOOR), np.log(LOG_FLOOR) + 10)
    m = mel_spectrogram(Waveform(np.zeros(SR)), fb, norm)
    assert m.values.shape == (80, 87)
    assert np.all(m.values == -1.0)


def test_normalization_clamps():
    norm = NormalizationSpec(-2.0, 2.0)
    assert np.array_equal(norm.normalize(np.array([-10.0, -2.0, 0.0, 2.0, 10.0])), [-1, -1, 0, 1, 1])


@given(st.floats(-50, 50), st.floats(0.01, 100), st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_normalization_round_trip(lo, width, fractions):
    norm = NormalizationSpec(lo, lo + width)
    logm = lo + width * np.array(fractions)
    assert np.allclose(norm.denormalize(norm.normalize(logm)), logm, atol=1e-6 * max(1.0, abs(lo) + width))


@pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0), (float("nan"), 1.0), (0.0, float("inf"))])
def test_degenerate_normalization_rejected(lo, hi):
    with pytest.raises(ValueError, match="degenerate"):
        NormalizationSpec(lo, hi)


def test_normalization_from_corpus():
    norm = NormalizationSpec.from_log_mels([np.array([[0.0, 3.0]]), np.array([[-1.0]])])
    assert (norm.log_min, norm.log_max) == (-1.0, 3.0)


def test_log_mel_of_tone_peaks_near_tone_frequency():
    fb = MelFilterbank()
    lm = log_mel(Waveform(tone(1000)), fb)
    centre = np.argmax(lm[:, 40])
    assert abs(mel_to_hz(np.linspace(0, hz_to_mel(8000), 82)[centre + 1]) - 1000) < 100


# segmentation


def _grid(frames, mels=80):
    return MelSpectrogram(np.linspace(-0.9, 0.9, mels * frames).reshape(mels, frames), source_id="u")


@pytest.mark.parametrize("frames,count,pad", [(256, 1, 0), (600, 3, 168), (10, 1, 246)])
def test_segment_counts(frames, count, pad):
    segs = segment(_grid(frames))
    assert len(segs) == count
    assert all(s.values.shape == (80, 256) for s in segs)
    assert np.all(segs[-1].values[:, 256 - pad :] == -1.0)
    assert segs[-1].valid_frames == 256 - pad
    assert [s.source_id for s in segs] == [f"u#{k}" for k in range(count)]


def test_three_second_file_gives_256_frame_segments():
    fb = MelFilterbank()
    x = 0.3 * np.sin(2 * np.pi * 220 * np.arange(3 * SR) / SR)
    norm = NormalizationSpec(np.log(LOG_FLOOR), 5.0)
    m = mel_spectrogram(Waveform(x), fb, norm)
    assert m.values.shape == (80, 259)
    segs = segment(m)
    assert [s.values.shape for s in segs] == [(80, 256), (80, 256)]


@settings(max_examples=50)
@given(st.integers(1, 900), st.integers(1, 300))
def test_unsegment_inverts_segment(frames, per):
    m = _grid(frames, mels=4)
    assert np.array_equal(unsegment(segment(m, per)), m.values)


# griffin-lim


def test_griffin_lim_zero_spectrogram_gives_silence():
    x, res = griffin_lim_magnitude(np.zeros((513, 20)))
    assert not np.any(x)
    fb = MelFilterbank()
    norm = NormalizationSpec(np.log(LOG_FLOOR), 5.0)
    w = griffin_lim(MelSpectrogram(-np.ones((80, 20))), fb, norm, iterations=3)
    assert not np.any(w.samples)
    assert w.sample_rate == SR


def test_griffin_lim_rejects_zero_iterations():
    with pytest.raises(ValueError, match="iterations"):
        griffin_lim_magnitude(np.ones((513, 4)), iterations=0)
    with pytest.raises(ValueError, match="iterations"):
        griffin_lim(MelSpectrogram(np.zeros((80, 4))), MelFilterbank(), NormalizationSpec(-5, 5), iterations=0)


def test_griffin_lim_pure_tone_residual():
    x = tone(500)
    target = np.abs(stft(x))
    y, res = griffin_lim_magnitude(target, iterations=60, length=x.size)
    assert magnitude_residual(y, target, 1024, 256) < 1e-2
    assert res[-1] < 1e-2


@pytest.mark.parametrize("init", ["peak", "random"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_griffin_lim_doubling_iterations_does_not_hurt(init, seed):
    x = tone(500, seconds=0.5, phase=0.7 * seed)
    target = np.abs(stft(x))
    finals = [griffin_lim_magnitude(target, n, seed=seed, init=init, length=x.size)[1][-1] for n in (15, 30, 60)]
    assert finals[1] <= finals[0] and finals[2] <= finals[1]


def test_griffin_lim_output_is_peak_normalized():
    fb = MelFilterbank()
    lm = log_mel(Waveform(tone(440, seconds=0.3)), fb)
    norm = NormalizationSpec.from_log_mels([lm])
    w = griffin_lim(MelSpectrogram(norm.normalize(lm)), fb, norm, iterations=5)
    assert np.isclose(np.max(np.abs(w.samples)), 0.95)


def test_griffin_lim_unknown_init():
    with pytest.raises(ValueError, match="init"):
        griffin_lim_magnitude(np.ones((513, 4)), init="zeros")


# io


def test_wav_round_trip(tmp_path):
    x = 0.5 * np.sin(np.arange(1000) / 7)
    write_wav(tmp_path / "a.wav", Waveform(x, 16000))
    w = read_wav(tmp_path / "a.wav")
    assert w.sample_rate == 16000
    assert np.max(np.abs(w.samples - x)) < 1 / 32767


def _raw_wav(path, fmt=1, channels=1, bits=16, payload=b"\x00\x00" * 4):
    block = channels * bits // 8
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, SR, SR * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk + b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


@pytest.mark.parametrize(
    "kwargs,msg",
    [({"channels": 2}, "mono"), ({"bits": 8, "payload": b"\x00" * 4}, "16-bit"), ({"fmt": 3, "bits": 32, "payload": b"\x00" * 8}, "PCM")],
)
def test_wav_rejects_other_encodings(tmp_path, kwargs, msg):
    _raw_wav(tmp_path / "bad.wav", **kwargs)
    with pytest.raises(DataError, match=msg):
        read_wav(tmp_path / "bad.wav")


def test_wav_rejects_garbage(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(DataError):
        read_wav(tmp_path / "junk.wav")


def test_pgm_layout(tmp_path):
    grid = np.array([[-1.0, 1.0, 0.0], [0.5, -0.5, 2.0]])
    blob = pgm_bytes(grid)
    header = b"P5\n3 2\n255\n"
    assert blob.startswith(header)
    pixels = np.frombuffer(blob[len(header) :], dtype=np.uint8).reshape(2, 3)
    # mel bin 0 is the bottom row
    assert pixels[1].tolist() == [0, 255, 128]
    assert pixels[0].tolist() == [191, 64, 255]
    write_pgm(tmp_path / "g.pgm", grid)
    assert np.allclose(read_pgm(tmp_path / "g.pgm"), np.clip(grid, -1, 1), atol=1 / 127.5)


def test_manifest_round_trip(tmp_path):
    rows = [ManifestRow("a.wav", "angry", "spk1", "hello, world"), ManifestRow("b.wav", "sad", "spk2", "")]
    write_manifest(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,emotion,speaker,text"
    assert read_manifest(tmp_path / "m.csv") == rows


def test_manifest_rejects_bad_header_and_labels(tmp_path):
    (tmp_path / "h.csv").write_text("file,label\nx,y\n")
    with pytest.raises(DataError, match="header"):
        read_manifest(tmp_path / "h.csv")
    (tmp_path / "e.csv").write_text("path,emotion,speaker,text\nx.wav,bored,s,t\n")
    with pytest.raises(DataError, match="bored"):
        read_manifest(tmp_path / "e.csv")


def test_empty_manifest(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert read_manifest(tmp_path / "empty.csv") == []
