"""Acceptance criteria, one PASS/FAIL line each.

Criteria 1-3 re-run the oracle tests that encode them in a child pytest and
time it; the others are computed here. Lines are echoed as they finish and
repeated in the terminal summary.
"""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from emodiff import EMOTIONS
from emodiff.cli import main
from emodiff.config import RunConfig
from emodiff.experiments import toy_adaptation_trend, toy_augmentation_trend
from emodiff.protocols import mad, mad_table
from emodiff.toydata import ToyCorpusSpec, generate_toy_corpus

TESTS = Path(__file__).parent


def report(capsys, number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert passed, line


def run_oracles(*selection):
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selection],
                          cwd=TESTS.parent, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, time.time() - t0, tail


def test_criterion_1_diffusion_oracles(capsys):
    ok, secs, tail = run_oracles("tests/test_diffusion.py")
    report(capsys, 1, ok and secs < 120, f"diffusion oracle suite {tail!r} in {secs:.0f} s (limit 120 s)")


def test_criterion_2_gradients(capsys):
    ok, secs, tail = run_oracles("tests/test_autodiff.py", "-k", "prop or gradients",
                                 "tests/test_diffusion.py::TestHybridLoss::test_gradients",
                                 "tests/test_denoiser.py::test_full_network_gradients",
                                 "tests/test_classifier.py::test_full_network_gradients")
    report(capsys, 2, ok and secs < 300,
           f"finite-difference suite, 20 seeds per graph, {tail!r} in {secs:.0f} s (limit 300 s)")


def test_criterion_3_signal(capsys):
    ok, secs, tail = run_oracles("tests/test_audio.py", "-k", "fft or three_second or griffin_lim_pure_tone")
    report(capsys, 3, ok and secs < 120, f"signal suite {tail!r} in {secs:.0f} s (limit 120 s)")


def test_criterion_4_mad(capsys):
    real = generate_toy_corpus(ToyCorpusSpec(utterances=20))
    syn = generate_toy_corpus(ToyCorpusSpec(utterances=20, seed=5))
    self_zero = all(mad(real, real, e) == 0.0 for e in EMOTIONS)
    table = mad_table(real, syn)
    parts = [table[e] for e in EMOTIONS]
    total_ok = table["total"] == parts[0] + parts[1] + parts[2] + parts[3]
    report(capsys, 4, self_zero and total_ok and table["total"] > 0,
           f"mad(S,S)=0 {self_zero}; total {table['total']:.6f} equals sum of per-emotion values {total_ok}")


@pytest.mark.slow
def test_criterion_5_toy_augmentation(capsys):
    t0 = time.time()
    reports = {r.condition: r for r in toy_augmentation_trend(RunConfig.preset("toy"), seeds=(0, 1, 2))}
    secs = time.time() - t0
    real, syn, mixed = reports["real"], reports["syn"], reports["real+syn"]
    wins = sum(m.uar > r.uar for m, r in zip(mixed.runs, real.runs))
    ok = syn.uar_mean > 0.40 and mixed.uar_mean >= real.uar_mean - 0.02 and secs < 1800
    flag = "" if wins >= 2 else f"; FLAGGED for inspection: real+syn beats real on {wins}/3 seeds"
    report(capsys, 5, ok,
           f"syn-only UAR {syn.uar_mean:.3f} (> 0.40); real+syn {mixed.uar_mean:.3f} vs real {real.uar_mean:.3f} "
           f"(>= real - 0.02); wins {wins}/3; {secs:.0f} s (limit 1800 s){flag}")


@pytest.mark.slow
def test_criterion_6_cross_corpus(capsys):
    t0 = time.time()
    p0, p100 = toy_adaptation_trend(RunConfig.preset("toy"), seeds=(0, 1, 2), shift=0.5, percentages=(0, 100))
    secs = time.time() - t0
    report(capsys, 6, p100.uar_mean >= p0.uar_mean and secs < 1200,
           f"twin shift 0.5: UAR p=100 {p100.uar_mean:.3f} vs p=0 {p0.uar_mean:.3f}; {secs:.0f} s (limit 1200 s)")


SMALL = ["--preset", "toy", "--set", "toy.utterances=3", "--set", "diffusion.train_steps=3",
         "--set", "diffusion.batch=4", "--set", "diffusion.sample_steps=5", "--set", "classifier.epochs=1",
         "--set", "classifier.conv_filters=4,4,4", "--set", "classifier.hidden=4", "--set", "denoiser.res_filters=16",
         "--set", "denoiser.n_res_pre=1", "--set", "denoiser.n_res_post=1", "--set", "experiment.seeds=0",
         "--set", "experiment.dev_fraction=0.34", "--seed", "3"]


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path, capsys):
    from emodiff.audio.features import Waveform
    from emodiff.audio.io import write_wav

    wav_dir = tmp_path / "wav"
    wav_dir.mkdir()
    t = np.arange(2 * 22050) / 22050
    write_wav(wav_dir / "a.wav", Waveform(0.4 * np.sin(2 * np.pi * 300 * t)))
    (wav_dir / "m.csv").write_text("path,emotion,speaker,text\na.wav,happy,s1,some words\n")

    def commands(root):
        toy, twin, gen = root / "toy", root / "twin", root / "gen"
        data = str(toy / "manifest.csv")
        return [
            ("gen-toy", ["gen-toy", "--out", str(toy)]),
            ("gen-toy --shift", ["gen-toy", "--shift", "0.5", "--out", str(twin)]),
            ("featurize", ["featurize", str(wav_dir / "m.csv"), "--out", str(root / "feat")]),
            ("train-diffusion", ["train-diffusion", "--data", data, "--out", str(gen)]),
            ("sample", ["sample", "--checkpoint", str(gen), "--emotion", "sad", "--speaker", "toy-spk1",
                        "--count", "2", "--wav", str(root / "feat" / "stats.json"), "--out", str(root / "smp")]),
            ("eval-mad", ["eval-mad", "--real", data, "--syn", str(twin / "manifest.csv"),
                          "--out", str(root / "mad")]),
            ("train-ser", ["train-ser", "--train", data, "--dev", data, "--test", data, "--mixup",
                           "--out", str(root / "ser")]),
            ("augment-exp", ["augment-exp", "--data", data, "--generator", str(gen), "--out", str(root / "aug")]),
            ("cross-corpus", ["cross-corpus", "--source", data, "--target", str(twin / "manifest.csv"),
                              "--generator", str(gen), "--set", "experiment.percentages=0,100",
                              "--out", str(root / "xc")]),
        ]

    failures = []
    runs = [commands(tmp_path / "a"), commands(tmp_path / "b")]
    for (name, args_a), (_, args_b) in zip(*runs):
        codes = main([*args_a, *SMALL]), main([*args_b, *SMALL])
        if codes != (0, 0):
            failures.append(f"{name} exit {codes}")
            continue
        out_a, out_b = Path(args_a[args_a.index("--out") + 1]), Path(args_b[args_b.index("--out") + 1])
        ta, tb = _tree(out_a), _tree(out_b)
        # run-specific absolute paths may appear in the snapshot, so compare with the root swapped
        tb = {k: v.replace(str(tmp_path / "b").encode(), str(tmp_path / "a").encode()) for k, v in tb.items()}
        if ta != tb or not ta:
            failures.append(name)
    report(capsys, 7, not failures,
           f"{len(runs[0])} CLI commands re-run byte-identically" if not failures else f"differs: {failures}")
