"""Evaluation machinery: UAR, confusion matrices, MAD, LOSO, cross-corpus splits and the adaptation sweep."""
from __future__ import annotations

import io
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import EMOTIONS
from .audio.features import MelSpectrogram
from .audio.io import write_pgm
from .autodiff.edtf import atomic_write_bytes
from .checkpoint import write_json
from .classifier import ClassifierConfig, predict_corpus, train_classifier
from .corpus import group_by_utterance, speakers
from .errors import DataError
from .rng import stream

CONDITIONS = ("real", "syn", "real+syn", "+mixup")
REPORT_COLUMNS = ("protocol", "condition", "fold", "seed", "uar") + tuple(f"recall_{e}" for e in EMOTIONS)


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], classes: int = len(EMOTIONS)) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def _class_name(i: int, classes: int) -> str:
    return EMOTIONS[i] if classes == len(EMOTIONS) else f"class {i}"


def recalls(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    for i, r in enumerate(rows):
        if r <= 0:
            raise DataError(f"no test examples for {_class_name(i, len(rows))}; UAR is undefined")
    return np.diag(cm) / rows


def uar(cm: np.ndarray) -> float:
    """Unweighted average recall: the mean of per-class recalls."""
    return float(np.mean(recalls(cm)))


def _class_mean(segments: Sequence[MelSpectrogram], emotion: str, which: str) -> np.ndarray:
    grids = [s.values for s in segments if s.emotion == emotion]
    if not grids:
        raise DataError(f"{which} set has no {emotion} segments")
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise DataError(f"{which} {emotion} segments have mixed shapes {sorted(shapes)}; pad or segment first")
    return np.mean(np.stack(grids), axis=0)


def mad(real_set: Sequence[MelSpectrogram], syn_set: Sequence[MelSpectrogram], emotion: str) -> float:
    """Mean over grid cells of |class mean of real - class mean of synthetic|."""
    a, b = _class_mean(real_set, emotion, "real"), _class_mean(syn_set, emotion, "synthetic")
    if a.shape != b.shape:
        raise DataError(f"real grids are {a.shape} but synthetic grids are {b.shape}")
    return float(np.mean(np.abs(a - b)))


def mad_table(real_set, syn_set, emotions: Sequence[str] = EMOTIONS) -> dict[str, float]:
    """Per-emotion MAD plus ``total``, the plain sum of the per-emotion values."""
    table = {e: mad(real_set, syn_set, e) for e in emotions}
    total = 0.0
    for e in emotions:
        total += table[e]
    table["total"] = total
    return table


# --------------------------------------------------------------------------
# splits


def loso_split(corpus: Sequence[MelSpectrogram], speaker_held_out: str):
    spk = speakers(corpus)
    if len(spk) < 2:
        raise DataError(f"leave-one-speaker-out needs at least 2 speakers, got {len(spk)}")
    if speaker_held_out not in spk:
        raise DataError(f"unknown speaker {speaker_held_out!r}; corpus has {spk}")
    train = [s for s in corpus if s.speaker != speaker_held_out]
    test = [s for s in corpus if s.speaker == speaker_held_out]
    return train, test


def _stratified(groups: "dict[str, list]", fraction: float, rng: np.random.Generator, what: str):
    """Split utterance groups per emotion; the first side gets ``round(fraction * N)`` utterances overall.

    Per-class quotas use largest-remainder rounding, so each class is within
    one utterance of ``fraction`` and the total is exact.
    """
    by_class: dict[str, list[str]] = {}
    for uid, segs in groups.items():
        by_class.setdefault(segs[0].emotion, []).append(uid)
    classes = [e for e in EMOTIONS if e in by_class] + sorted(set(by_class) - set(EMOTIONS))
    sizes = np.array([len(by_class[c]) for c in classes])
    exact = fraction * sizes
    quota = np.floor(exact).astype(int)
    remainder = int(round(fraction * sizes.sum())) - quota.sum()
    for i in sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))[: max(remainder, 0)]:
        quota[i] += 1
    first, second = [], []
    for c, q in zip(classes, quota):
        uids = by_class[c]
        perm = rng.permutation(len(uids))
        if q == 0 or q == len(uids):
            raise DataError(
                f"{what}: class {c} ({len(uids)} utterances) would be absent from one side; "
                "try a different seed or fraction"
            )
        first.extend(uids[i] for i in perm[:q])
        second.extend(uids[i] for i in perm[q:])
    return first, second


def _materialize(groups, uids) -> list[MelSpectrogram]:
    keep = set(uids)
    return [s for uid, segs in groups.items() if uid in keep for s in segs]


def stratified_split(corpus: Sequence[MelSpectrogram], fraction: float, seed: int, what: str = "split"):
    """Utterance-level stratified split into (``fraction``, rest); corpus order is preserved on both sides."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    groups = group_by_utterance(corpus)
    first, second = _stratified(groups, fraction, stream(seed, what), what)
    return _materialize(groups, first), _materialize(groups, second)


def cross_corpus_split(target_corpus: Sequence[MelSpectrogram], dev_fraction: float = 0.30, seed: int = 0):
    """Seeded, emotion-stratified (dev, test) split of the target corpus."""
    return stratified_split(target_corpus, dev_fraction, seed, "cross-corpus")


def adaptation_subset(pool: Sequence[MelSpectrogram], percent: float, seed: int) -> list[MelSpectrogram]:
    """First ``percent``% of a seeded utterance order; subsets are nested as ``percent`` grows."""
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"percentages must be in [0, 100], got {percent}")
    groups = group_by_utterance(pool)
    uids = list(groups)
    order = stream(seed, "adaptation.order").permutation(len(uids))
    count = int(math.floor(percent / 100.0 * len(uids) + 1e-9))
    return _materialize(groups, [uids[i] for i in order[:count]])


# --------------------------------------------------------------------------
# runs and reports


@dataclass
class RunResult:
    protocol: str
    condition: str
    fold: str
    seed: int
    uar: float
    recalls: list[float]
    confusion: list[list[int]]
    best_epoch: int = 0

    def csv_row(self) -> list[str]:
        return [self.protocol, self.condition, self.fold, str(self.seed), f"{100 * self.uar:.2f}"] + [
            f"{100 * r:.2f}" for r in self.recalls
        ]


@dataclass
class ExperimentReport:
    protocol: str
    condition: str
    uar_mean: float
    uar_std: float
    confusion: list[list[int]]
    runs: list[RunResult]
    seeds: list[int]
    config: dict = field(default_factory=dict)
    mad: dict[str, float] | None = None

    def to_json(self) -> dict:
        return asdict(self)


def summarize(protocol: str, condition: str, runs: list[RunResult], config: dict | None = None,
              mad_values: dict | None = None) -> ExperimentReport:
    uars = np.array([r.uar for r in runs])
    cm = np.sum([np.array(r.confusion) for r in runs], axis=0).astype(int).tolist() if runs else []
    return ExperimentReport(protocol, condition, float(uars.mean()), float(uars.std()), cm, runs,
                            sorted({r.seed for r in runs}), config or {}, mad_values)


def reports_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        for run in rep.runs:
            w.writerow(run.csv_row())
    return buf.getvalue()


def write_reports(outdir: str | Path, name: str, reports: Sequence[ExperimentReport]) -> None:
    """``{name}.json`` (full), ``{name}.csv`` (flat rows) and one confusion heatmap PGM per report."""
    outdir = Path(outdir)
    write_json(outdir / f"{name}.json", [r.to_json() for r in reports])
    atomic_write_bytes(outdir / f"{name}.csv", reports_csv(reports).encode())
    for rep in reports:
        cm = np.asarray(rep.confusion, dtype=np.float64)
        if cm.size:
            rows = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
            # row 0 (angry) at the top of the image: write_pgm puts row 0 at the bottom
            write_pgm(outdir / f"{name}-{rep.condition.replace('+', 'plus')}-confusion.pgm", 2 * rows[::-1] - 1)


def condition_training_set(condition: str, real: Sequence[MelSpectrogram], syn: Sequence[MelSpectrogram]):
    """(segments, mixup flag) for one experimental condition."""
    if condition == "real":
        return list(real), False
    if condition == "syn":
        return list(syn), False
    if condition == "real+syn":
        return list(real) + list(syn), False
    if condition == "+mixup":
        return list(real) + list(syn), True
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


@dataclass
class Job:
    protocol: str
    condition: str
    fold: str
    seed: int
    train: list
    dev: list
    test: list
    mixup: bool
    cfg: ClassifierConfig


def run_job(job: Job) -> RunResult:
    if not job.train:
        raise DataError(f"{job.protocol}/{job.condition}/{job.fold}: empty training set")
    model, history = train_classifier(job.train, job.dev, job.cfg, seed=job.seed, mixup=job.mixup)
    truth, pred = predict_corpus(model, job.test)
    cm = confusion_matrix(truth, pred)
    return RunResult(job.protocol, job.condition, job.fold, job.seed, uar(cm), recalls(cm).tolist(),
                     cm.tolist(), history.best_epoch)


def run_jobs(jobs: Sequence[Job], n_jobs: int = 1) -> list[RunResult]:
    """Run independent jobs, in parallel when ``n_jobs > 1``; results keep the input order."""
    if n_jobs <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(run_job, jobs))


SynthFn = Callable[[Sequence[MelSpectrogram], str, int], list]


def _needs_syn(conditions) -> bool:
    return any(c != "real" for c in conditions)


def loso_experiment(
    corpus: Sequence[MelSpectrogram],
    synthesize: SynthFn | None,
    cfg: ClassifierConfig,
    seeds: Sequence[int],
    conditions: Sequence[str] = CONDITIONS,
    dev_fraction: float = 0.1,
    n_jobs: int = 1,
    folds: Sequence[str] | None = None,
) -> list[ExperimentReport]:
    """Leave-one-speaker-out runs for every (condition, fold, seed).

    ``folds`` restricts the held-out speakers (default: all of them).

    ``synthesize(train_real, fold, seed)`` returns the synthetic segments for a
    fold; synthetic data never enters dev or test. Dev is a stratified slice
    of the training speakers' real utterances.
    """
    for c in conditions:
        condition_training_set(c, [], [])
    if _needs_syn(conditions) and synthesize is None:
        raise ValueError("conditions other than 'real' need a synthesizer")
    all_speakers = speakers(corpus)
    for spk in folds or ():
        if spk not in all_speakers:
            raise DataError(f"unknown fold speaker {spk!r}; corpus has {all_speakers}")
    jobs = []
    for spk in folds or all_speakers:
        train, test = loso_split(corpus, spk)
        for seed in seeds:
            dev, real = stratified_split(train, dev_fraction, seed, f"loso-dev-{spk}")
            syn = synthesize(real, spk, seed) if _needs_syn(conditions) else []
            for c in conditions:
                segs, mix = condition_training_set(c, real, syn)
                jobs.append(Job("loso", c, spk, seed, segs, dev, test, mix, cfg))
    results = run_jobs(jobs, n_jobs)
    return [summarize("loso", c, [r for r in results if r.condition == c], {"classifier": asdict(cfg)})
            for c in conditions]


def cross_corpus_experiment(
    source: Sequence[MelSpectrogram],
    target: Sequence[MelSpectrogram],
    synthesize: SynthFn | None,
    cfg: ClassifierConfig,
    seeds: Sequence[int],
    conditions: Sequence[str] = CONDITIONS,
    dev_fraction: float = 0.30,
    n_jobs: int = 1,
) -> list[ExperimentReport]:
    """Train on the source corpus; select on 30% of the target, test on the other 70%."""
    if _needs_syn(conditions) and synthesize is None:
        raise ValueError("conditions other than 'real' need a synthesizer")
    jobs = []
    for seed in seeds:
        dev, test = cross_corpus_split(target, dev_fraction, seed)
        syn = synthesize(list(source), "cross", seed) if _needs_syn(conditions) else []
        for c in conditions:
            segs, mix = condition_training_set(c, source, syn)
            jobs.append(Job("cross-corpus", c, "target", seed, segs, dev, test, mix, cfg))
    results = run_jobs(jobs, n_jobs)
    return [summarize("cross-corpus", c, [r for r in results if r.condition == c], {"classifier": asdict(cfg)})
            for c in conditions]


def adaptation_sweep(
    source_train: Sequence[MelSpectrogram],
    target_corpus: Sequence[MelSpectrogram],
    percentages: Sequence[float],
    conditions: Sequence[str],
    seeds: Sequence[int],
    cfg: ClassifierConfig,
    synthesize: SynthFn | None = None,
    dev_fraction: float = 0.1,
    n_jobs: int = 1,
) -> list[ExperimentReport]:
    """Half of the target is the adaptation pool, the other half the fixed test set.

    For each percentage ``p`` the first ``p``% of the (seeded) pool joins the
    training data of every condition. Dev is a stratified slice of the
    source's real utterances. One report per (p, condition); fold = ``p{p}``.
    """
    for p in percentages:
        if not 0.0 <= p <= 100.0:
            raise ValueError(f"percentages must be in [0, 100], got {p}")
    if _needs_syn(conditions) and synthesize is None:
        raise ValueError("conditions other than 'real' need a synthesizer")
    jobs = []
    for seed in seeds:
        pool, test = stratified_split(target_corpus, 0.5, seed, "adaptation-pool")
        dev, source_real = stratified_split(source_train, dev_fraction, seed, "adaptation-dev")
        syn = synthesize(source_real, "adaptation", seed) if _needs_syn(conditions) else []
        for p in percentages:
            extra = adaptation_subset(pool, p, seed)
            for c in conditions:
                segs, mix = condition_training_set(c, source_real, syn)
                if not segs and not extra:
                    raise DataError(f"p={p:g} with an empty source training set for condition {c}")
                jobs.append(Job("adaptation", c, f"p{p:g}", seed, segs + extra, dev, test, mix, cfg))
    results = run_jobs(jobs, n_jobs)
    reports = []
    for p in percentages:
        for c in conditions:
            runs = [r for r in results if r.condition == c and r.fold == f"p{p:g}"]
            reports.append(summarize("adaptation", c, runs, {"classifier": asdict(cfg), "percent": p}))
    return reports
