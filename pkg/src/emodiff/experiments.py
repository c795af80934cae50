"""Glue between the generator and the evaluation protocols.

A :class:`Synthesizer` is the ``synthesize(train_real, fold, seed)`` callable
the protocols expect. It trains (or loads) one diffusion generator per seed,
either on the whole corpus or on each fold's real training data, and samples
synthetic segments that mirror the labels and texts of the real ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion as D
from .audio.features import MelSpectrogram
from .classifier import ClassifierConfig
from .corpus import speakers
from .denoiser import (ConditionSpec, Denoiser, DenoiserConfig, DiffusionTrainConfig, load_denoiser, sample,
                       train_diffusion)
from .errors import DataError
from .protocols import CONDITIONS, ExperimentReport, adaptation_sweep, loso_experiment, summarize
from .rng import stream
from .toydata import generate_toy_corpus


def conditions_for(segments: Sequence[MelSpectrogram]) -> list[ConditionSpec]:
    return [ConditionSpec.from_text(s.emotion, s.speaker, s.text) for s in segments]


def fit_generator(segments: Sequence[MelSpectrogram], model_cfg: DenoiserConfig, train_cfg: DiffusionTrainConfig,
                  seed: int, out_dir: str | Path | None = None) -> Denoiser:
    if not segments:
        raise DataError("cannot train a generator on zero segments")
    model, _ = train_diffusion([s.values for s in segments], conditions_for(segments), model_cfg, train_cfg,
                               seed=seed, out_dir=out_dir)
    return model


def sampling_schedule(train_cfg: DiffusionTrainConfig) -> D.NoiseSchedule:
    base = D.make_schedule(train_cfg.schedule, train_cfg.T)
    if train_cfg.sample_steps >= train_cfg.T:
        return base
    return D.make_strided_schedule(base, train_cfg.sample_steps)


def synthesize_like(model: Denoiser, templates: Sequence[MelSpectrogram], schedule: D.NoiseSchedule, seed: int,
                    tag: str = "sample", prefix: str = "syn", batch: int = 64) -> list[MelSpectrogram]:
    """One synthetic segment per template, sharing its emotion, speaker and text."""
    if not templates:
        return []
    frames = templates[0].values.shape[1]
    grids = sample(model, conditions_for(templates), frames, schedule, seed, batch=batch, tag=tag)
    return [MelSpectrogram(g, source_id=f"{prefix}-{k:05d}#0", emotion=t.emotion, speaker=t.speaker, text=t.text)
            for k, (g, t) in enumerate(zip(grids, templates))]


@dataclass
class Synthesizer:
    """Generator cache plus the sampling policy.

    ``ratio`` synthetic segments are produced per real training segment. The
    templates are a seeded draw of the real training segments (without
    replacement while ``ratio <= 1``). With ``scope="corpus"`` one generator
    per seed is trained on ``corpus``; with ``scope="fold"`` each fold's real
    training data gets its own generator.
    """

    model_cfg: DenoiserConfig
    train_cfg: DiffusionTrainConfig
    ratio: float = 1.0
    scope: str = "corpus"
    corpus: Sequence[MelSpectrogram] | None = None
    out_dir: Path | None = None
    generator_path: Path | None = None  # use this checkpoint instead of training
    _models: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.scope not in ("corpus", "fold"):
            raise ValueError(f"scope must be 'corpus' or 'fold', got {self.scope!r}")
        if self.scope == "corpus" and self.corpus is None and self.generator_path is None:
            raise ValueError("scope='corpus' needs the corpus to train on")
        if self.ratio < 0:
            raise ValueError("ratio must be non-negative")

    def generator(self, fold: str, train_real: Sequence[MelSpectrogram], seed: int) -> Denoiser:
        key = ("corpus", seed) if self.scope == "corpus" else (fold, seed)
        if key not in self._models:
            if self.generator_path is not None:
                self._models[key] = load_denoiser(self.generator_path)[0]
            else:
                data = self.corpus if self.scope == "corpus" else train_real
                out = None if self.out_dir is None else Path(self.out_dir) / f"generator-{key[0]}-seed{seed}"
                self._models[key] = fit_generator(data, self.model_cfg, self.train_cfg, seed, out)
        return self._models[key]

    def __call__(self, train_real: Sequence[MelSpectrogram], fold: str, seed: int) -> list[MelSpectrogram]:
        count = int(round(self.ratio * len(train_real)))
        if count == 0:
            return []
        model = self.generator(fold, train_real, seed)
        rng = stream(seed, f"syn.templates.{fold}")
        idx = np.sort(rng.choice(len(train_real), count, replace=count > len(train_real)))
        templates = [train_real[i] for i in idx]
        return synthesize_like(model, templates, sampling_schedule(self.train_cfg), seed,
                               tag=f"syn.{fold}", prefix=f"syn-{fold}-s{seed}")


def rotating_loso(corpus: Sequence[MelSpectrogram], synthesize, cfg: ClassifierConfig, seeds: Sequence[int],
                  conditions: Sequence[str] = CONDITIONS, dev_fraction: float = 0.1,
                  n_jobs: int = 1) -> list[ExperimentReport]:
    """One leave-one-speaker-out fold per seed: seed ``s`` holds out speaker ``s mod n``.

    A cheaper stand-in for the full folds x seeds grid that still rotates
    the test speaker.
    """
    spk = speakers(corpus)
    runs = []
    for seed in seeds:
        for rep in loso_experiment(corpus, synthesize, cfg, [seed], conditions, dev_fraction, n_jobs,
                                   folds=[spk[seed % len(spk)]]):
            runs.extend(rep.runs)
    return [summarize("loso", c, [r for r in runs if r.condition == c], {"folds": "rotating"}) for c in conditions]


def toy_augmentation_trend(cfg, seeds: Sequence[int] = (0, 1, 2), syn_ratio: float = 0.5,
                           n_jobs: int = 1) -> list[ExperimentReport]:
    """real / syn / real+syn on the toy corpus described by ``cfg`` (a RunConfig)."""
    corpus = generate_toy_corpus(cfg.toy)
    synth = Synthesizer(cfg.denoiser, cfg.diffusion, ratio=syn_ratio, scope="fold")
    return rotating_loso(corpus, synth, cfg.classifier, seeds, ("real", "syn", "real+syn"),
                         cfg.experiment.dev_fraction, n_jobs)


def toy_adaptation_trend(cfg, seeds: Sequence[int] = (0, 1, 2), shift: float = 0.5,
                         percentages: Sequence[float] = (0, 100), n_jobs: int = 1) -> list[ExperimentReport]:
    """Train on the toy corpus, adapt with a slice of its shifted twin, test on the rest of the twin."""
    source = generate_toy_corpus(cfg.toy)
    target = generate_toy_corpus(cfg.toy.twin(shift))
    return adaptation_sweep(source, target, percentages, ("real",), seeds, cfg.classifier,
                            dev_fraction=cfg.experiment.dev_fraction, n_jobs=n_jobs)
