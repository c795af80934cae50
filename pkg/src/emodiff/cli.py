"""``emodiff`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Every command writes ``config.txt`` (the resolved
configuration) next to its outputs; reruns with the same inputs, config and
seed produce byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import EMOTIONS
from .audio.features import MelFilterbank, MelSpectrogram, NormalizationSpec, log_mel, segment
from .audio.griffin_lim import griffin_lim
from .audio.io import read_manifest, read_wav, write_pgm, write_wav
from .autodiff.edtf import atomic_write_bytes
from .checkpoint import write_json
from .classifier import predict_corpus, train_classifier
from .config import ConfigError, RunConfig, load_config
from .corpus import load_corpus, speakers, write_corpus
from .denoiser import ConditionSpec, load_denoiser, sample, train_diffusion
from .errors import DataError, DimensionMismatchError, NumericalError
from .experiments import Synthesizer, conditions_for, sampling_schedule
from .protocols import (ExperimentReport, adaptation_sweep, confusion_matrix, cross_corpus_experiment,
                        loso_experiment, mad_table, recalls, uar, write_reports)
from .toydata import write_toy_corpus

log = logging.getLogger("emodiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# shared plumbing


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    flag_map = {
        "seed": "run.seed", "jobs": "run.jobs", "schedule": "diffusion.schedule", "steps": "diffusion.T",
        "train_steps": "diffusion.train_steps", "sample_steps": "diffusion.sample_steps", "epochs": "classifier.epochs",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    cfg = load_config(args.config, overrides, args.preset)
    errors = cfg.consistency_errors()
    if errors:
        raise ConfigError("inconsistent configuration: " + "; ".join(errors))
    return cfg


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path) -> None:
    log.info("resolved configuration:\n%s", cfg.to_text().rstrip())
    atomic_write_bytes(out / "config.txt", cfg.to_text().encode())


def _corpus(manifest: str, frames: int) -> list[MelSpectrogram]:
    path = Path(manifest)
    if not path.exists():
        raise DataError(f"expected a corpus manifest at {path}")
    return load_corpus(path, frames)


def _with_config(reports: list[ExperimentReport], cfg: RunConfig) -> list[ExperimentReport]:
    for rep in reports:
        rep.config = {**cfg.to_dict(), **{k: v for k, v in rep.config.items() if k != "classifier"}}
    return reports


# --------------------------------------------------------------------------
# commands


def cmd_gen_toy(args, cfg: RunConfig) -> int:
    spec = cfg.toy
    if args.shift is not None:
        spec = spec.twin(args.shift, seed=spec.seed + 1 if args.data_seed is None else args.data_seed)
    elif args.data_seed is not None:
        spec = replace(spec, seed=args.data_seed)
    out = _outdir(args.out)
    manifest = write_toy_corpus(spec, out)
    _snapshot(cfg, out)
    log.info("wrote %s", manifest)
    return EXIT_OK


def cmd_featurize(args, cfg: RunConfig) -> int:
    out = _outdir(args.out)
    a = cfg.audio
    rows = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    fb = MelFilterbank(a.n_mels, a.n_fft, a.sample_rate, a.f_min, a.f_max)
    grids, failures = [], []
    for row in rows:
        try:
            w = read_wav(base / row.path)
            if w.sample_rate != a.sample_rate:
                raise DataError(f"sample rate {w.sample_rate} Hz, expected {a.sample_rate} Hz")
            grids.append((row, log_mel(w, fb, a.hop)))
        except (DataError, OSError, ValueError) as exc:
            failures.append({"path": row.path, "error": str(exc)})
            log.error("%s: %s", row.path, exc)
    if not rows:
        log.warning("manifest %s lists no files; writing an empty corpus", args.manifest)
    norm = NormalizationSpec.from_log_mels([g for _, g in grids]) if grids else None
    segments = []
    for row, g in grids:
        uid = Path(row.path).with_suffix("").as_posix().replace("/", "_")
        m = MelSpectrogram(norm.normalize(g), source_id=uid, emotion=row.emotion, speaker=row.speaker, text=row.text,
                           frame_hop=a.hop)
        segments.extend(segment(m, a.frames))
    write_corpus(segments, out)
    write_json(out / "stats.json", {
        "normalization": norm.to_json() if norm else None,
        "files": len(rows), "featurized": len(grids), "segments": len(segments), "failures": failures,
    })
    _snapshot(cfg, out)
    if failures:
        log.warning("%d of %d files failed; see %s", len(failures), len(rows), out / "stats.json")
    return EXIT_OK


def cmd_train_diffusion(args, cfg: RunConfig) -> int:
    corpus = _corpus(args.data, cfg.classifier.frames)
    out = _outdir(args.out)
    _snapshot(cfg, out)
    model, _ = train_diffusion([s.values for s in corpus], conditions_for(corpus), cfg.denoiser, cfg.diffusion,
                               seed=cfg.run.seed, out_dir=out)
    log.info("checkpoint at %s", out / "checkpoint")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    ckpt = Path(args.checkpoint)
    model, meta = load_denoiser(ckpt / "checkpoint" if (ckpt / "checkpoint").is_dir() else ckpt)
    diffusion = cfg.diffusion
    if meta.get("schedule"):  # sample on the schedule the model was trained with
        kind, T = meta["schedule"]["kind"], meta["schedule"]["T"]
        steps = args.sample_steps or min(diffusion.sample_steps, T)
        try:
            diffusion = replace(diffusion, schedule=kind, T=T, sample_steps=steps)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        cfg = replace(cfg, diffusion=diffusion)
    out = _outdir(args.out)
    _snapshot(cfg, out)
    spec = ConditionSpec.from_text(args.emotion, args.speaker, args.text)
    frames = args.frames or cfg.classifier.frames
    grids = sample(model, [spec] * args.count, frames, sampling_schedule(diffusion), cfg.run.seed) if args.count else []
    segs = [MelSpectrogram(g, source_id=f"sample-{k:05d}#0", emotion=spec.emotion, speaker=spec.speaker, text=args.text)
            for k, g in enumerate(grids)]
    write_corpus(segs, out)
    for s in segs:
        write_pgm(out / f"{s.source_id.split('#')[0]}.pgm", s.values)
    if args.wav and segs:
        stats = Path(args.wav)
        if not stats.exists():
            raise DataError(f"expected featurize statistics at {stats}")
        saved = json.loads(stats.read_text()).get("normalization")
        if not saved:
            raise DataError(f"{stats} has no normalization range")
        norm = NormalizationSpec(**saved)
        a = cfg.audio
        fb = MelFilterbank(model.cfg.in_channels, a.n_fft, a.sample_rate, a.f_min, a.f_max)
        for s in segs:
            wav = griffin_lim(s, fb, norm, a.griffin_lim_iterations, seed=cfg.run.seed)
            write_wav(out / f"{s.source_id.split('#')[0]}.wav", wav)
    log.info("wrote %d samples to %s", len(segs), out)
    return EXIT_OK


def cmd_eval_mad(args, cfg: RunConfig) -> int:
    real = _corpus(args.real, cfg.classifier.frames)
    syn = _corpus(args.syn, cfg.classifier.frames)
    table = mad_table(real, syn)
    out = _outdir(args.out)
    write_json(out / "mad.json", {"mad": table, "real": args.real, "syn": args.syn})
    lines = ["emotion,mad"] + [f"{k},{table[k]:.6f}" for k in (*EMOTIONS, "total")]
    atomic_write_bytes(out / "mad.csv", ("\n".join(lines) + "\n").encode())
    _snapshot(cfg, out)
    print("\n".join(lines))
    return EXIT_OK


def cmd_train_ser(args, cfg: RunConfig) -> int:
    frames = cfg.classifier.frames
    train = _corpus(args.train, frames)
    dev = _corpus(args.dev, frames)
    out = _outdir(args.out)
    _snapshot(cfg, out)
    model, history = train_classifier(train, dev, cfg.classifier, seed=cfg.run.seed, mixup=args.mixup, out_dir=out)
    if args.test:
        truth, pred = predict_corpus(model, _corpus(args.test, frames))
        cm = confusion_matrix(truth, pred)
        write_json(out / "test.json", {"uar": uar(cm), "recalls": dict(zip(EMOTIONS, recalls(cm).tolist())),
                                       "confusion": cm.tolist(), "best_epoch": history.best_epoch})
        print(f"test UAR {100 * uar(cm):.2f}")
    return EXIT_OK


def _synthesizer(args, cfg: RunConfig, corpus, out: Path) -> Synthesizer:
    generator = None
    if args.generator:
        generator = Path(args.generator)
        generator = generator / "checkpoint" if (generator / "checkpoint").is_dir() else generator
    return Synthesizer(cfg.denoiser, cfg.diffusion, ratio=cfg.experiment.syn_ratio, scope=cfg.experiment.generator_scope,
                       corpus=corpus, out_dir=out / "generators", generator_path=generator)


def cmd_augment_exp(args, cfg: RunConfig) -> int:
    corpus = _corpus(args.data, cfg.classifier.frames)
    if len(speakers(corpus)) < 2:
        raise DataError("leave-one-speaker-out needs at least two speakers in the corpus")
    out = _outdir(args.out)
    _snapshot(cfg, out)
    e = cfg.experiment
    reports = loso_experiment(corpus, _synthesizer(args, cfg, corpus, out), cfg.classifier, e.seeds, e.conditions,
                              e.dev_fraction, cfg.run.jobs)
    write_reports(out, "augment", _with_config(reports, cfg))
    for rep in reports:
        print(f"{rep.condition:9s} UAR {100 * rep.uar_mean:.2f} +- {100 * rep.uar_std:.2f}")
    return EXIT_OK


def cmd_cross_corpus(args, cfg: RunConfig) -> int:
    frames = cfg.classifier.frames
    source, target = _corpus(args.source, frames), _corpus(args.target, frames)
    out = _outdir(args.out)
    _snapshot(cfg, out)
    e = cfg.experiment
    synth = _synthesizer(args, cfg, source, out)
    reports = cross_corpus_experiment(source, target, synth, cfg.classifier, e.seeds, e.conditions,
                                      e.cross_dev_fraction, cfg.run.jobs)
    write_reports(out, "cross-corpus", _with_config(reports, cfg))
    sweep_conditions = tuple(c for c in e.conditions if c in ("real", "real+syn")) or ("real",)
    sweep = adaptation_sweep(source, target, e.percentages, sweep_conditions, e.seeds, cfg.classifier, synth,
                             e.dev_fraction, cfg.run.jobs)
    write_reports(out, "adaptation", _with_config(sweep, cfg))
    lines = ["percent,condition,uar_mean,uar_std"] + [
        f"{rep.config['percent']:g},{rep.condition},{100 * rep.uar_mean:.2f},{100 * rep.uar_std:.2f}" for rep in sweep]
    atomic_write_bytes(out / "adaptation-curve.csv", ("\n".join(lines) + "\n").encode())
    for rep in reports:
        print(f"cross-corpus {rep.condition:9s} UAR {100 * rep.uar_mean:.2f}")
    print("\n".join(lines[1:]))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", choices=("toy", "paper"), help="base preset (default: from the file, else paper)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    diffusion = argparse.ArgumentParser(add_help=False)
    diffusion.add_argument("--schedule", choices=("cosine", "linear"))
    diffusion.add_argument("--steps", type=int, help="diffusion steps T")
    diffusion.add_argument("--train-steps", type=int, help="optimizer steps")
    diffusion.add_argument("--sample-steps", type=int, help="strided sampling steps S")

    ser = argparse.ArgumentParser(add_help=False)
    ser.add_argument("--epochs", type=int)

    p = _Parser(prog="emodiff", description="Diffusion-based data augmentation for speech emotion recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("gen-toy", parents=[common], help="write a procedural toy corpus")
    c.add_argument("--out", required=True)
    c.add_argument("--shift", type=float, help="write the distribution-shifted twin instead")
    c.add_argument("--data-seed", type=int, help="corpus sampling seed (default: toy.seed)")
    c.set_defaults(func=cmd_gen_toy)

    c = sub.add_parser("featurize", parents=[common], help="WAV manifest -> normalized log-mel segments")
    c.add_argument("manifest")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_featurize)

    c = sub.add_parser("train-diffusion", parents=[common, diffusion], help="train the conditional denoiser")
    c.add_argument("--data", required=True, help="spectrogram corpus manifest")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_diffusion)

    c = sub.add_parser("sample", parents=[common, diffusion], help="generate spectrograms for one condition")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--emotion", required=True, choices=EMOTIONS)
    c.add_argument("--speaker", required=True)
    c.add_argument("--text", default="")
    c.add_argument("--count", type=int, default=1)
    c.add_argument("--frames", type=int, help="frames per sample (default: classifier.frames)")
    c.add_argument("--wav", metavar="STATS_JSON", help="also write Griffin-Lim audio using featurize statistics")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_sample)

    c = sub.add_parser("eval-mad", parents=[common], help="per-emotion MAD between two corpora")
    c.add_argument("--real", required=True)
    c.add_argument("--syn", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_eval_mad)

    c = sub.add_parser("train-ser", parents=[common, ser], help="train the emotion classifier")
    c.add_argument("--train", required=True)
    c.add_argument("--dev", required=True)
    c.add_argument("--test")
    c.add_argument("--mixup", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_ser)

    for name, func, helptext in (("augment-exp", cmd_augment_exp, "LOSO comparison of the four training conditions"),
                                 ("cross-corpus", cmd_cross_corpus, "cross-corpus protocol and adaptation sweep")):
        c = sub.add_parser(name, parents=[common, diffusion, ser], help=helptext)
        if name == "augment-exp":
            c.add_argument("--data", required=True)
        else:
            c.add_argument("--source", required=True)
            c.add_argument("--target", required=True)
        c.add_argument("--generator", help="use this trained denoiser instead of training one per seed")
        c.add_argument("--out", required=True)
        c.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"emodiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"emodiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, DimensionMismatchError, FileNotFoundError) as exc:
        print(f"emodiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
