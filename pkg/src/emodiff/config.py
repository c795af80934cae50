"""Flat ``key = value`` run configuration with dotted section keys.

Resolution order: preset defaults, then the config file, then command-line
overrides. Unknown keys are rejected.
"""
from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .classifier import ClassifierConfig
from .denoiser import DenoiserConfig, DiffusionTrainConfig
from .protocols import CONDITIONS
from .toydata import ToyCorpusSpec

PRESETS = ("toy", "paper")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    frames: int = 256
    griffin_lim_iterations: int = 60


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    conditions: tuple[str, ...] = CONDITIONS
    percentages: tuple[float, ...] = (0.0, 25.0, 50.0, 75.0, 100.0)
    syn_ratio: float = 1.0  # synthetic segments per real training segment
    generator_scope: str = "corpus"  # "corpus": one generator per seed; "fold": one per fold
    dev_fraction: float = 0.1
    cross_dev_fraction: float = 0.3
    shift: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "percentages", tuple(float(p) for p in self.percentages))
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ValueError(f"unknown condition {c!r}; expected a subset of {CONDITIONS}")
        if self.generator_scope not in ("corpus", "fold"):
            raise ValueError(f"generator_scope must be 'corpus' or 'fold', got {self.generator_scope!r}")
        if self.syn_ratio < 0:
            raise ValueError("syn_ratio must be non-negative")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass(frozen=True)
class RunSettings:
    preset: str = "paper"
    seed: int = 0
    jobs: int = 1


SECTIONS = {
    "run": RunSettings,
    "audio": AudioConfig,
    "denoiser": DenoiserConfig,
    "diffusion": DiffusionTrainConfig,
    "classifier": ClassifierConfig,
    "toy": ToyCorpusSpec,
    "experiment": ExperimentConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings
    audio: AudioConfig
    denoiser: DenoiserConfig
    diffusion: DiffusionTrainConfig
    classifier: ClassifierConfig
    toy: ToyCorpusSpec
    experiment: ExperimentConfig

    @classmethod
    def preset(cls, name: str) -> RunConfig:
        if name == "paper":
            return cls(RunSettings("paper"), AudioConfig(), DenoiserConfig(), DiffusionTrainConfig(),
                       ClassifierConfig(), ToyCorpusSpec(mels=80, frames=256), ExperimentConfig())
        if name == "toy":
            return cls(RunSettings("toy"), AudioConfig(n_mels=16, frames=64), DenoiserConfig.toy(),
                       DiffusionTrainConfig.toy(), ClassifierConfig.toy(), ToyCorpusSpec(), ExperimentConfig())
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            for key, value in values.items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> RunConfig:
        grouped: dict[str, dict] = {}
        for dotted, raw in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in SECTIONS or not key:
                raise ConfigError(f"unknown config key {dotted!r}; keys look like 'section.field' with section in {sorted(SECTIONS)}")
            cls = SECTIONS[section]
            hints = typing.get_type_hints(cls)
            if key not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key {dotted!r}; {section} has {sorted(f.name for f in fields(cls))}")
            grouped.setdefault(section, {})[key] = _parse(raw, hints[key], dotted)
        updated = {}
        for section, values in grouped.items():
            try:
                updated[section] = replace(getattr(self, section), **values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{section}] settings: {exc}") from exc
        return replace(self, **updated)

    def consistency_errors(self) -> list[str]:
        errs = []
        if self.denoiser.in_channels != self.classifier.mels:
            errs.append(f"denoiser.in_channels={self.denoiser.in_channels} but classifier.mels={self.classifier.mels}")
        if self.toy.mels != self.classifier.mels or self.toy.frames != self.classifier.frames:
            errs.append("toy corpus grid must match classifier.mels x classifier.frames")
        return errs


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(_parse(part, inner, key) for part in raw.split(",") if part.strip())
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw.replace("_", ""))
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None, preset: str | None = None) -> RunConfig:
    """Resolve a config: preset (``run.preset`` from the file unless given) -> file -> overrides."""
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    overrides = dict(overrides or {})
    name = preset or overrides.pop("run.preset", None) or values.get("run.preset", "paper")
    cfg = RunConfig.preset(name)
    values.pop("run.preset", None)
    cfg = cfg.with_overrides(values).with_overrides(overrides)
    return replace(cfg, run=replace(cfg.run, preset=name))
