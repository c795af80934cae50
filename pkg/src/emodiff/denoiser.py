"""Conditional 1-D residual denoiser predicting noise and a variance fraction."""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import EMOTIONS
from . import diffusion as D
from .autodiff import Parameter, Tensor, adam_step, backward, get_dtype, no_grad
from .autodiff import functional as F
from .autodiff.edtf import atomic_write_bytes
from .autodiff.nn import Conv1d, Linear, Module, SelfAttention
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, DimensionMismatchError, NumericalError
from .rng import stream


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture. Defaults are the full-size model; :meth:`toy` is the desk-scale preset."""

    in_channels: int = 80
    res_filters: int = 1536
    n_res_pre: int = 8
    n_res_post: int = 3
    kernel: int = 3
    time_dim: int = 128
    cond_dim: int = 256
    token_dim: int = 256
    time_channels: int = 32
    cond_channels: int = 32
    vocab_size: int = 8192
    speaker_buckets: int = 256

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"DenoiserConfig.{name} must be positive, got {value}")
        if self.res_filters < self.in_channels:
            raise ValueError(f"res_filters ({self.res_filters}) must be >= in_channels ({self.in_channels})")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")

    @classmethod
    def toy(cls, **overrides) -> DenoiserConfig:
        base = dict(in_channels=16, res_filters=64, time_dim=32, cond_dim=32, token_dim=32,
                    time_channels=16, cond_channels=16, vocab_size=512, speaker_buckets=64)
        return cls(**{**base, **overrides})


@dataclass(frozen=True)
class DiffusionTrainConfig:
    schedule: str = "cosine"
    T: int = 4000
    train_steps: int = 120_000
    batch: int = 64
    lr: float = 1e-4
    sample_steps: int = 4000
    log_every: int = 100
    checkpoint_every: int = 10_000

    def __post_init__(self):
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.T < 1 or self.batch < 1 or self.train_steps < 0 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")
        if not 1 <= self.sample_steps <= self.T:
            raise ValueError(f"sample_steps must be in [1, T={self.T}], got {self.sample_steps}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be >= 1")

    @classmethod
    def toy(cls, **overrides) -> DiffusionTrainConfig:
        base = dict(T=200, train_steps=2000, batch=32, lr=1e-3, sample_steps=50, log_every=10, checkpoint_every=1000)
        return cls(**{**base, **overrides})


# --------------------------------------------------------------------------
# conditioning

_WORD = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(_WORD.findall(text.lower()))


@dataclass(frozen=True)
class ConditionSpec:
    emotion: str
    speaker: str
    tokens: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.emotion not in EMOTIONS:
            raise ValueError(f"unknown emotion {self.emotion!r}; expected one of {EMOTIONS}")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @classmethod
    def from_text(cls, emotion: str, speaker: str, text: str) -> ConditionSpec:
        return cls(emotion, speaker, tokenize(text))


def _bucket(word: str, buckets: int) -> int:
    # crc32 rather than hash(): stable across processes and PYTHONHASHSEED
    return zlib.crc32(word.encode("utf-8")) % buckets


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding with interleaved (sin, cos) pairs.

    Frequencies run geometrically from 1 down to 1/10000. Accepts a scalar
    (returns ``[dim]``) or an array of timesteps (returns ``[..., dim]``).
    """
    if dim % 2 or dim < 2:
        raise ValueError(f"timestep embedding width must be even and positive, got {dim}")
    half = dim // 2
    omega = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    angles = np.asarray(t, dtype=np.float64)[..., None] * omega
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


class ConditionEncoder(Module):
    """Hashed token embeddings with emotion and speaker pseudo-tokens, FC+SiLU x2, self-attention, mean pool.

    The hashed lookup table stands in for a pre-trained text encoder; any
    callable mapping a token tuple to ``[n, token_dim]`` can replace
    :meth:`embed_tokens`.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        scale = 1.0 / math.sqrt(cfg.token_dim)
        self.token_table = Parameter(rng.standard_normal((cfg.vocab_size, cfg.token_dim)) * scale, name="cond.token_table")
        self.emotion_table = Parameter(rng.standard_normal((len(EMOTIONS), cfg.token_dim)) * scale, name="cond.emotion_table")
        self.speaker_table = Parameter(rng.standard_normal((cfg.speaker_buckets, cfg.token_dim)) * scale, name="cond.speaker_table")
        self.fc1 = Linear(cfg.token_dim, cfg.cond_dim, rng, name="cond.fc1")
        self.fc2 = Linear(cfg.cond_dim, cfg.cond_dim, rng, name="cond.fc2")
        self.attn = SelfAttention(cfg.cond_dim, rng, name="cond.attn")

    def _ids(self, spec: ConditionSpec) -> tuple[int, int, tuple[int, ...]]:
        return (
            EMOTIONS.index(spec.emotion),
            _bucket(spec.speaker, self.cfg.speaker_buckets),
            tuple(_bucket(w, self.cfg.vocab_size) for w in spec.tokens),
        )

    def __call__(self, specs: Sequence[ConditionSpec]) -> Tensor:
        """Encode a batch of specs to ``[N, cond_dim]``.

        Specs are grouped by token count so each group runs as one batch
        without padding; the output follows the input order.
        """
        if not specs:
            raise ValueError("need at least one condition")
        ids = [self._ids(s) for s in specs]
        groups: dict[int, list[int]] = {}
        for i, (_, _, toks) in enumerate(ids):
            groups.setdefault(len(toks), []).append(i)
        pooled, order = [], []
        for n_tok in sorted(groups):
            members = groups[n_tok]
            emo = F.embedding(self.emotion_table, [[ids[i][0]] for i in members])
            spk = F.embedding(self.speaker_table, [[ids[i][1]] for i in members])
            parts = [emo, spk]
            if n_tok:
                parts.append(F.embedding(self.token_table, [list(ids[i][2]) for i in members]))
            seq = F.concat(parts, axis=1)  # [G, n, token_dim]
            h = F.silu(self.fc2(F.silu(self.fc1(seq))))
            h = self.attn(F.swap_last(h))  # [G, cond_dim, n]
            pooled.append(F.mean(h, axis=-1))
            order.extend(members)
        out = pooled[0] if len(pooled) == 1 else F.concat(pooled, axis=0)
        if order != list(range(len(specs))):
            out = F.getitem(out, np.argsort(order))
        return out


# --------------------------------------------------------------------------
# network


class DenoiserOutput(NamedTuple):
    eps_hat: Tensor
    v: Tensor


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "denoiser.init")
        self.encoder = ConditionEncoder(cfg, rng)
        self.time_fc1 = Linear(cfg.time_dim, cfg.time_dim, rng, name="time.fc1")
        self.time_fc2 = Linear(cfg.time_dim, cfg.time_channels, rng, name="time.fc2")
        self.cond_proj = Linear(cfg.cond_dim, cfg.cond_channels, rng, name="cond.proj")
        c_in = cfg.in_channels + cfg.time_channels + cfg.cond_channels
        self.conv_in = Conv1d(c_in, cfg.res_filters, cfg.kernel, rng, name="conv_in")
        self.res_pre = [Conv1d(cfg.res_filters, cfg.res_filters, cfg.kernel, rng, name=f"res_pre.{i}") for i in range(cfg.n_res_pre)]
        self.attn = SelfAttention(cfg.res_filters, rng, name="attn")
        self.res_post = [Conv1d(cfg.res_filters, cfg.res_filters, cfg.kernel, rng, name=f"res_post.{i}") for i in range(cfg.n_res_post)]
        self.conv_out = Conv1d(cfg.res_filters, 2 * cfg.in_channels, 1, rng, name="conv_out", zero=True)

    def encode(self, specs: Sequence[ConditionSpec]) -> Tensor:
        return self.encoder(specs)

    def __call__(self, xt, t, cond: Tensor | Sequence[ConditionSpec]) -> DenoiserOutput:
        """``xt`` is ``[N, C, L]`` (or ``[C, L]``), ``t`` an int or ``[N]`` ints, ``cond`` specs or encoded ``[N, cond_dim]``."""
        x = xt if isinstance(xt, Tensor) else Tensor(xt)
        squeeze = x.ndim == 2
        if squeeze:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise DimensionMismatchError(
                f"denoiser expects [N, {self.cfg.in_channels}, L] input, got shape {tuple(xt.shape)}"
            )
        n, _, length = x.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if not isinstance(cond, Tensor):
            cond = self.encoder(list(cond))
        if cond.shape != (n, self.cfg.cond_dim):
            raise DimensionMismatchError(f"condition batch {cond.shape} does not match input batch {n}")
        temb = Tensor(timestep_embedding(t, self.cfg.time_dim), dtype=x.dtype)
        tb = self.time_fc2(F.silu(self.time_fc1(temb)))
        cb = self.cond_proj(cond)
        extra = F.concat([tb, cb], axis=1)
        extra = F.broadcast_to(F.reshape(extra, extra.shape + (1,)), extra.shape + (length,))
        h = self.conv_in(F.concat([x, extra], axis=1))
        for conv in self.res_pre:
            h = F.add(h, F.silu(conv(h)))
        h = self.attn(h)
        for conv in self.res_post:
            h = F.add(h, F.silu(conv(h)))
        out = self.conv_out(h)
        c = self.cfg.in_channels
        eps_hat = F.getitem(out, (slice(None), slice(0, c)))
        v = F.sigmoid(F.getitem(out, (slice(None), slice(c, 2 * c))))
        if squeeze:
            eps_hat, v = F.reshape(eps_hat, eps_hat.shape[1:]), F.reshape(v, v.shape[1:])
        return DenoiserOutput(eps_hat, v)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def csv(self) -> str:
        lines = ["step,l_simple,l_vlb,l_total"]
        lines += [f"{s},{a:.9g},{b:.9g},{c:.9g}" for s, a, b, c in self.rows]
        return "\n".join(lines) + "\n"


def _stack_batch(data: Sequence[np.ndarray], idx: np.ndarray) -> np.ndarray:
    return np.stack([data[i] for i in idx]).astype(get_dtype(), copy=False)


def save_denoiser(directory: str | Path, model: Denoiser, train_cfg: DiffusionTrainConfig | None, step: int, seed: int) -> Path:
    meta = {
        "kind": "denoiser",
        "config": asdict(model.cfg),
        "train": asdict(train_cfg) if train_cfg else None,
        "schedule": {"kind": train_cfg.schedule, "T": train_cfg.T} if train_cfg else None,
        "step": step,
        "seed": seed,
    }
    return save_checkpoint(directory, model.state_dict(), meta)


def load_denoiser(directory: str | Path) -> tuple[Denoiser, dict]:
    state, meta = load_checkpoint(directory)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{directory} is not a denoiser checkpoint")
    model = Denoiser(DenoiserConfig(**meta["config"]), seed=meta.get("seed", 0))
    model.load_state_dict(state)
    return model, meta


def train_diffusion(
    data: Sequence[np.ndarray],
    conditions: Sequence[ConditionSpec],
    model_cfg: DenoiserConfig,
    train_cfg: DiffusionTrainConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
    model: Denoiser | None = None,
) -> tuple[Denoiser, TrainingLog]:
    """Minimize the hybrid loss with uniform timesteps and Adam.

    With ``out_dir`` set, the loss curve (``loss.csv``) and checkpoints
    (``checkpoint/``, overwritten in place) are written every
    ``checkpoint_every`` steps and at the end.
    """
    if len(data) != len(conditions):
        raise ValueError(f"{len(data)} segments but {len(conditions)} conditions")
    if not data:
        raise DataError("cannot train on an empty corpus")
    shape = np.shape(data[0])
    if shape[0] != model_cfg.in_channels or any(np.shape(d) != shape for d in data):
        raise DimensionMismatchError(f"all segments must be [{model_cfg.in_channels}, L]; first is {shape}")
    schedule = D.make_schedule(train_cfg.schedule, train_cfg.T)
    model = model or Denoiser(model_cfg, seed)
    params = model.parameters()
    pick, timesteps, noise = stream(seed, "diffusion.batch"), stream(seed, "diffusion.t"), stream(seed, "diffusion.noise")
    log = TrainingLog()
    out = Path(out_dir) if out_dir is not None else None

    def flush(step):
        if out is None:
            return
        save_denoiser(out / "checkpoint", model, train_cfg, step, seed)
        atomic_write_bytes(out / "loss.csv", log.csv().encode())

    for step in range(1, train_cfg.train_steps + 1):
        idx = pick.integers(0, len(data), train_cfg.batch)
        t = timesteps.integers(1, train_cfg.T + 1, train_cfg.batch)
        x0 = _stack_batch(data, idx)
        eps = noise.standard_normal(x0.shape).astype(x0.dtype)
        xt = D.q_sample(x0, t, eps, schedule)
        pred = model(xt, t, [conditions[i] for i in idx])
        terms = D.hybrid_loss_terms(pred.eps_hat, pred.v, eps, x0, xt, t, schedule)
        values = (float(terms.simple.data), float(terms.vlb.data), float(terms.total.data))
        if not all(math.isfinite(v) for v in values):
            raise NumericalError(
                f"non-finite loss at step {step}: l_simple={values[0]}, l_vlb={values[1]}; "
                f"batch indices {idx.tolist()}, timesteps {t.tolist()}"
            )
        model.zero_grad()
        backward(terms.total)
        adam_step(params, train_cfg.lr)
        if step % train_cfg.log_every == 0 or step == train_cfg.train_steps:
            log.rows.append((step,) + values)
        if step % train_cfg.checkpoint_every == 0 and step != train_cfg.train_steps:
            flush(step)
    flush(train_cfg.train_steps)
    return model, log


def sample(
    model: Denoiser,
    conditions: Sequence[ConditionSpec],
    frames: int,
    schedule: D.NoiseSchedule,
    seed: int,
    batch: int = 64,
    tag: str = "sample",
) -> np.ndarray:
    """Generate one ``[C, frames]`` grid per condition, clipped to [-1, 1].

    Conditions are processed in chunks of ``batch``; each chunk draws from its
    own named noise stream (``{tag}.{start}``) so results do not depend on
    chunk scheduling.
    """
    c = model.cfg.in_channels
    out = np.zeros((len(conditions), c, frames), dtype=get_dtype())
    was_training = model.training
    model.eval()
    try:
        for start in range(0, len(conditions), batch):
            chunk = list(conditions[start : start + batch])
            with no_grad():
                cond = model.encode(chunk)

            def denoise(x, t, cond=cond):
                return model(x, t, cond)

            out[start : start + len(chunk)] = D.sample_loop(denoise, schedule, stream(seed, f"{tag}.{start}"), (len(chunk), c, frames))
    finally:
        model.train(was_training)
    return out
