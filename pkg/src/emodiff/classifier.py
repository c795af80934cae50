"""CNN-BLSTM speech emotion classifier, mixup and its training loop."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import EMOTIONS
from .audio.features import MelSpectrogram
from .autodiff import Tensor, adam_step, backward, get_dtype, no_grad
from .autodiff import functional as F
from .autodiff.edtf import atomic_write_bytes
from .autodiff.nn import LSTM, BatchNorm1d, Conv1d, Linear, Module
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import group_by_utterance
from .errors import DataError, DimensionMismatchError, NumericalError
from .rng import stream

N_CLASSES = len(EMOTIONS)


@dataclass(frozen=True)
class ClassifierConfig:
    mels: int = 80
    frames: int = 256
    conv_filters: tuple[int, ...] = (128, 128, 128)
    conv_kernels: tuple[int, ...] = (5, 3, 3)
    hidden: int = 128
    lstm_layers: int = 2
    dropout_conv: float = 0.1
    dropout_lstm: float = 0.2
    classes: int = N_CLASSES
    lr: float = 1e-5
    epochs: int = 100
    batch: int = 64
    mixup_alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(self.conv_filters))
        object.__setattr__(self, "conv_kernels", tuple(self.conv_kernels))
        if self.classes != N_CLASSES:
            raise ValueError(f"classes must be {N_CLASSES}, got {self.classes}")
        if len(self.conv_filters) != len(self.conv_kernels) or not self.conv_filters:
            raise ValueError("conv_filters and conv_kernels must be non-empty and the same length")
        for rate in (self.dropout_conv, self.dropout_lstm):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rates must be in [0, 1), got {rate}")
        if min(self.mels, self.frames, self.hidden, self.lstm_layers, self.epochs, self.batch) < 1 or self.lr <= 0:
            raise ValueError(f"invalid classifier config {self}")

    @classmethod
    def toy(cls, **overrides) -> ClassifierConfig:
        base = dict(mels=16, frames=64, conv_filters=(32, 32, 32), hidden=32, lstm_layers=1,
                    lr=1e-3, epochs=20, batch=32)
        return cls(**{**base, **overrides})


def label_index(emotion: str) -> int:
    try:
        return EMOTIONS.index(emotion)
    except ValueError:
        raise DataError(f"unknown emotion {emotion!r}; expected one of {EMOTIONS}") from None


def one_hot(labels: Sequence[int], classes: int = N_CLASSES) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


class Classifier(Module):
    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "classifier.init")
        chans = (cfg.mels,) + cfg.conv_filters
        self.convs = [Conv1d(chans[i], chans[i + 1], k, rng, name=f"conv.{i}") for i, k in enumerate(cfg.conv_kernels)]
        self.norms = [BatchNorm1d(c, name=f"bn.{i}") for i, c in enumerate(cfg.conv_filters)]
        self.forward_lstms, self.backward_lstms = [], []
        width = cfg.conv_filters[-1]
        for i in range(cfg.lstm_layers):
            self.forward_lstms.append(LSTM(width, cfg.hidden, rng, name=f"lstm.{i}.fwd"))
            self.backward_lstms.append(LSTM(width, cfg.hidden, rng, name=f"lstm.{i}.bwd"))
            width = 2 * cfg.hidden
        self.fc = Linear(2 * cfg.hidden, cfg.classes, rng, name="fc")

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``[N, 4]`` for input ``[N, mels, frames]`` (or one ``[mels, frames]`` grid).

        ``rng`` drives dropout and is only needed in training mode.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.cfg.mels:
            raise DimensionMismatchError(f"classifier expects [N, {self.cfg.mels}, frames] input, got shape {x.shape}")
        h = x
        for conv, bn in zip(self.convs, self.norms):
            h = F.dropout(F.relu(bn(conv(h))), self.cfg.dropout_conv, rng, self.training)
        # [N, C, L] -> L frames of [N, C]
        seq = F.transpose(h, (2, 0, 1))
        frames = [F.getitem(seq, i) for i in range(seq.shape[0])]
        for layer, (fwd, bwd) in enumerate(zip(self.forward_lstms, self.backward_lstms)):
            hf = fwd(frames)
            hb = bwd(frames, reverse=True)
            if layer + 1 < len(self.forward_lstms):
                frames = [F.dropout(F.concat([a, b], axis=-1), self.cfg.dropout_lstm, rng, self.training) for a, b in zip(hf, hb)]
        final = F.concat([hf[-1], hb[0]], axis=-1)
        final = F.dropout(final, self.cfg.dropout_lstm, rng, self.training)
        return self.fc(final)

    def posteriors(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Softmax posteriors in evaluation mode, computed in chunks."""
        was = self.training
        self.eval()
        try:
            with no_grad():
                out = [F.softmax(self(x[i : i + batch]), axis=-1).data for i in range(0, len(x), batch)]
        finally:
            self.train(was)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.classes))


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum_c y_c log softmax(logits)_c``."""
    t = Tensor(targets, dtype=logits.dtype)
    return F.neg(F.mean(F.sum(F.mul(t, F.log_softmax(logits, axis=-1)), axis=-1)))


def mixup_batch(x_i, x_j, y_i, y_j, alpha: float = 0.2, seed: int | np.random.Generator = 0, lam: float | None = None):
    """Convex combination of two batches with ``lam ~ Beta(alpha, alpha)`` unless ``lam`` is given."""
    if lam is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        lam = float(rng.beta(alpha, alpha))
    x_i, x_j, y_i, y_j = map(np.asarray, (x_i, x_j, y_i, y_j))
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


def aggregate_posteriors(posteriors: np.ndarray) -> int:
    """Mean posterior over segments; ``argmax`` returns the lowest index on ties."""
    posteriors = np.asarray(posteriors)
    if posteriors.ndim != 2 or len(posteriors) == 0:
        raise DataError("need at least one segment posterior to predict an utterance")
    return int(np.argmax(posteriors.mean(axis=0)))


def predict_utterance(model: Classifier, segments: Sequence[MelSpectrogram] | np.ndarray) -> int:
    if len(segments) == 0:
        raise DataError("cannot predict an utterance with zero segments")
    x = np.stack([s.values if isinstance(s, MelSpectrogram) else s for s in segments]).astype(get_dtype())
    return aggregate_posteriors(model.posteriors(x))


def predict_corpus(model: Classifier, segments: Sequence[MelSpectrogram]) -> tuple[np.ndarray, np.ndarray]:
    """Utterance-level (true, predicted) labels, in first-appearance order of utterances."""
    groups = group_by_utterance(segments)
    if not groups:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    x = np.stack([s.values for segs in groups.values() for s in segs]).astype(get_dtype())
    post = model.posteriors(x)
    truth, pred, pos = [], [], 0
    for segs in groups.values():
        truth.append(label_index(segs[0].emotion))
        pred.append(aggregate_posteriors(post[pos : pos + len(segs)]))
        pos += len(segs)
    return np.array(truth), np.array(pred)


def _uar(truth: np.ndarray, pred: np.ndarray) -> float:
    recalls = [np.mean(pred[truth == c] == c) for c in range(N_CLASSES) if np.any(truth == c)]
    return float(np.mean(recalls))


@dataclass
class ClassifierHistory:
    rows: list[tuple[int, float, float]]
    best_epoch: int
    best_dev_uar: float

    def csv(self) -> str:
        lines = ["epoch,train_loss,dev_uar"] + [f"{e},{l:.9g},{u:.9g}" for e, l, u in self.rows]
        return "\n".join(lines) + "\n"


def train_classifier(
    train: Sequence[MelSpectrogram],
    dev: Sequence[MelSpectrogram],
    cfg: ClassifierConfig,
    seed: int = 0,
    mixup: bool = False,
    out_dir: str | Path | None = None,
) -> tuple[Classifier, ClassifierHistory]:
    """Adam on (soft-label) cross-entropy; keeps the weights with the best dev UAR.

    Every training segment is treated as its own example; dev UAR is
    computed at utterance level.
    """
    if not train:
        raise DataError("empty training split")
    if not dev:
        raise DataError("empty dev split")
    x = np.stack([s.values for s in train]).astype(get_dtype())
    if x.shape[1:] != (cfg.mels, cfg.frames):
        raise DimensionMismatchError(f"training segments are {x.shape[1:]}, config expects ({cfg.mels}, {cfg.frames})")
    y = one_hot([label_index(s.emotion) for s in train], cfg.classes)
    model = Classifier(cfg, seed)
    params = model.parameters()
    shuffle, drop, mix = stream(seed, "ser.shuffle"), stream(seed, "ser.dropout"), stream(seed, "ser.mixup")
    rows = []
    best = (-1.0, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = shuffle.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            xb, yb = x[idx], y[idx]
            if mixup:
                partner = mix.permutation(len(idx))
                xb, yb = mixup_batch(xb, xb[partner], yb, yb[partner], cfg.mixup_alpha, mix)
            loss = soft_cross_entropy(model(xb.astype(x.dtype, copy=False), drop), yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch}, batch starting {start}")
            model.zero_grad()
            backward(loss)
            adam_step(params, cfg.lr)
            total += value * len(idx)
            count += len(idx)
        truth, pred = predict_corpus(model, dev)
        dev_uar = _uar(truth, pred)
        rows.append((epoch, total / count, dev_uar))
        if dev_uar > best[0]:
            best = (dev_uar, epoch, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    history = ClassifierHistory(rows, best[1], best[0])
    if out_dir is not None:
        out = Path(out_dir)
        save_classifier(out / "checkpoint", model, seed, best[1])
        atomic_write_bytes(out / "history.csv", history.csv().encode())
    return model, history


def save_classifier(directory: str | Path, model: Classifier, seed: int, epoch: int) -> Path:
    meta = {"kind": "classifier", "config": asdict(model.cfg), "seed": seed, "epoch": epoch}
    return save_checkpoint(directory, model.state_dict(), meta)


def load_classifier(directory: str | Path) -> tuple[Classifier, dict]:
    state, meta = load_checkpoint(directory)
    if meta.get("kind") != "classifier":
        raise DataError(f"{directory} is not a classifier checkpoint")
    model = Classifier(ClassifierConfig(**meta["config"]), seed=meta.get("seed", 0))
    model.load_state_dict(state)
    model.eval()
    return model, meta
