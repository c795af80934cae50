"""Gaussian diffusion: schedules, forward noising, posteriors, losses, sampling.

Schedule arrays are indexed by timestep with a padding entry at index 0, so
``alpha_bar[t]`` is the cumulative product up to step ``t`` and
``alpha_bar[0] == 1``. Timestep arguments may be a single int or an integer
array holding one timestep per leading (batch) element.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .autodiff import Tensor, get_dtype, no_grad
from .autodiff import functional as F
from .errors import NumericalError

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
HYBRID_WEIGHT = 0.001
DATA_BIN_HALF_WIDTH = 1.0 / 255.0  # bin width 2/255 on [-1, 1]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step diffusion constants for steps ``1..T`` (index 0 is padding)."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    beta_tilde: np.ndarray = field(init=False)
    log_beta_tilde_clipped: np.ndarray = field(init=False)
    timesteps: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T + 1,):
            raise ValueError(f"beta must have T+1={self.T + 1} entries (index 0 padding), got {beta.shape}")
        if not np.all((beta[1:] > 0) & (beta[1:] < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        beta = beta.copy()
        beta[0] = 0.0
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        self._finish(beta, alpha, alpha_bar, np.arange(self.T + 1))

    def _finish(self, beta, alpha, alpha_bar, timesteps):
        beta_tilde = np.zeros_like(beta)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        log_clipped = np.zeros_like(beta)
        with np.errstate(divide="ignore"):
            log_clipped[1:] = np.log(beta_tilde[1:])
        # beta_tilde[1] == 0; borrow step 2 so the log stays finite
        log_clipped[1] = math.log(beta_tilde[2]) if self.T >= 2 else math.log(beta[1])
        log_clipped[0] = log_clipped[1]
        for name, value in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("beta_tilde", beta_tilde),
                            ("log_beta_tilde_clipped", log_clipped), ("timesteps", timesteps)):
            value.flags.writeable = False
            object.__setattr__(self, name, value)

    @property
    def num_steps(self) -> int:
        """Number of reverse steps the sampler takes."""
        return self.T

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValueError(f"timestep must be integer, got {t_arr.dtype}")
        if t_arr.size and (t_arr.min() < 1 or t_arr.max() > self.num_steps):
            raise ValueError(f"timestep out of range [1, {self.num_steps}]: {t}")
        return t_arr

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T}


@dataclass(frozen=True, eq=False)
class StridedSchedule(NoiseSchedule):
    """A subsequence ``tau`` of a parent schedule's steps, rebased for sampling.

    Index ``i`` (1..S) refers to parent step ``tau[i-1]``; ``timesteps[i]``
    gives the parent step fed to the denoiser.
    """

    parent: NoiseSchedule | None = None
    tau: np.ndarray | None = None

    def __post_init__(self):
        parent, tau = self.parent, np.asarray(self.tau, dtype=np.int64)
        abar_parent = parent.alpha_bar
        alpha_bar = np.concatenate([[1.0], abar_parent[tau]])
        beta = np.zeros(len(tau) + 1)
        alpha = np.ones(len(tau) + 1)
        prev = np.concatenate([[0], tau[:-1]])
        for i, (cur, before) in enumerate(zip(tau, prev), start=1):
            if cur - before == 1:
                # unit stride: keep the parent values bit-exactly
                beta[i], alpha[i] = parent.beta[cur], parent.alpha[cur]
            else:
                alpha[i] = abar_parent[cur] / abar_parent[before]
                beta[i] = 1.0 - alpha[i]
        tau.flags.writeable = False
        object.__setattr__(self, "tau", tau)
        self._finish(beta, alpha, alpha_bar, np.concatenate([[0], tau]))

    @property
    def S(self) -> int:
        return len(self.tau)

    @property
    def num_steps(self) -> int:
        return len(self.tau)

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.parent.T, "S": self.S}


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Squared-cosine cumulative schedule with offset 0.008 and betas clipped at 0.999."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")

    def f(t):
        return math.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    beta = np.zeros(T + 1)
    for t in range(1, T + 1):
        beta[t] = min(1.0 - f(t) / f(t - 1), MAX_BETA)
    return NoiseSchedule("cosine", T, beta)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    return NoiseSchedule("linear", T, beta)


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "cosine":
        return make_cosine_schedule(T)
    if kind == "linear":
        return make_linear_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")


def make_strided_schedule(s: NoiseSchedule, S: int) -> StridedSchedule:
    """Evenly spaced steps ``tau_i = floor(i*T/S)``, ending at ``T``."""
    if isinstance(s, StridedSchedule):
        raise ValueError("cannot stride an already strided schedule")
    if not 1 <= S <= s.T:
        raise ValueError(f"sample steps S must satisfy 1 <= S <= T={s.T}, got {S}")
    tau = (np.arange(1, S + 1, dtype=np.int64) * s.T) // S
    return StridedSchedule(s.kind, S, np.zeros(S + 1), parent=s, tau=tau)


# --------------------------------------------------------------------------
# closed-form quantities


def _coef(table: np.ndarray, t, ndim: int, dtype=None) -> np.ndarray:
    """Gather ``table[t]`` shaped to broadcast against an ``ndim`` array."""
    vals = np.asarray(table[np.asarray(t)], dtype=dtype or np.float64)
    if vals.ndim == 0:
        return vals
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def q_sample(x0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """Draw from q(x_t | x_0) given standard-normal ``eps``."""
    t = s.check_t(t)
    x0, eps = _array(x0), _array(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = _coef(s.alpha_bar, t, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def posterior_coefficients(t, s: NoiseSchedule, ndim: int = 0) -> tuple[np.ndarray, np.ndarray]:
    ab = _coef(s.alpha_bar, t, ndim)
    ab_prev = _coef(s.alpha_bar, np.asarray(t) - 1, ndim)
    beta = _coef(s.beta, t, ndim)
    alpha = _coef(s.alpha, t, ndim)
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct


def q_posterior(x0, xt, t, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    t = s.check_t(t)
    x0, xt = _array(x0), _array(xt)
    c0, ct = posterior_coefficients(t, s, x0.ndim)
    mean = c0 * x0 + ct * xt
    var = np.broadcast_to(_coef(s.beta_tilde, t, x0.ndim), x0.shape)
    return mean.astype(x0.dtype, copy=False), var


def predict_x0_from_eps(xt, t, eps_hat, s: NoiseSchedule, clip: bool = True) -> np.ndarray:
    t = s.check_t(t)
    xt, eps_hat = _array(xt), _array(eps_hat)
    if xt.shape != eps_hat.shape:
        raise ValueError(f"xt shape {xt.shape} != eps_hat shape {eps_hat.shape}")
    ab = _coef(s.alpha_bar, t, xt.ndim)
    x0 = (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clip else x0


class ReverseStepDistribution(NamedTuple):
    mean: Tensor
    log_variance: Tensor


def p_mean_variance(eps_hat, v, xt, t, s: NoiseSchedule) -> ReverseStepDistribution:
    """Reverse-step Gaussian from predicted noise and variance fraction ``v`` in [0, 1].

    The log variance interpolates between ``log beta_t`` (v=1) and
    ``log beta_tilde_t`` (v=0); at t=1 the lower end uses the step-2 value.
    """
    t = s.check_t(t)
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    v = v if isinstance(v, Tensor) else Tensor(v)
    xt_arr = _array(xt)
    nd = xt_arr.ndim
    dt = eps_hat.dtype
    inv_sqrt_alpha = _coef(1.0 / np.sqrt(s.alpha), t, nd, dt)
    eps_coef = _coef(s.beta / np.sqrt(np.maximum(1.0 - s.alpha_bar, 1e-300)), t, nd, dt)
    mean = F.mul(F.sub(Tensor(xt_arr, dtype=dt), F.mul(eps_hat, Tensor(eps_coef, dtype=dt))), Tensor(inv_sqrt_alpha, dtype=dt))
    log_max = Tensor(_coef(np.log(np.maximum(s.beta, 1e-300)), t, nd, dt), dtype=dt)
    log_min = Tensor(_coef(s.log_beta_tilde_clipped, t, nd, dt), dtype=dt)
    log_var = F.add(F.mul(v, log_max), F.mul(F.sub(1.0, v), log_min))
    return ReverseStepDistribution(mean, log_var)


def normal_kl(mean1, logvar1, mean2: Tensor, logvar2: Tensor) -> Tensor:
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    m1 = Tensor(_array(mean1), dtype=logvar2.dtype)
    lv1 = Tensor(_array(logvar1), dtype=logvar2.dtype)
    diff = F.sub(m1, mean2)
    return F.mul(
        F.add(
            F.add(F.sub(logvar2, lv1), F.exp(F.sub(lv1, logvar2))),
            F.sub(F.mul(F.square(diff), F.exp(F.neg(logvar2))), 1.0),
        ),
        0.5,
    )


def _approx_normal_cdf(x: Tensor) -> Tensor:
    inner = F.mul(F.add(x, F.mul(F.power(x, 3), 0.044715)), math.sqrt(2.0 / math.pi))
    return F.mul(F.add(F.tanh(inner), 1.0), 0.5)


def _clip_min(x: Tensor, floor: float) -> Tensor:
    mask = (x.data > floor).astype(x.dtype)
    return F.add(F.mul(x, Tensor(mask, dtype=x.dtype)), Tensor((1.0 - mask) * floor, dtype=x.dtype))


def discretized_gaussian_nll(x0, mean, log_variance: Tensor) -> Tensor:
    """Elementwise -log P(x0) for a Gaussian integrated over 2/255-wide bins on [-1, 1]."""
    dt = log_variance.dtype
    x = _array(x0)
    centered = F.sub(Tensor(x, dtype=dt), mean)
    inv_std = F.exp(F.mul(log_variance, -0.5))
    cdf_plus = _approx_normal_cdf(F.mul(inv_std, F.add(centered, DATA_BIN_HALF_WIDTH)))
    cdf_min = _approx_normal_cdf(F.mul(inv_std, F.sub(centered, DATA_BIN_HALF_WIDTH)))
    log_cdf_plus = F.log(_clip_min(cdf_plus, 1e-12))
    log_one_minus_cdf_min = F.log(_clip_min(F.sub(1.0, cdf_min), 1e-12))
    log_delta = F.log(_clip_min(F.sub(cdf_plus, cdf_min), 1e-12))
    low = (x < -0.999).astype(dt)
    high = (x > 0.999).astype(dt)
    mid = 1.0 - low - high
    log_probs = F.add(
        F.add(F.mul(log_cdf_plus, Tensor(low, dtype=dt)), F.mul(log_one_minus_cdf_min, Tensor(high, dtype=dt))),
        F.mul(log_delta, Tensor(mid, dtype=dt)),
    )
    return F.neg(log_probs)


def vlb_term(model_dist: ReverseStepDistribution, x0, xt, t, s: NoiseSchedule) -> Tensor:
    """Variational-bound term in nats per dimension, averaged over all elements.

    KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)) for t >= 2 and the discretized
    decoder NLL of ``x0`` for t == 1. The model mean is detached, so only the
    log variance receives gradient.
    """
    t = s.check_t(t)
    x0_arr = _array(x0)
    mean = model_dist.mean.detach()
    logvar = model_dist.log_variance
    dt = logvar.dtype
    true_mean, _ = q_posterior(x0_arr, xt, np.maximum(t, 1), s)
    true_logvar = _coef(s.log_beta_tilde_clipped, t, x0_arr.ndim)
    first = (t == 1)
    if not np.any(first):
        per_elem = normal_kl(true_mean, np.broadcast_to(true_logvar, x0_arr.shape), mean, logvar)
    elif np.all(first):
        per_elem = discretized_gaussian_nll(x0_arr, mean, logvar)
    else:
        kl = normal_kl(true_mean, np.broadcast_to(true_logvar, x0_arr.shape), mean, logvar)
        nll = discretized_gaussian_nll(x0_arr, mean, logvar)
        mask = np.broadcast_to(first.astype(dt).reshape(first.shape + (1,) * (x0_arr.ndim - 1)), x0_arr.shape)
        per_elem = F.add(F.mul(nll, Tensor(mask, dtype=dt)), F.mul(kl, Tensor(1.0 - mask, dtype=dt)))
    return F.mean(per_elem)


class HybridLoss(NamedTuple):
    total: Tensor
    simple: Tensor
    vlb: Tensor


def hybrid_loss_terms(eps_hat: Tensor, v: Tensor, eps, x0, xt, t, s: NoiseSchedule,
                      weight: float = HYBRID_WEIGHT) -> HybridLoss:
    eps_t = Tensor(_array(eps), dtype=eps_hat.dtype)
    simple = F.mean(F.square(F.sub(eps_t, eps_hat)))
    dist = p_mean_variance(eps_hat, v, xt, t, s)
    vlb = vlb_term(dist, x0, xt, t, s)
    return HybridLoss(F.add(simple, F.mul(vlb, weight)), simple, vlb)


def hybrid_loss(eps_hat: Tensor, v: Tensor, eps, x0, xt, t, s: NoiseSchedule, weight: float = HYBRID_WEIGHT) -> Tensor:
    """Noise-prediction MSE plus ``weight`` times the variational-bound term."""
    return hybrid_loss_terms(eps_hat, v, eps, x0, xt, t, s, weight).total


DenoiseFn = Callable[[np.ndarray, np.ndarray], tuple]


def sample_loop(denoiser: DenoiseFn, s: NoiseSchedule, seed: int | np.random.Generator, shape,
                clip: bool = True, clip_denoised: bool = True) -> np.ndarray:
    """Ancestral sampling from pure noise down to step 1.

    ``denoiser(x_t, timesteps)`` returns ``(eps_hat, v)`` for a batch; the
    condition is bound into the callable. ``timesteps`` holds the parent
    schedule steps for strided schedules. No noise is added on the last step.

    With ``clip_denoised`` the step mean is the posterior mean around the
    predicted x0 clipped to [-1, 1]. Without clipping this equals the
    epsilon-form mean of :func:`p_mean_variance`; with it, large-t steps
    (where 1/sqrt(alpha_t) is ~30) stop amplifying prediction error.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = get_dtype()
    x = rng.standard_normal(shape).astype(dtype)
    batch = shape[0]
    with no_grad():
        for i in range(s.num_steps, 0, -1):
            t_model = np.full(batch, s.timesteps[i], dtype=np.int64)
            eps_hat, v = denoiser(x, t_model)
            if not all(np.all(np.isfinite(getattr(a, "data", a))) for a in (eps_hat, v)):
                raise NumericalError(f"non-finite denoiser output at reverse step index {i} (timestep {s.timesteps[i]})")
            dist = p_mean_variance(eps_hat, v, x, i, s)
            if clip_denoised:
                x0_hat = predict_x0_from_eps(x, i, eps_hat, s, clip=True)
                mean = q_posterior(x0_hat, x, i, s)[0]
            else:
                mean = dist.mean.data
            if i > 1:
                z = rng.standard_normal(shape).astype(dtype)
                x = mean + np.exp(0.5 * dist.log_variance.data) * z
            else:
                x = mean
            x = x.astype(dtype, copy=False)
            if not np.all(np.isfinite(x)):
                raise NumericalError(f"non-finite sample at reverse step index {i} (timestep {s.timesteps[i]})")
    return np.clip(x, -1.0, 1.0) if clip else x
