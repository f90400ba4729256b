"""Discrete DDPM process: schedule, corruption, reverse step, sampling, loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .errors import ContractError, NumericsError, ScheduleError, ShapeError
from .tensor import Tensor

DEFAULT_T = 50
DEFAULT_BETA_START = 0.02
DEFAULT_BETA_END = 0.30


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep; index 0 of beta/alpha/sigma is unused (nan)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.full(T + 1, np.nan)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    sigma = np.sqrt(beta)
    sched = NoiseSchedule(T, beta, alpha, alpha_bar, sigma)
    _validate(sched)
    return sched


def _validate(s: NoiseSchedule) -> None:
    b = s.beta[1:]
    if not ((b > 0) & (b < 1)).all():
        raise ScheduleError("beta must lie in (0, 1)")
    if s.alpha_bar[0] != 1.0 or not (np.diff(s.alpha_bar) < 0).all():
        raise ScheduleError("alpha_bar must start at 1 and strictly decrease")
    # a single-step schedule is a degenerate toy; the terminal check is for real chains
    if s.T > 1 and s.alpha_bar[-1] >= 1e-3:
        raise ScheduleError(f"alpha_bar[T]={s.alpha_bar[-1]:.3g} is not below 1e-3")


@dataclass(frozen=True)
class LossWeights:
    gamma: np.ndarray  # index 0 unused

    @classmethod
    def uniform(cls, T: int = DEFAULT_T, value: float = 1.0) -> "LossWeights":
        g = np.full(T + 1, float(value))
        g[0] = 0.0
        return cls(g)

    def __post_init__(self):
        if (np.asarray(self.gamma)[1:] < 0).any():
            raise ContractError("loss weights must be non-negative")


def _check_t(t, T: int) -> None:
    t = np.asarray(t)
    if (t < 0).any() or (t > T).any():
        raise ContractError(f"timestep outside [0, {T}]")


def _per_item(values: np.ndarray, n: int, ndim: int) -> np.ndarray:
    v = np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))
    return v.reshape((n,) + (1,) * (ndim - 1))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works on ndarrays or Tensors; ``t`` is scalar or one timestep per item
    along axis 0.
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    _check_t(t, sched.T)
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(t) == 0:
        a, b = float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))
        if isinstance(x0, Tensor):
            return tc.add(tc.scale(x0, a), tc.scale(eps, b))
        return (a * x0 + b * eps).astype(np.float32)
    n = x0.shape[0]
    a = _per_item(np.sqrt(ab), n, x0.ndim)
    b = _per_item(np.sqrt(1.0 - ab), n, x0.ndim)
    if isinstance(x0, Tensor):
        A = Tensor(np.broadcast_to(a, x0.shape))
        Bm = Tensor(np.broadcast_to(b, x0.shape))
        return tc.add(tc.mul(x0, A), tc.mul(eps, Bm))
    return (a * x0 + b * eps).astype(np.float32)


def reverse_step(xt: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray | None,
                 sched: NoiseSchedule) -> np.ndarray:
    """One ancestral DDPM step x_t -> x_{t-1}; z must be zero (or None) at t = 1."""
    if t < 1 or t > sched.T:
        raise ContractError(f"reverse_step needs 1 <= t <= T, got {t}")
    if z is not None and t == 1 and np.any(z != 0):
        raise ContractError("z must be zero at t = 1")
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    out = (xt - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if z is not None:
        out = out + sched.sigma[t] * np.asarray(z, dtype=np.float64)
    return out


EpsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sample(model: EpsFn, sched: NoiseSchedule, seed: int, shape) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``model(x, t)`` maps an ndarray batch and per-item timesteps to the
    predicted noise.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    x = rng.standard_normal(shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        eps_hat = model(x, np.full(shape[0], t))
        z = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(x, t, eps_hat, z, sched).astype(np.float32)
        if not np.isfinite(x).all():
            raise NumericsError(f"sampling diverged at t={t}")
    return x


def draw_timesteps(rng: np.random.Generator, n: int, T: int) -> np.ndarray:
    return rng.integers(1, T + 1, size=n)


def pretrain_loss(model: Callable[[Tensor, np.ndarray], Tensor], x0: np.ndarray,
                  sched: NoiseSchedule, weights: LossWeights, rng: np.random.Generator,
                  *, t: np.ndarray | None = None, eps: np.ndarray | None = None,
                  per_element: bool = False) -> Tensor:
    """Batch mean of gamma_t * ||eps - model(x_t, t)||^2 (squared L2 per item).

    ``t`` and ``eps`` are drawn from ``rng`` unless given. ``per_element``
    divides each item's squared norm by its element count.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    n = x0.shape[0]
    if n == 0:
        raise ContractError("pretrain_loss needs a non-empty batch")
    if t is None:
        t = draw_timesteps(rng, n, sched.T)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(np.float32)
    xt = forward_diffuse(x0, t, eps, sched)
    pred = model(Tensor(xt), t)
    sq = tc.square(tc.sub(Tensor(eps), pred))
    per_item = tc.sum_(tc.reshape(sq, (n, -1)), axis=1)
    w = np.asarray(weights.gamma, dtype=np.float64)[t] / n
    if per_element:
        w = w / (x0.size // n)
    return tc.sum_(tc.mul(per_item, Tensor(w)))
