"""Conditional DDPM action head: linear schedule, eps-prediction loss, ancestral sampling.

Timesteps are 1-based throughout: t = 1 is the least noisy step and
``schedule.alpha_bar(1) = 1 - beta_min``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .autodiff import tensor as T
from .nets import DenoiserNet


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # index t-1 holds beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep outside [1, {self.T}]: {t}")


def make_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def q_sample(schedule: NoiseSchedule, x0, t, noise) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; ``t`` may be per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    if x0.ndim == 2 and np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


EpsModel = Callable[[np.ndarray, np.ndarray, object], Tensor]


@dataclass
class DiffusionPolicy:
    """One agent's action head (or the joint head of the centralized variant)."""

    schedule: NoiseSchedule
    denoiser: DenoiserNet

    @property
    def chunk_dim(self) -> int:
        return self.denoiser.chunk_dim

    def eps_model(self, store) -> EpsModel:
        return lambda x, t, cond: self.denoiser(store, x, t, cond)

    def training_loss(self, store, cond, x0, rng: np.random.Generator) -> Tensor:
        return training_loss(self.schedule, self.eps_model(store), cond, x0, rng)

    def sample(self, store, cond, rngs, deterministic: bool = False, clip=None) -> np.ndarray:
        return sample(self.schedule, self.eps_model(store), cond, rngs, self.chunk_dim,
                      deterministic=deterministic, clip=clip)


def training_loss(schedule: NoiseSchedule, eps_model: EpsModel, cond, x0, rng) -> Tensor:
    """Batch mean of ||eps_hat(x_t, t, cond) - eps||^2 with t ~ U{1..T}, eps ~ N(0, I)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(schedule, x0, t, eps)
    pred = eps_model(x_t, t, cond)
    return T.reduce("mean", T.reduce("sq_l2", T.sub(pred, Tensor(eps)), axis=1))


def _draw(rngs, shape) -> np.ndarray:
    """Standard normals, one row per generator (or all rows from a single one)."""
    if isinstance(rngs, np.random.Generator):
        return rngs.standard_normal(shape)
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def sample(
    schedule: NoiseSchedule,
    eps_model: EpsModel,
    cond,
    rngs,
    chunk_dim: int,
    deterministic: bool = False,
    clip=None,
    x_T: np.ndarray | None = None,
) -> np.ndarray:
    """DDPM ancestral sampling from x_T ~ N(0, I).

    ``rngs`` is one Generator or a list with one Generator per batch row, so
    each row's draws come from its own stream.  ``deterministic`` zeroes the
    injected per-step noise (x_T is still drawn).  ``clip`` is an optional
    (lo, hi) bound applied to the final sample.
    """
    if x_T is not None:
        x = np.array(x_T, dtype=np.float64)
        n = x.shape[0]
    else:
        n = len(rngs) if isinstance(rngs, (list, tuple)) else T.as_tensor(cond).shape[0]
        x = _draw(rngs, (n, chunk_dim))
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            eps = eps_model(x, np.full(n, t), cond).data
            beta, alpha, ab = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
            mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
            if t > 1 and not deterministic:
                x = mean + np.sqrt(beta) * _draw(rngs, (n, chunk_dim))
            else:
                x = mean
    if clip is not None:
        x = np.clip(x, clip[0], clip[1])
    return x
