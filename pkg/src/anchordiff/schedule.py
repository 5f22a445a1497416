"""Diffusion noise schedule, anchored forward process, and the deterministic
truncated reverse chain.

The forward process perturbs an anchor chunk A by
``sqrt(alpha_bar_tau) * A + sqrt(1 - alpha_bar_tau) * eps``; inversion
recovers the clean-signal estimate from a noisy sample and a predicted noise
term. Sampling timesteps are restricted to the truncated range
{0, ..., S_tr - 1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

X0_CLAMP = 1.5  # loose bound: actions are normalized to [-1, 1]


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sqrt_alpha_bars: np.ndarray
    sqrt_one_minus: np.ndarray

    @property
    def s(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class TruncatedRange:
    rho: float
    s_tr: int

    @property
    def tau_start(self) -> int:
        return self.s_tr - 1


def build_schedule(s: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp over ``s`` steps with cumulative-product alpha bars."""
    if s < 1:
        raise ConfigError(f"need at least one timestep, got {s}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"invalid beta range ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, s)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sqrt_alpha_bars=np.sqrt(alpha_bars),
        sqrt_one_minus=np.sqrt(1.0 - alpha_bars),
    )


def truncated_range(rho: float, s: int) -> TruncatedRange:
    """S_tr = max{1, round(rho * S)}, rounding half up."""
    if not (0.0 < rho <= 1.0):
        raise ConfigError(f"truncation ratio must be in (0, 1], got {rho}")
    s_tr = max(1, int(math.floor(rho * s + 0.5)))
    return TruncatedRange(rho=rho, s_tr=min(s_tr, s))


def range_from_steps(s_tr: int, s: int) -> TruncatedRange:
    if not (1 <= s_tr <= s):
        raise ConfigError(f"step budget {s_tr} outside [1, {s}]")
    return TruncatedRange(rho=s_tr / s, s_tr=s_tr)


def sample_train_timestep(trange: TruncatedRange, rng: np.random.Generator) -> int:
    """tau ~ Uniform{0, ..., S_tr - 1}."""
    return int(rng.integers(0, trange.s_tr))


def anchored_forward(anchor: np.ndarray, eps: np.ndarray, tau: int,
                     sched: DiffusionSchedule) -> np.ndarray:
    """Noise an anchor to timestep tau (shape-agnostic, elementwise)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if anchor.shape != eps.shape:
        raise DimensionError(f"anchor shape {anchor.shape} != noise shape {eps.shape}")
    if not 0 <= tau < sched.s:
        raise IndexError(f"timestep {tau} outside schedule of length {sched.s}")
    return sched.sqrt_alpha_bars[tau] * anchor + sched.sqrt_one_minus[tau] * eps


def invert_x0(noisy: np.ndarray, eps_hat: np.ndarray, tau: int, sched: DiffusionSchedule,
              clamp: float = X0_CLAMP) -> np.ndarray:
    """Recover the clean-signal estimate, clamped entrywise to +-clamp."""
    if not 0 <= tau < sched.s:
        raise IndexError(f"timestep {tau} outside schedule of length {sched.s}")
    x0 = (noisy - sched.sqrt_one_minus[tau] * eps_hat) / sched.sqrt_alpha_bars[tau]
    return np.clip(x0, -clamp, clamp)


def reverse_chain(init: np.ndarray, denoiser, trange: TruncatedRange,
                  sched: DiffusionSchedule, context=None) -> np.ndarray:
    """Deterministic reverse chain from tau_start down to 0.

    ``denoiser(noisy, tau, context)`` must return a noise estimate with the
    same shape as ``noisy``. Each step inverts to an x0 estimate and, while
    tau > 0, re-projects to the next lower timestep using that estimate and
    the predicted noise with no added stochasticity. Returns the final x0.
    """
    x = np.asarray(init, dtype=np.float64)
    for tau in range(trange.tau_start, -1, -1):
        eps_hat = np.asarray(denoiser(x, tau, context), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise DimensionError(
                f"denoiser returned shape {eps_hat.shape}, expected {x.shape}"
            )
        if not np.all(np.isfinite(eps_hat)):
            raise NumericError(f"denoiser produced non-finite values at tau={tau}")
        x0 = invert_x0(x, eps_hat, tau, sched)
        if tau == 0:
            return x0
        ab_prev = sched.alpha_bars[tau - 1]
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    raise ConfigError("empty truncated range")  # unreachable: s_tr >= 1
