"""Closed-form diffusion math: forward marginals, Gaussian posterior
coefficients, and conversions among the mu-, x0-, and eps-parametrizations.

All quantities are derived lazily from a Schedule's alpha_bar so the same
code path serves full and downsampled schedules.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateStepError, InvalidScheduleError
from .schedules import Schedule

_EPS = 1e-12


@dataclass(frozen=True)
class PosteriorCoeffs:
    c0: float    # coefficient of x0 in the posterior mean
    ct: float    # coefficient of x_t in the posterior mean
    var: float   # posterior variance beta-tilde_t


def forward_marginal_sample(
    sched: Schedule, x0: np.ndarray, t: int, rng: np.random.Generator
) -> np.ndarray:
    """Sample q(x_t | x0) = N(sqrt(ab_t) x0, (1 - ab_t) I)."""
    if not 1 <= t <= sched.T:
        raise InvalidScheduleError(f"step {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar_t(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def posterior_coeffs(sched: Schedule, t: int) -> PosteriorCoeffs:
    """Coefficients of the Gaussian posterior q(x_{t-1} | x0, x_t), t >= 2."""
    if not 2 <= t <= sched.T:
        raise InvalidScheduleError(f"posterior step {t} outside [2, {sched.T}]")
    ab_t = sched.alpha_bar_t(t)
    ab_prev = sched.alpha_bar_t(t - 1)
    if 1.0 - ab_t < _EPS:
        raise DegenerateStepError(f"1 - alpha_bar_{t} below {_EPS}")
    beta = sched.beta_t(t)
    alpha = 1.0 - beta
    c0 = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
    return PosteriorCoeffs(float(c0), float(ct), float(var))


def mu_from_x0(sched: Schedule, x0hat: np.ndarray, xt: np.ndarray, t: int) -> np.ndarray:
    """Posterior mean of x_{t-1} given a prediction of x0 and the observed x_t."""
    pc = posterior_coeffs(sched, t)
    return pc.c0 * x0hat + pc.ct * xt


def eps_x0_convert(
    sched: Schedule, value: np.ndarray, xt: np.ndarray, t: int, direction: str
) -> np.ndarray:
    """Convert between the x0 and eps views of the same x_t.

    direction 'x0_to_eps': value is x0, returns eps;
    direction 'eps_to_x0': value is eps, returns x0.
    """
    ab = sched.alpha_bar_t(t)
    if ab < _EPS or 1.0 - ab < _EPS:
        raise DegenerateStepError(f"alpha_bar_{t} = {ab} is degenerate for conversion")
    if direction == "x0_to_eps":
        return (xt - np.sqrt(ab) * value) / np.sqrt(1.0 - ab)
    if direction == "eps_to_x0":
        return (xt - np.sqrt(1.0 - ab) * value) / np.sqrt(ab)
    raise ValueError(f"unknown direction {direction!r}")
