"""Diffusion noise schedules (linear, cosine, sqrt) and downsampling.

A Schedule stores beta_t for t=1..T (indexed via beta[t-1]) and
alpha_bar[0..T] with alpha_bar[0] = 1. alpha_bar is always recomputed from
the defining parameters, never persisted, to avoid drift.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidScheduleError

BETA_CAP = 0.999
# conventional linear endpoints at T=2000; rescaled as 2000/T for other T
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02


@dataclass(frozen=True)
class Schedule:
    kind: str
    T: int
    beta: np.ndarray          # shape (T,), beta for t = 1..T
    alpha_bar: np.ndarray     # shape (T+1,), alpha_bar[0] = 1
    s: float | None = None    # sqrt schedule starting-noise constant
    base_steps: np.ndarray = field(default=None)  # t -> step index of the parent schedule

    def __post_init__(self):
        if self.base_steps is None:
            object.__setattr__(self, "base_steps", np.arange(self.T + 1))
        self._validate()

    def _validate(self):
        ab, beta = self.alpha_bar, self.beta
        if len(beta) != self.T or len(ab) != self.T + 1:
            raise InvalidScheduleError("schedule array lengths inconsistent")
        if ab[0] != 1.0:
            raise InvalidScheduleError("alpha_bar[0] must be 1")
        if np.any(np.diff(ab) >= 0):
            raise InvalidScheduleError("alpha_bar must be strictly decreasing")
        if ab[-1] < 0:
            raise InvalidScheduleError("alpha_bar must be nonnegative")
        if np.any(beta <= 0) or np.any(beta > 1):
            raise InvalidScheduleError("every beta_t must lie in (0, 1]")

    def beta_t(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise InvalidScheduleError(f"step {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def alpha_t(self, t: int) -> float:
        return 1.0 - self.beta_t(t)

    def alpha_bar_t(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise InvalidScheduleError(f"step {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def model_step(self, t: int) -> int:
        """Step index in the original (undownsampled) schedule, for time conditioning."""
        return int(self.base_steps[t])

    def spec(self) -> dict:
        """Serializable defining parameters; alpha_bar is recomputed on load."""
        out = {"kind": self.kind, "T": int(self.T)}
        if self.kind == "sqrt":
            out["s"] = float(self.s)
        elif self.kind == "linear":
            out["beta_start"] = LINEAR_BETA_START
            out["beta_end"] = LINEAR_BETA_END
        if not np.array_equal(self.base_steps, np.arange(self.T + 1)):
            out["stride"] = int(self.base_steps[1])
        return out


def build_schedule(kind: str, T: int, s: float = 1e-4) -> Schedule:
    """Construct a noise schedule of the given kind with T steps."""
    if T < 1:
        raise InvalidScheduleError("T must be >= 1")
    if kind == "sqrt":
        if not 0.0 < s < 1.0:
            raise InvalidScheduleError("sqrt schedule needs s in (0, 1)")
        t = np.arange(T + 1, dtype=np.float64)
        alpha_bar = np.maximum(0.0, 1.0 - np.sqrt(t / T + s))
        alpha_bar[0] = 1.0  # data-side Dirac anchor; s only sets the starting noise
        beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        return Schedule("sqrt", T, beta, alpha_bar, s=s)
    if kind == "linear":
        scl = 2000.0 / T
        beta = np.linspace(LINEAR_BETA_START * scl, LINEAR_BETA_END * scl, T)
        beta = np.clip(beta, None, BETA_CAP)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return Schedule("linear", T, beta, alpha_bar)
    if kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + 0.008) / 1.008 * np.pi / 2) ** 2
        ab = f / f[0]
        beta = np.minimum(1.0 - ab[1:] / ab[:-1], BETA_CAP)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return Schedule("cosine", T, beta, alpha_bar)
    raise InvalidScheduleError(f"unknown schedule kind {kind!r}")


def schedule_from_spec(spec: dict) -> Schedule:
    sched = build_schedule(spec["kind"], spec["T"] * spec.get("stride", 1), s=spec.get("s", 1e-4))
    if "stride" in spec:
        sched = downsample(sched, spec["stride"])
    return sched


def initial_std(sched: Schedule) -> float:
    """Noise level at the data side: the raw formula's std at t=0 for sqrt
    (s**0.25, e.g. 0.1 at s=1e-4), zero for schedules anchored at alpha_bar=1."""
    if sched.kind == "sqrt":
        return float(sched.s**0.25)
    return 0.0


def downsample(sched: Schedule, stride: int) -> Schedule:
    """Keep every stride-th alpha_bar; beta is recomputed from the ratios."""
    if stride < 1 or sched.T % stride != 0:
        raise InvalidScheduleError(f"stride {stride} does not divide T={sched.T}")
    if stride == 1:
        return sched
    alpha_bar = sched.alpha_bar[::stride].copy()
    beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return Schedule(
        sched.kind,
        sched.T // stride,
        beta,
        alpha_bar,
        s=sched.s,
        base_steps=sched.base_steps[::stride].copy(),
    )
