"""Discrete noise schedules and their half log-SNR (lambda) parameterization.

A schedule stores a grid of continuous times ``t[0] < t[1] < ... < t[T]``
where index 0 is the data end and index ``T`` the noise end.  Sampling walks
indices ``T -> 0`` (lambda increasing); inversion walks ``0 -> T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("rectified_flow", "vp_cosine", "vp_linear")
SPACINGS = ("uniform_t", "uniform_lambda")

# linear-beta VP constants (continuous-time DDPM convention)
BETA_0 = 0.1
BETA_1 = 20.0


class ScheduleError(ValueError):
    """Invalid schedule parameters or indices."""


def _log_alpha(kind: str, t):
    t = np.asarray(t, dtype=np.float64)
    if kind == "rectified_flow":
        return np.log1p(-t)
    if kind == "vp_cosine":
        return np.log(np.cos(0.5 * np.pi * t))
    if kind == "vp_linear":
        return -0.25 * t**2 * (BETA_1 - BETA_0) - 0.5 * t * BETA_0
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _log_sigma(kind: str, t):
    t = np.asarray(t, dtype=np.float64)
    if kind == "rectified_flow":
        return np.log(t)
    if kind == "vp_cosine":
        return np.log(np.sin(0.5 * np.pi * t))
    if kind == "vp_linear":
        return 0.5 * np.log(-np.expm1(2.0 * _log_alpha(kind, t)))
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _inverse_lambda(kind: str, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if kind == "rectified_flow":
        # lambda = log((1 - t) / t)
        return 0.5 * (1.0 - np.tanh(0.5 * lam))
    if kind == "vp_cosine":
        # lambda = log(cot(pi t / 2))
        return 2.0 / np.pi * np.arctan(np.exp(-lam))
    if kind == "vp_linear":
        tmp = 2.0 * (BETA_1 - BETA_0) * np.logaddexp(-2.0 * lam, 0.0)
        delta = BETA_0**2 + tmp
        return tmp / (np.sqrt(delta) + BETA_0) / (BETA_1 - BETA_0)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete (alpha, sigma, lambda) grid over ``T + 1`` time points."""

    kind: str
    T: int
    t_min: float
    spacing: str
    times: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)
    lambdas: np.ndarray = field(repr=False)

    # continuous-time view, used by models and by off-grid evaluations
    def alpha(self, t):
        return np.exp(_log_alpha(self.kind, t))

    def sigma(self, t):
        return np.exp(_log_sigma(self.kind, t))

    def marginal_lambda(self, t):
        return _log_alpha(self.kind, t) - _log_sigma(self.kind, t)

    def inverse_lambda(self, lam):
        return _inverse_lambda(self.kind, lam)

    def _check_index(self, i: int) -> int:
        if isinstance(i, (bool, np.bool_)) or not isinstance(i, (int, np.integer)):
            raise ScheduleError(f"step index must be an integer, got {i!r}")
        if not 0 <= i <= self.T:
            raise ScheduleError(f"step index {i} outside [0, {self.T}]")
        return int(i)

    def step_width(self, s: int, t: int) -> float:
        """``h = lambda_t - lambda_s``; positive when moving toward the data end."""
        s, t = self._check_index(s), self._check_index(t)
        return float(self.lambdas[t] - self.lambdas[s])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "t_min": self.t_min, "spacing": self.spacing}


def make_schedule(
    kind: str = "rectified_flow",
    T: int = 70,
    t_min: float = 1e-3,
    spacing: str = "uniform_t",
) -> NoiseSchedule:
    """Build a schedule over ``T + 1`` points spanning ``[t_min, 1 - t_min]``.

    ``spacing="uniform_t"`` spaces the grid uniformly in continuous time;
    ``"uniform_lambda"`` spaces it uniformly in lambda between the same
    endpoints.
    """
    if kind not in KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if spacing not in SPACINGS:
        raise ScheduleError(f"unknown spacing {spacing!r}; expected one of {SPACINGS}")
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < t_min < 0.5):
        raise ScheduleError(f"t_min must lie in (0, 0.5), got {t_min!r}")

    t_lo, t_hi = t_min, 1.0 - t_min
    if spacing == "uniform_t":
        times = np.linspace(t_lo, t_hi, T + 1)
    else:
        lam_hi = float(_log_alpha(kind, t_lo) - _log_sigma(kind, t_lo))
        lam_lo = float(_log_alpha(kind, t_hi) - _log_sigma(kind, t_hi))
        times = _inverse_lambda(kind, np.linspace(lam_hi, lam_lo, T + 1))
        times[0], times[-1] = t_lo, t_hi

    log_a = _log_alpha(kind, times)
    log_s = _log_sigma(kind, times)
    lambdas = log_a - log_s
    if not np.all(np.diff(lambdas) < 0):
        raise ScheduleError("lambda grid is not strictly monotone; increase t_min or decrease T")

    arrays = {"times": times, "alphas": np.exp(log_a), "sigmas": np.exp(log_s), "lambdas": lambdas}
    for a in arrays.values():
        a.setflags(write=False)
    return NoiseSchedule(kind=kind, T=int(T), t_min=float(t_min), spacing=spacing, **arrays)


def step_width(schedule: NoiseSchedule, s: int, t: int) -> float:
    return schedule.step_width(s, t)
