"""RectPC: lambda-space multistep predictor with optional midpoint corrector.

The predictor is the noise-prediction exponential integrator

    x_t = (alpha_t / alpha_s) x_s - sigma_t * phi1(h) * eps_0 - sigma_t * sum_i rho_i D_i

with ``phi1(h) = e^h - 1``, ``D_i = eps_i - eps_{i-1}`` built from the history of
past noise predictions, and ``rho`` chosen so the step integrates the
interpolating polynomial of the history exactly.  With order 1 it is DDIM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .schedule import NoiseSchedule

MAX_ORDER = 4
MIDPOINT_TIMES = ("target", "midpoint")


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    pass


class DegenerateStepError(SolverError):
    pass


class SolverUsageError(SolverError):
    pass


class DivergenceError(SolverError, FloatingPointError):
    """Non-finite state encountered; ``step`` holds the schedule index reached."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def phi1(h):
    """``e^h - 1``, evaluated without cancellation for small ``|h|``."""
    return np.expm1(h)


def _phi(k: int, h: float) -> float:
    # phi_k(h) = sum_j h^j / (j + k)!
    if abs(h) <= 2.0:
        term = 1.0 / math.factorial(k)
        total = term
        for j in range(1, 60):
            term *= h / (j + k)
            total += term
            if abs(term) < 1e-18 * abs(total):
                break
        return total
    val = math.expm1(h) / h
    for j in range(1, k):
        val = (val - 1.0 / math.factorial(j)) / h
    return val


def monomial_integrals(h: float, n: int) -> np.ndarray:
    """``g_m = int_0^h e^(h-u) (u/h)^m du`` for ``m = 1..n``."""
    return np.array([h * math.factorial(m) * _phi(m + 1, h) for m in range(1, n + 1)])


def _check_order(K) -> int:
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or not 1 <= K <= MAX_ORDER:
        raise SolverUsageError(f"order K must be an integer in [1, {MAX_ORDER}], got {K!r}")
    return int(K)


def extrapolation_weights(lambda_history, h: float, K: int) -> np.ndarray:
    """Weights ``rho_1..rho_{K-1}`` multiplying the history differences ``D_i``.

    ``lambda_history`` lists the lambda values of the stored predictions, most
    recent (the current step's source point) first.
    """
    K = _check_order(K)
    lam = np.asarray(lambda_history, dtype=np.float64)
    if lam.shape != (K,):
        raise SolverUsageError(f"expected {K} lambda values, got shape {lam.shape}")
    if K == 1:
        return np.zeros(0)
    if not abs(h) >= 1e-12:
        raise DegenerateStepError(f"step width {h!r} is too small")
    if len(np.unique(lam)) != K:
        raise SingularSystemError("duplicate lambda values in history")

    r = (lam[1:] - lam[0]) / h
    n = K - 1
    # V[i, m] = r_i^m; the history correction is g^T V^{-1} (eps_i - eps_0)
    V = r[:, None] ** np.arange(1, n + 1)[None, :]
    g = monomial_integrals(h, n)
    try:
        w = np.linalg.solve(V.T, g)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    # sum_i w_i (eps_i - eps_0) == sum_j rho_j D_j with rho_j = sum_{i >= j} w_i
    return np.cumsum(w[::-1])[::-1]


@dataclass
class StepCoefficients:
    A: float
    B: float
    phi1: float
    rho: np.ndarray


@dataclass
class SolverState:
    """Noise-prediction history, most recent first, capped at ``order`` entries."""

    order: int = 2
    midpoint: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.order = _check_order(self.order)

    def push(self, lam: float, eps: np.ndarray) -> None:
        if self.history:
            prev = self.history[0][0]
            if len(self.history) > 1:
                direction = np.sign(self.history[1][0] - prev)
                if np.sign(prev - lam) != direction:
                    raise SolverUsageError("history lambda values must be strictly monotone")
            elif lam == prev:
                raise SolverUsageError("history lambda values must be strictly monotone")
        self.history.insert(0, (float(lam), eps))
        del self.history[self.order :]

    def clear(self) -> None:
        self.history.clear()

    @property
    def effective_order(self) -> int:
        return min(self.order, len(self.history))


def step_coefficients(state: SolverState, schedule: NoiseSchedule, s: int, t: int) -> StepCoefficients:
    h = schedule.step_width(s, t)
    k = state.effective_order
    lam = [entry[0] for entry in state.history[:k]]
    return StepCoefficients(
        A=float(schedule.alphas[t] / schedule.alphas[s]),
        B=float(schedule.sigmas[t]),
        phi1=float(phi1(h)),
        rho=extrapolation_weights(lam, h, k),
    )


def predictor_step(x, state: SolverState, schedule: NoiseSchedule, s: int, t: int) -> np.ndarray:
    """High-order extrapolation from index ``s`` to ``t`` using ``state.history``."""
    if not state.history:
        raise SolverUsageError("predictor_step needs at least the current noise prediction in history")
    c = step_coefficients(state, schedule, s, t)
    eps = [entry[1] for entry in state.history[: state.effective_order]]
    out = c.A * np.asarray(x, dtype=np.float64) - (c.B * c.phi1) * eps[0]
    for i, rho in enumerate(c.rho, start=1):
        out = out - (c.B * rho) * (eps[i] - eps[i - 1])
    return out


def _midpoint_eval_times(schedule: NoiseSchedule, s: int, t: int, mode: str) -> tuple[float, float]:
    t_target = float(schedule.times[t])
    if mode == "target":
        return t_target, t_target
    if mode == "midpoint":
        lam_mid = 0.5 * (schedule.lambdas[s] + schedule.lambdas[t])
        return float(schedule.inverse_lambda(lam_mid)), t_target
    raise SolverUsageError(f"unknown midpoint time mode {mode!r}")


def _midpoint(x_prev, x_pred, model, schedule, s, t, h, mode):
    t_mid, t_pred = _midpoint_eval_times(schedule, s, t, mode)
    x_mid = 0.5 * (x_prev + x_pred)
    e_mid = model.noise(x_mid, t_mid)
    eps_pred = model.noise(x_pred, t_pred)
    x_corr = x_pred + (0.5 * h * h) * (e_mid - eps_pred) / h
    return x_corr, eps_pred, 2


def midpoint_correct(x_prev, x_pred, model, schedule: NoiseSchedule, s: int, t: int, h: float,
                     time_mode: str = "target") -> np.ndarray:
    """Refine ``x_pred`` with the midpoint difference of two model evaluations.

    ``time_mode="target"`` evaluates both at the target step's time;
    ``"midpoint"`` evaluates ``x_mid`` at the time whose lambda bisects the
    step and ``x_pred`` at the target time.
    """
    x_corr, _, _ = _midpoint(np.asarray(x_prev, dtype=np.float64), np.asarray(x_pred, dtype=np.float64),
                             model, schedule, s, t, h, time_mode)
    return x_corr


def ddim_step(x, eps, schedule: NoiseSchedule, s: int, t: int) -> np.ndarray:
    """Deterministic first-order update via the predicted clean sample."""
    a_s, a_t = schedule.alphas[s], schedule.alphas[t]
    sig_s, sig_t = schedule.sigmas[s], schedule.sigmas[t]
    x = np.asarray(x, dtype=np.float64)
    if s == t:
        return x.copy()
    return a_t * (x - sig_s * eps) / a_s + sig_t * eps


@dataclass
class Trajectory:
    """States visited by a sampling or inversion run.

    ``indices[n]`` is the schedule index of ``states[n]``; ``states[-1]`` is the
    final state.
    """

    indices: np.ndarray
    states: np.ndarray
    nfe: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, index: int) -> np.ndarray:
        pos = np.flatnonzero(self.indices == index)
        if pos.size == 0:
            raise KeyError(index)
        return self.states[pos[0]]


# hook(x, step_number, schedule_index) -> x'
GuidanceHook = Callable[[np.ndarray, int, int], np.ndarray]


@dataclass
class SolverOptions:
    solver: str = "rectpc"  # "rectpc" or "ddim"
    order: int = 2
    midpoint: bool = False
    midpoint_time: str = "target"
    cache_pred_eval: bool = False
    history_reset_tol: float = 1e-3

    def __post_init__(self):
        if self.solver not in ("rectpc", "ddim"):
            raise SolverUsageError(f"unknown solver {self.solver!r}")
        self.order = _check_order(self.order)
        if self.midpoint_time not in MIDPOINT_TIMES:
            raise SolverUsageError(f"unknown midpoint time mode {self.midpoint_time!r}")

    def label(self) -> str:
        if self.solver == "ddim":
            return "ddim"
        return f"rectpc-k{self.order}" + ("-mid" if self.midpoint else "")


def _run(model, schedule: NoiseSchedule, x_start, order_idx, opts: SolverOptions,
         hook: Optional[GuidanceHook]) -> Trajectory:
    x = np.array(x_start, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite initial state at step {order_idx[0]}", int(order_idx[0]))
    states = [x.copy()]
    state = SolverState(order=1 if opts.solver == "ddim" else opts.order, midpoint=opts.midpoint)
    nfe = 0
    cached = None
    for n, (s, t) in enumerate(zip(order_idx[:-1], order_idx[1:])):
        s, t = int(s), int(t)
        if hook is not None:
            x_new = hook(x, n, s)
            change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
            if change > opts.history_reset_tol:
                state.clear()
                cached = None
            x = np.asarray(x_new, dtype=np.float64)
        if cached is not None:
            eps = cached
        else:
            eps = model.noise(x, float(schedule.times[s]))
            nfe += 1
        cached = None
        if opts.solver == "ddim":
            x_next = ddim_step(x, eps, schedule, s, t)
        else:
            state.push(schedule.lambdas[s], eps)
            x_next = predictor_step(x, state, schedule, s, t)
            if opts.midpoint:
                h = schedule.step_width(s, t)
                x_next, eps_pred, extra = _midpoint(x, x_next, model, schedule, s, t, h, opts.midpoint_time)
                nfe += extra
                if opts.cache_pred_eval:
                    cached = eps_pred
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError(f"non-finite state after step {s} -> {t}", t)
        x = x_next
        states.append(x.copy())
    return Trajectory(indices=np.asarray(order_idx), states=np.stack(states), nfe=nfe)


def sample(model, schedule: NoiseSchedule, x_T, opts: Optional[SolverOptions] = None,
           hook: Optional[GuidanceHook] = None, start: Optional[int] = None) -> Trajectory:
    """Integrate from the noise end (index ``T``, or ``start``) down to index 0."""
    opts = opts or SolverOptions()
    start = schedule.T if start is None else start
    return _run(model, schedule, x_T, np.arange(start, -1, -1), opts, hook)


def invert(model, schedule: NoiseSchedule, x_0, opts: Optional[SolverOptions] = None,
           stop: Optional[int] = None) -> Trajectory:
    """Integrate from the data end (index 0) up to index ``T`` (or ``stop``)."""
    opts = opts or SolverOptions()
    stop = schedule.T if stop is None else stop
    return _run(model, schedule, x_0, np.arange(0, stop + 1), opts, None)
