"""Reusable solver experiments: convergence order and inversion round trips."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .models import DiffusionModel, GaussianMixtureToy, GaussianToy, reference_flow
from .schedule import NoiseSchedule
from .solver import SolverOptions, invert, sample


def fit_slope(steps: Sequence[int], errors: Sequence[float]) -> float:
    """Negative log-log slope of error against step count (the observed order)."""
    return float(-np.polyfit(np.log(np.asarray(steps, float)), np.log(np.asarray(errors, float)), 1)[0])


def terminal_reference(model: DiffusionModel, x_T, schedule: NoiseSchedule) -> np.ndarray:
    t_src, t_dst = float(schedule.times[-1]), float(schedule.times[0])
    if isinstance(model, GaussianToy):
        return model.exact_flow(x_T, t_src, t_dst)
    return reference_flow(model, x_T, t_src, t_dst)


def rms(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.mean(a * a)))


@dataclass
class ConvergenceRow:
    solver: str
    K: int
    midpoint: bool
    steps: int
    terminal_error: float
    slope: Optional[float]


def convergence_study(make_model, make_sched, x_T, step_counts: Sequence[int],
                      solvers: Sequence[SolverOptions]) -> list[ConvergenceRow]:
    """Terminal RMS error against the exact flow for each solver and step count.

    ``make_sched(T)`` builds a schedule and ``make_model(schedule)`` the model on it.
    The slope is fitted per solver and repeated on each of its rows; it is
    ``None`` when only one step count is given.
    """
    rows = []
    for opts in solvers:
        errs = []
        for T in step_counts:
            sch = make_sched(int(T))
            model = make_model(sch)
            traj = sample(model, sch, x_T, opts)
            errs.append(rms(traj.final - terminal_reference(model, x_T, sch)))
        slope = fit_slope(step_counts, errs) if len(step_counts) > 1 else None
        K = 1 if opts.solver == "ddim" else opts.order
        rows.extend(ConvergenceRow(opts.solver, K, opts.midpoint, int(T), e, slope)
                    for T, e in zip(step_counts, errs))
    return rows


def draw_data(model: DiffusionModel, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """One clean sample (or ``n`` of them) from a toy model's data distribution."""
    count = 1 if n is None else n
    if isinstance(model, GaussianToy):
        out = model.mean + model.scale * rng.standard_normal((count, model.dim))
    elif isinstance(model, GaussianMixtureToy):
        out = model.sample_data(rng, count)
    else:
        out = rng.standard_normal((count, model.dim))
    return out[0] if n is None else out


def roundtrip_curve(model: DiffusionModel, schedule: NoiseSchedule, x_0, opts: SolverOptions) -> np.ndarray:
    """Per-step MSE between inversion and reconstruction latents.

    Entry ``n`` compares the two trajectories at grid index ``T - n``, so the
    curve runs in sampling order and ends at the data end.
    """
    inv = invert(model, schedule, x_0, opts)
    rec = sample(model, schedule, inv.final, opts)
    diff = inv.states[::-1] - rec.states
    return np.mean(diff * diff, axis=tuple(range(1, diff.ndim)))


def roundtrip_study(model: DiffusionModel, schedule: NoiseSchedule, seeds: Sequence[int],
                    solvers: Sequence[SolverOptions]) -> dict:
    """``{seed: [curve per solver]}``; each seed draws its own clean start point."""
    out = {}
    for seed in seeds:
        x_0 = draw_data(model, np.random.default_rng(seed))
        out[int(seed)] = [roundtrip_curve(model, schedule, x_0, o) for o in solvers]
    return out


def dominance_fraction(curves: dict, candidate: int, baseline: int = 0) -> float:
    """Fraction of seeds where solver ``candidate``'s curve is <= the baseline's at every step."""
    wins = [bool(np.all(c[candidate] <= c[baseline])) for c in curves.values()]
    return float(np.mean(wins)) if wins else 0.0
