"""Analytic diffusion models used as exact oracles for the solvers.

Every model exposes ``predict(x, t)`` in its declared parameterization and
``noise(x, t)`` which always returns the noise prediction; solver code only
calls ``noise``.  States may be batched: the last axis is the feature axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import logsumexp

from .schedule import NoiseSchedule

PARAMETERIZATIONS = ("noise", "velocity")


class ModelError(ValueError):
    """Invalid model configuration."""


def velocity_to_noise(v, x, t, schedule: NoiseSchedule):
    """Convert a velocity head to a noise head at time ``t``.

    Rectified flow uses ``v = eps - x0``; VP schedules use ``v = alpha eps - sigma x0``.
    """
    a, s = schedule.alpha(t), schedule.sigma(t)
    if schedule.kind == "rectified_flow":
        return (a * v + x) / (a + s)
    return (a * v + s * x) / (a * a + s * s)


def noise_to_velocity(eps, x, t, schedule: NoiseSchedule):
    a, s = schedule.alpha(t), schedule.sigma(t)
    x0 = (x - s * eps) / a
    if schedule.kind == "rectified_flow":
        return eps - x0
    return a * eps - s * x0


class DiffusionModel:
    """Base class: subclasses implement ``predict`` in ``parameterization`` form."""

    parameterization: str = "noise"

    def __init__(self, schedule: NoiseSchedule, dim: int, parameterization: str = "noise"):
        if parameterization not in PARAMETERIZATIONS:
            raise ModelError(f"unknown parameterization {parameterization!r}")
        self.schedule = schedule
        self.dim = int(dim)
        self.parameterization = parameterization

    def predict(self, x, t):
        raise NotImplementedError

    def noise(self, x, t):
        out = self.predict(x, t)
        if self.parameterization == "velocity":
            out = velocity_to_noise(out, x, t, self.schedule)
        return out

    __call__ = noise


class FunctionModel(DiffusionModel):
    """Wraps a plain ``fn(x, t)`` callable."""

    def __init__(self, fn: Callable, schedule: NoiseSchedule, dim: int, parameterization: str = "noise"):
        super().__init__(schedule, dim, parameterization)
        self.fn = fn

    def predict(self, x, t):
        return self.fn(np.asarray(x, dtype=np.float64), t)


class ZeroModel(DiffusionModel):
    def predict(self, x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def gaussian_noise_prediction(x, t, schedule: NoiseSchedule, mu, s: float):
    """Minimum-MSE noise prediction when data ~ N(mu, s^2 I)."""
    a, sig = schedule.alpha(t), schedule.sigma(t)
    return sig * (np.asarray(x, dtype=np.float64) - a * np.asarray(mu)) / (a * a * s * s + sig * sig)


def gaussian_exact_flow(x_src, t_src, t_dst, schedule: NoiseSchedule, mu, s: float):
    """Closed-form probability-flow ODE solution for Gaussian data."""
    mu = np.asarray(mu, dtype=np.float64)
    a0, s0 = schedule.alpha(t_src), schedule.sigma(t_src)
    a1, s1 = schedule.alpha(t_dst), schedule.sigma(t_dst)
    ratio = np.sqrt((a1 * a1 * s * s + s1 * s1) / (a0 * a0 * s * s + s0 * s0))
    return a1 * mu + ratio * (np.asarray(x_src, dtype=np.float64) - a0 * mu)


class GaussianToy(DiffusionModel):
    """Data distribution N(mean, scale^2 I); marginals stay Gaussian."""

    def __init__(self, schedule: NoiseSchedule, mean, scale: float = 1.0, parameterization: str = "noise"):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if scale <= 0:
            raise ModelError("scale must be positive")
        super().__init__(schedule, mean.size, parameterization)
        self.mean = mean
        self.scale = float(scale)

    def predict(self, x, t):
        eps = gaussian_noise_prediction(x, t, self.schedule, self.mean, self.scale)
        if self.parameterization == "velocity":
            return noise_to_velocity(eps, x, t, self.schedule)
        return eps

    def exact_flow(self, x_src, t_src, t_dst):
        return gaussian_exact_flow(x_src, t_src, t_dst, self.schedule, self.mean, self.scale)


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: np.ndarray
    scale: float


def _as_components(components) -> list[MixtureComponent]:
    out = []
    for c in components:
        if isinstance(c, MixtureComponent):
            out.append(c)
        else:
            w, m, s = c
            out.append(MixtureComponent(float(w), np.atleast_1d(np.asarray(m, dtype=np.float64)), float(s)))
    if not out:
        raise ModelError("mixture needs at least one component")
    w = np.array([c.weight for c in out])
    if np.any(w <= 0):
        raise ModelError("mixture weights must be positive")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ModelError(f"mixture weights must sum to 1, got {w.sum()}")
    if any(c.scale <= 0 for c in out):
        raise ModelError("mixture scales must be positive")
    return out


def mixture_posterior(x, t, schedule: NoiseSchedule, components) -> np.ndarray:
    """Posterior component responsibilities given x_t, shape ``x.shape[:-1] + (n_components,)``."""
    comps = _as_components(components)
    x = np.asarray(x, dtype=np.float64)
    a, sig = schedule.alpha(t), schedule.sigma(t)
    d = x.shape[-1]
    logp = []
    for c in comps:
        var = a * a * c.scale**2 + sig * sig
        r2 = np.sum((x - a * c.mean) ** 2, axis=-1)
        logp.append(np.log(c.weight) - 0.5 * r2 / var - 0.5 * d * np.log(var))
    logp = np.stack(logp, axis=-1)
    return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))


def mixture_noise_prediction(x, t, schedule: NoiseSchedule, components):
    """Exact noise prediction for an isotropic Gaussian-mixture data distribution."""
    comps = _as_components(components)
    x = np.asarray(x, dtype=np.float64)
    post = mixture_posterior(x, t, schedule, comps)
    eps = np.zeros(np.broadcast_shapes(x.shape, comps[0].mean.shape))
    for k, c in enumerate(comps):
        eps = eps + post[..., k : k + 1] * gaussian_noise_prediction(x, t, schedule, c.mean, c.scale)
    return eps


class GaussianMixtureToy(DiffusionModel):
    def __init__(self, schedule: NoiseSchedule, components: Sequence, parameterization: str = "noise"):
        comps = _as_components(components)
        super().__init__(schedule, comps[0].mean.size, parameterization)
        self.components = comps

    def predict(self, x, t):
        eps = mixture_noise_prediction(x, t, self.schedule, self.components)
        if self.parameterization == "velocity":
            return noise_to_velocity(eps, x, t, self.schedule)
        return eps

    def sample_data(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = np.array([c.weight for c in self.components])
        idx = rng.choice(len(self.components), size=n, p=w)
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            sel = idx == k
            out[sel] = c.mean + c.scale * rng.standard_normal((int(sel.sum()), self.dim))
        return out


def log_alpha_slope(schedule: NoiseSchedule, t):
    """``d log(alpha) / d lambda`` at time ``t``."""
    s = schedule.sigma(t)
    return s if schedule.kind == "rectified_flow" else s * s


def reference_flow(model: DiffusionModel, x_src, t_src: float, t_dst: float, rtol: float = 1e-11,
                   atol: float = 1e-12) -> np.ndarray:
    """Probability-flow ODE solved to tight tolerance in lambda (oracle for non-Gaussian models).

    Integrates ``dx/dlambda = (dlog alpha/dlambda) x - sigma eps(x)``.
    """
    sch = model.schedule
    x_src = np.asarray(x_src, dtype=np.float64)
    shape = x_src.shape

    def rhs(lam, y):
        t = float(sch.inverse_lambda(lam))
        x = y.reshape(shape)
        return (log_alpha_slope(sch, t) * x - sch.sigma(t) * model.noise(x, t)).ravel()

    lam0, lam1 = float(sch.marginal_lambda(t_src)), float(sch.marginal_lambda(t_dst))
    sol = solve_ivp(rhs, (lam0, lam1), x_src.ravel(), method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"reference ODE solve failed: {sol.message}")
    return sol.y[:, -1].reshape(shape)
