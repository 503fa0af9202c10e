import numpy as np
import pytest

from motiontransfer.experiments import (convergence_study, dominance_fraction, draw_data, fit_slope,
                                        roundtrip_curve, roundtrip_study, terminal_reference)
from motiontransfer.models import GaussianMixtureToy, GaussianToy, ZeroModel
from motiontransfer.schedule import make_schedule
from motiontransfer.solver import SolverOptions


def test_fit_slope_exact_power_law():
    steps = [8, 16, 32, 64]
    assert fit_slope(steps, [3.0 * n**-2.5 for n in steps]) == pytest.approx(2.5)


def test_terminal_reference_mixture_uses_ode():
    sch = make_schedule("vp_cosine", 10, 0.05)
    m = GaussianMixtureToy(sch, [(1.0, [0.5, 0.5], 0.7)])
    g = GaussianToy(sch, [0.5, 0.5], 0.7)
    x = np.array([[0.1, -0.2]])
    assert np.allclose(terminal_reference(m, x, sch), terminal_reference(g, x, sch), atol=1e-9)


def test_convergence_rows():
    x = np.random.default_rng(0).standard_normal((4, 2))
    rows = convergence_study(lambda s: GaussianToy(s, [1.0, 0.0], 1.0),
                             lambda T: make_schedule("vp_cosine", T, 0.03, "uniform_lambda"),
                             x, [8, 16], [SolverOptions(solver="ddim"), SolverOptions(order=2)])
    assert [(r.solver, r.K, r.steps) for r in rows] == [("ddim", 1, 8), ("ddim", 1, 16), ("rectpc", 2, 8),
                                                         ("rectpc", 2, 16)]
    assert rows[0].terminal_error > rows[1].terminal_error


def test_roundtrip_curve_starts_at_zero_for_zero_model():
    sch = make_schedule("rectified_flow", 8)
    curve = roundtrip_curve(ZeroModel(sch, 2), sch, np.array([0.3, 0.1]), SolverOptions(order=2))
    assert curve.shape == (9,) and np.max(curve) < 1e-28


def test_draw_data_shapes():
    sch = make_schedule()
    rng = np.random.default_rng(0)
    assert draw_data(GaussianToy(sch, [0.0, 1.0], 0.5), rng).shape == (2,)
    assert draw_data(GaussianMixtureToy(sch, [(1.0, [0.0], 1.0)]), rng, 5).shape == (5, 1)


def test_roundtrip_dominance_without_midpoint():
    sch = make_schedule("rectified_flow", 32, 0.02, "uniform_lambda")
    model = GaussianToy(sch, [1.0, -0.5], 0.5)
    curves = roundtrip_study(model, sch, range(5), [SolverOptions(solver="ddim"), SolverOptions(order=2)])
    assert dominance_fraction(curves, 1) == 1.0
