import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motiontransfer.amf import FlowField, MotionFlow
from motiontransfer.guidance import (GuidanceConfig, GuidanceDivergenceError, GuidanceError, adaptive_weight,
                                     adaptive_weights, background_loss, guided_update, object_loss, pair_loss,
                                     total_loss)
from motiontransfer.masks import MaskSequence

from conftest import central_difference, guidance_instance


def field(entries, shape=(2, 3)):
    disp = np.zeros(shape + (2,))
    valid = np.zeros(shape, bool)
    for (r, c), d in entries.items():
        disp[r, c] = d
        valid[r, c] = True
    return FlowField(disp, valid)


def flows(oid, entries):
    return MotionFlow(oid, {(0, 1): field(entries)})


def test_object_loss_examples():
    ref = {"a": flows("a", {(0, 0): (0, 1)})}
    cur = {"a": flows("a", {(0, 0): (0, 3)})}
    assert object_loss(ref, ref, {"a": 1.0}) == 0.0
    assert object_loss(ref, cur, {"a": 1.0}) == 4.0
    assert object_loss(ref, cur, {"a": 2.0}) == 8.0


def test_object_loss_is_mean_per_pair():
    ref = flows("a", {(0, 0): (0, 0), (0, 1): (0, 0)})
    cur = flows("a", {(0, 0): (0, 2), (0, 1): (0, 0)})
    assert object_loss([ref], [cur], 1.0) == 2.0


def test_object_loss_mismatch_rejected():
    with pytest.raises(GuidanceError):
        object_loss({"a": flows("a", {})}, {"b": flows("b", {})}, 1.0)


def test_background_loss_examples():
    ref = flows("bg", {(1, 1): (1, 0)})
    cur = flows("bg", {(1, 1): (0, 0)})
    assert background_loss(ref, ref, 2.0) == 0.0
    assert background_loss(ref, cur, 0.0) == 0.0
    assert background_loss(ref, cur, 2.0) == 2.0


def test_pair_loss_no_overlap_is_zero():
    assert pair_loss(field({(0, 0): (1, 1)}), field({(1, 1): (0, 0)})) == 0.0


def test_adaptive_weight_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert adaptive_weight(1.5, 1.0, a, ~a) == 1.5
    assert adaptive_weight(1.0, 1.0, a, a) == pytest.approx(0.36787944117144233, abs=1e-15)
    half = np.zeros((4, 4), bool)
    half[:1] = True
    assert adaptive_weight(3.0, 2.0, half, a) == pytest.approx(3.0 / math.e, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(base=st.floats(0.01, 10.0), alpha=st.one_of(st.just(0.0), st.floats(0.01, 5.0)), x=st.floats(0.0, 1.0), y=st.floats(0.0, 1.0))
def test_adaptive_weight_monotone(base, alpha, x, y):
    # IoU of a 100-cell strip against shifted strips takes exact values k/(200-k)
    def masks(k):
        a = np.zeros(200, bool)
        a[:100] = True
        b = np.zeros(200, bool)
        b[100 - k:200 - k] = True
        return a, b

    kx, ky = int(round(100 * x)), int(round(100 * y))
    wx, wy = adaptive_weight(base, alpha, *masks(kx)), adaptive_weight(base, alpha, *masks(ky))
    if alpha == 0 or kx == ky:
        assert wx == wy
    elif kx < ky:
        assert wx > wy
    else:
        assert wx < wy


def test_total_loss():
    assert total_loss(0.0, 0.0) == 0.0
    assert total_loss(3.0, 1.0) == 4.0
    assert total_loss(0.0, 2.5) == 2.5


def test_learning_rate_schedule():
    cfg = GuidanceConfig()
    assert (cfg.guided_steps, cfg.inner_iters) == (20, 5)
    assert cfg.learning_rate(0) == pytest.approx(0.008, abs=1e-15)
    assert cfg.learning_rate(19) == pytest.approx(0.002, abs=1e-15)
    rates = [cfg.learning_rate(s) for s in range(20)]
    assert np.allclose(np.diff(rates), np.diff(rates)[0])


@pytest.mark.parametrize("bad", [dict(default_weight=-1.0), dict(background_weight=-0.1), dict(alpha=-1.0),
                                 dict(object_weights={"a": -2.0}), dict(inner_iters=-1)])
def test_bad_config(bad):
    with pytest.raises(GuidanceError):
        GuidanceConfig(**bad)


def test_adaptive_weights_pair_frames():
    a = np.zeros((2, 2, 2), bool)
    a[:, 0] = True
    b = np.zeros((2, 2, 2), bool)
    b[1, 0] = True  # present only in frame 1
    cfg = GuidanceConfig(alpha=1.0)
    w = adaptive_weights(cfg, [MaskSequence("a", a), MaskSequence("b", b)], [(0, 1)])
    # a's frame 0 against b's frame 1: identical rows; b's empty frame 0 against a: IoU 0
    assert w["a"][(0, 1)] == pytest.approx(math.exp(-1.0))
    assert w["b"][(0, 1)] == 1.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    problem, z = guidance_instance(seed)
    _, g = problem.loss_and_grad(z)
    fd = central_difference(problem.loss, z)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


@pytest.mark.parametrize("seed", range(5))
def test_loss_nonnegative_and_zero_at_reference_match(seed):
    problem, z = guidance_instance(seed)
    parts, _ = problem.loss_and_grad(z, need_grad=False)
    assert parts["multi"] >= 0 and parts["obj"] >= 0 and parts["bg"] >= 0
    assert parts["multi"] == pytest.approx(parts["obj"] + parts["bg"])
    assert sum(parts["per_object"].values()) == pytest.approx(parts["obj"])


def test_zero_loss_keeps_latent():
    problem, z = guidance_instance(0)
    for term in problem.terms:
        term.weight = 0.0
    out = guided_update(z, problem, 0)
    assert np.array_equal(out, z)


def test_single_step_descends():
    problem, z = guidance_instance(3)
    before, g = problem.loss_and_grad(z)
    after = problem.loss(z - 1e-4 * g)
    assert after < before["multi"]


def test_guided_update_trace_and_descent():
    problem, z = guidance_instance(4)
    trace = []
    out = guided_update(z, problem, 0, trace)
    assert [row[:2] for row in trace] == [(0, i) for i in range(6)]
    assert trace[-1][4] < trace[0][4]
    assert trace[-1][4] == pytest.approx(problem.loss(out))


def test_guided_update_past_last_step():
    problem, z = guidance_instance(0)
    with pytest.raises(GuidanceError):
        guided_update(z, problem, 20)


def test_non_finite_gradient_diverges():
    problem, z = guidance_instance(0)
    z = z.copy()
    z[0, 0, 0, 0] = np.nan
    with pytest.raises(GuidanceDivergenceError):
        guided_update(z, problem, 0)


def test_losses_invariant_to_object_order():
    ref = {"a": flows("a", {(0, 0): (0, 1)}), "b": flows("b", {(1, 2): (1, 1)})}
    cur = {"a": flows("a", {(0, 0): (0, 2)}), "b": flows("b", {(1, 2): (0, 0)})}
    w = {"a": 1.0, "b": 0.5}
    forward = object_loss(ref, cur, w)
    reverse = object_loss(dict(reversed(list(ref.items()))), dict(reversed(list(cur.items()))), w)
    assert forward == reverse == 1.0 + 0.5 * 2.0
