import numpy as np
import pytest

from conflictlab import autodiff as ad
from conflictlab.problems import (
    REGISTRY, CollocationCounts, load_reference_csv, make_problem, relative_l2,
    TargetPair, save_reference_csv, thermoelastic_reference,
)

# the target pairs are excluded: their two losses cannot both vanish when gap > 0
ANALYTIC = [n for n, c in REGISTRY.items() if c.analytic and not issubclass(c, TargetPair)]


def colloc(problem, seed=0, counts=CollocationCounts(64, 16, 16)):
    return problem.sample_collocation(counts, np.random.default_rng(seed))


def test_registry_and_k():
    assert make_problem("thermoelastic_k4").K == 4
    assert make_problem("poisson1d").K == 3
    for name in ("poisson1d", "heat1d", "burgers1d", "helmholtz2d", "thermoelastic_k4",
                 "inverse_poisson"):
        assert make_problem(name).K in (3, 4)
    with pytest.raises(ValueError, match="poisson1d"):
        make_problem("navier_stokes")
    with pytest.raises(ValueError, match="bogus"):
        make_problem("poisson1d", bogus=1)


def test_inverse_physical_block():
    p = make_problem("inverse_poisson")
    assert p.physical.true_value == 2.0
    from conflictlab.model import PINN, TrunkConfig
    m = PINN(TrunkConfig(input_dim=1, output_dim=1), None, seed=0,
             physical={p.physical.name: p.physical.init})
    phys = [n for n in m.leaves() if n.startswith("phys.")]
    assert len(phys) == 1 and m.leaves()[phys[0]].value.size == 1


@pytest.mark.parametrize("name", ANALYTIC)
def test_exact_solution_zeroes_every_loss(name):
    p = make_problem(name)
    Ls = p.losses(p.exact_field, colloc(p))
    assert len(Ls) == p.K
    for L in Ls:
        assert float(L.value) < 1e-10


def test_zero_network_poisson():
    p = make_problem("poisson1d")
    c = colloc(p)
    zero = lambda x: ad.mul(0.0, ad.reshape(x.col(0), (x.shape[0], 1)))
    L_pde, L_bc, _ = p.losses(zero, c)
    f = np.pi ** 2 * np.sin(np.pi * c.interior[:, 0])
    assert float(L_pde.value) == pytest.approx(np.mean(f ** 2), rel=1e-12)
    assert float(L_bc.value) == 0.0


def test_inverse_scan_minimized_at_truth():
    p = make_problem("inverse_poisson")
    c = colloc(p)
    alphas = np.linspace(1.0, 3.0, 41)
    tot = [sum(float(L.value) for L in p.losses(p.exact_field, c, {"alpha": ad.const(a)}))
           for a in alphas]
    assert alphas[int(np.argmin(tot))] == pytest.approx(2.0)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_collocation_sets(name):
    p = make_problem(name)
    a, b, other = colloc(p, 1), colloc(p, 1), colloc(p, 2)
    assert np.array_equal(a.interior, b.interior) and np.array_equal(a.boundary, b.boundary)
    assert not np.array_equal(a.interior, other.interior)
    assert np.all(a.interior >= p.lo) and np.all(a.interior <= p.hi)
    assert np.all(p.on_boundary(a.boundary))
    if p.time_dependent:
        assert np.all(a.initial[:, -1] == p.lo[-1])
    else:
        assert a.initial.shape[0] == 0


def test_counts_validation():
    with pytest.raises(ValueError):
        CollocationCounts(0, 1, 1)


def test_relative_l2_examples():
    p = make_problem("poisson1d")
    ref = lambda g: p.reference(g)
    assert relative_l2(ref, p) == 0.0
    assert relative_l2(lambda g: 2 * p.reference(g), p) == pytest.approx(1.0)
    assert relative_l2(lambda g: np.zeros((len(g), 1)), p) == 1.0
    with pytest.raises(ValueError):
        relative_l2(ref, p, test_grid=np.array([[0.0], [0.0]]))


def test_target_pair_losses():
    p = make_problem("opposing_pair")
    up, low = p.losses(p.exact_field, colloc(p))
    assert float(up.value) == pytest.approx(4.0) and float(low.value) == pytest.approx(4.0)
    q = make_problem("identical_pair")
    a, b = q.losses(p.exact_field, colloc(q))
    assert float(a.value) == float(b.value) == 0.0


def test_thermoelastic_reference_initial_and_boundary():
    tab = thermoelastic_reference(200)
    x = tab.x
    inner = slice(1, -1)
    np.testing.assert_allclose(tab.u[inner, 0], np.sin(np.pi * x[inner]), atol=1e-15)
    np.testing.assert_allclose(tab.v[inner, 0], np.cos(np.pi * x[inner] / 2), atol=1e-15)
    assert np.all(tab.u[[0, -1], :] == 0) and np.all(tab.v[[0, -1], :] == 0)
    assert np.all(np.isfinite(tab.u)) and np.all(np.isfinite(tab.v))


def test_thermoelastic_self_convergence():
    grids = [33, 65, 129, 257]
    tabs = [thermoelastic_reference(n, nt=n) for n in grids]
    # successive differences shrink by 4 per halving for second-order schemes
    d1 = np.max(np.abs(tabs[1].u[::2, ::2] - tabs[0].u))
    d2 = np.max(np.abs(tabs[2].u[::2, ::2] - tabs[1].u))
    d3 = np.max(np.abs(tabs[3].u[::2, ::2] - tabs[2].u))
    assert d1 / d2 == pytest.approx(4.0, rel=0.1)
    assert d2 / d3 == pytest.approx(4.0, rel=0.1)


def test_thermoelastic_cfl_error():
    with pytest.raises(ValueError, match="nt >= 101"):
        thermoelastic_reference(201, nt=50)
    with pytest.raises(ValueError):
        thermoelastic_reference(8)


def test_thermoelastic_csv_roundtrip(tmp_path):
    tab = thermoelastic_reference(32)
    save_reference_csv(tab, tmp_path / "t.csv")
    back = load_reference_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.u, tab.u)
    np.testing.assert_array_equal(back.x, tab.x)


def test_thermoelastic_reference_interpolates_grid_nodes():
    p = make_problem("thermoelastic_k4", grid_n=64)
    tab = p.table()
    pts = np.array([[tab.x[5], tab.t[7]], [tab.x[30], tab.t[63]]])
    out = p.reference(pts)
    np.testing.assert_allclose(out[:, 0], [tab.u[5, 7], tab.u[30, 63]], atol=1e-14)
    np.testing.assert_allclose(out[:, 1], [tab.v[5, 7], tab.v[30, 63]], atol=1e-14)
