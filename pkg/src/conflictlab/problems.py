"""Desk-scale PDE problems with K loss terms and exact or finite-difference references.

A problem turns a field callable ``x -> u`` (``(n, d) -> (n, d_out)`` nodes)
into K mean-squared residual losses.  Inputs are ordered space first, time
last.
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from . import autodiff as ad

PI = math.pi


@dataclass(frozen=True)
class PhysicalScalar:
    """A learnable positive coefficient, trained as ``log`` of its value."""

    name: str
    true_value: float
    init: float


@dataclass
class CollocationCounts:
    n_coll: int = 128
    n_bc: int = 32
    n_ic: int = 32

    def __post_init__(self):
        if min(self.n_coll, self.n_bc, self.n_ic) < 1:
            raise ValueError("collocation counts must be >= 1")


@dataclass
class CollocationSet:
    interior: np.ndarray
    boundary: np.ndarray
    initial: np.ndarray

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.interior), len(self.boundary), len(self.initial)


def mse(r: ad.Node) -> ad.Node:
    return ad.mean(ad.square(r))


def _derivs(u, x, i, order=1):
    return ad.input_derivative(u, x, i, order)


class PDEProblem:
    """Base class; subclasses fill in residuals and the reference field."""

    name = "problem"
    loss_names: tuple[str, ...] = ()
    bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0),)
    time_dependent = False
    output_dim = 1
    physical: PhysicalScalar | None = None
    # parameters chosen for desk-scale runs rather than taken from a published suite
    standin = False
    analytic = True

    def __init__(self, **params):
        self.params = dict(self.default_params())
        unknown = set(params) - set(self.params)
        if unknown:
            raise ValueError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        self.params.update(params)

    def default_params(self) -> dict:
        return {}

    @property
    def K(self) -> int:
        return len(self.loss_names)

    @property
    def input_dim(self) -> int:
        return len(self.bounds)

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    # -- sampling -----------------------------------------------------------

    def sample_collocation(self, counts: CollocationCounts, rng) -> CollocationSet:
        d, lo, hi = self.input_dim, self.lo, self.hi
        interior = lo + (hi - lo) * rng.random((counts.n_coll, d))
        n_space = d - 1 if self.time_dependent else d
        bnd = lo + (hi - lo) * rng.random((counts.n_bc, d))
        # pin one spatial coordinate to a face; 1-D steady problems alternate endpoints
        if n_space == 1 and not self.time_dependent:
            bnd[:, 0] = np.where(np.arange(counts.n_bc) % 2 == 0, lo[0], hi[0])
        else:
            axis = rng.integers(0, n_space, counts.n_bc)
            side = rng.integers(0, 2, counts.n_bc)
            bnd[np.arange(counts.n_bc), axis] = np.where(side == 0, lo[axis], hi[axis])
        if self.time_dependent:
            initial = lo + (hi - lo) * rng.random((counts.n_ic, d))
            initial[:, -1] = lo[-1]
        else:
            initial = np.zeros((0, d))
        return CollocationSet(interior, bnd, initial)

    def on_boundary(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        n_space = self.input_dim - 1 if self.time_dependent else self.input_dim
        s = pts[:, :n_space]
        return np.any((s == self.lo[:n_space]) | (s == self.hi[:n_space]), axis=1)

    # -- losses -------------------------------------------------------------

    def residual_parts(self, field, colloc: CollocationSet, phys: dict) -> list[list[ad.Node]]:
        """Pointwise residual vectors for each loss (a loss may sum several)."""
        raise NotImplementedError

    def losses(self, field, colloc: CollocationSet, phys: dict | None = None) -> list[ad.Node]:
        parts = self.residual_parts(field, colloc, phys or self.true_physical())
        return [ad.sum_nodes([mse(r) for r in group]) for group in parts]

    def true_physical(self) -> dict:
        if self.physical is None:
            return {}
        return {self.physical.name: ad.const(self.physical.true_value)}

    # -- references ---------------------------------------------------------

    def exact_field(self, x: ad.Node) -> ad.Node:
        """Analytic solution as a graph of ``x`` (forward problems with closed forms)."""
        raise NotImplementedError(f"{self.name} has no closed-form solution")

    def reference(self, pts) -> np.ndarray:
        return self.exact_field(ad.const(np.atleast_2d(pts))).value

    def test_grid(self) -> np.ndarray:
        if self.input_dim == 1:
            return np.linspace(self.lo[0], self.hi[0], 256)[:, None]
        axes = [np.linspace(a, b, 64) for a, b in self.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def metadata(self) -> dict:
        return {"name": self.name, "K": self.K, "losses": list(self.loss_names),
                "bounds": [list(b) for b in self.bounds], "params": dict(self.params),
                "desk_scale_standin": self.standin,
                "physical": None if self.physical is None else self.physical.__dict__.copy()}


def _col(u, i=0):
    return u.col(i)


def _sin_pi(x, k=1.0):
    return ad.sin(ad.mul(k * PI, x))


# -- forward problems ---------------------------------------------------------

class Poisson1D(PDEProblem):
    """``-u'' = pi^2 sin(pi x)`` on [0, 1] with zero Dirichlet data.

    Being steady, it has no initial slot; the third loss fits the exact field
    at a few fixed interior anchors.
    """

    name = "poisson1d"
    loss_names = ("pde", "bc", "data")
    bounds = ((0.0, 1.0),)

    def default_params(self):
        return {"n_anchor": 8}

    def anchors(self):
        n = self.params["n_anchor"]
        return np.linspace(0.0, 1.0, n + 2)[1:-1, None]

    def forcing(self, x):
        return ad.mul(PI ** 2, _sin_pi(x))

    def residual_parts(self, field, colloc, phys):
        x = ad.variable(colloc.interior, "x")
        u_xx = _col(_derivs(field(x), x, 0, 2))
        res = ad.neg(u_xx) - self.forcing(x.col(0))
        bc = _col(field(ad.const(colloc.boundary)))
        xa = self.anchors()
        data = _col(field(ad.const(xa))) - self.reference(xa)[:, 0]
        return [[res], [bc], [data]]

    def exact_field(self, x):
        return ad.reshape(_sin_pi(x.col(0)), (x.shape[0], 1))


class InversePoisson(Poisson1D):
    """``-u'' = alpha pi^2 sin(pi x)``, alpha learned from interior data (true 2)."""

    name = "inverse_poisson"
    physical = PhysicalScalar("alpha", 2.0, 1.0)

    def default_params(self):
        return {"n_anchor": 16}

    def residual_parts(self, field, colloc, phys):
        x = ad.variable(colloc.interior, "x")
        u_xx = _col(_derivs(field(x), x, 0, 2))
        res = ad.neg(u_xx) - ad.mul(phys["alpha"], self.forcing(x.col(0)))
        bc = _col(field(ad.const(colloc.boundary)))
        xa = self.anchors()
        data = _col(field(ad.const(xa))) - self.reference(xa)[:, 0]
        return [[res], [bc], [data]]

    def exact_field(self, x):
        return ad.reshape(ad.mul(self.physical.true_value, _sin_pi(x.col(0))), (x.shape[0], 1))


class Heat1D(PDEProblem):
    """``u_t = kappa u_xx`` on [0, 1] x [0, 1]; exact ``exp(-kappa pi^2 t) sin(pi x)``."""

    name = "heat1d"
    loss_names = ("pde", "bc", "ic")
    bounds = ((0.0, 1.0), (0.0, 1.0))
    time_dependent = True

    def default_params(self):
        return {"kappa": 0.1}

    def residual_parts(self, field, colloc, phys):
        x = ad.variable(colloc.interior, "xt")
        u = field(x)
        res = _col(_derivs(u, x, 1)) - ad.mul(self.params["kappa"], _col(_derivs(u, x, 0, 2)))
        bc = _col(field(ad.const(colloc.boundary)))
        x0 = colloc.initial
        ic = _col(field(ad.const(x0))) - np.sin(PI * x0[:, 0])
        return [[res], [bc], [ic]]

    def exact_field(self, x):
        decay = ad.exp(ad.mul(-self.params["kappa"] * PI ** 2, x.col(1)))
        return ad.reshape(decay * _sin_pi(x.col(0)), (x.shape[0], 1))


class Burgers1D(PDEProblem):
    """Viscous Burgers with forcing chosen so ``exp(-t) sin(pi x)`` is exact."""

    name = "burgers1d"
    loss_names = ("pde", "bc", "ic")
    bounds = ((-1.0, 1.0), (0.0, 1.0))
    time_dependent = True
    standin = True

    def default_params(self):
        return {"nu": 0.05}

    def forcing(self, pts):
        x, t = pts[:, 0], pts[:, 1]
        nu = self.params["nu"]
        u = np.exp(-t) * np.sin(PI * x)
        return -u + u * PI * np.exp(-t) * np.cos(PI * x) + nu * PI ** 2 * u

    def residual_parts(self, field, colloc, phys):
        x = ad.variable(colloc.interior, "xt")
        u = field(x)
        uc = _col(u)
        res = (_col(_derivs(u, x, 1)) + uc * _col(_derivs(u, x, 0))
               - ad.mul(self.params["nu"], _col(_derivs(u, x, 0, 2))) - self.forcing(colloc.interior))
        bc = _col(field(ad.const(colloc.boundary)))
        x0 = colloc.initial
        ic = _col(field(ad.const(x0))) - np.sin(PI * x0[:, 0])
        return [[res], [bc], [ic]]

    def exact_field(self, x):
        return ad.reshape(ad.exp(ad.neg(x.col(1))) * _sin_pi(x.col(0)), (x.shape[0], 1))


class Helmholtz2D(PDEProblem):
    """``u_xx + u_yy + omega^2 u = f`` on [-1, 1]^2, exact ``sin(pi x) sin(2 pi y)``."""

    name = "helmholtz2d"
    loss_names = ("pde", "bc", "data")
    bounds = ((-1.0, 1.0), (-1.0, 1.0))
    standin = True

    def default_params(self):
        return {"omega": 1.0, "n_anchor": 16}

    def anchors(self):
        n = int(round(math.sqrt(self.params["n_anchor"])))
        g = np.linspace(-1.0, 1.0, n + 2)[1:-1]
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def forcing(self, pts):
        w2 = self.params["omega"] ** 2
        return (w2 - 5 * PI ** 2) * np.sin(PI * pts[:, 0]) * np.sin(2 * PI * pts[:, 1])

    def residual_parts(self, field, colloc, phys):
        x = ad.variable(colloc.interior, "xy")
        u = field(x)
        lap = _col(_derivs(u, x, 0, 2)) + _col(_derivs(u, x, 1, 2))
        res = lap + ad.mul(self.params["omega"] ** 2, _col(u)) - self.forcing(colloc.interior)
        bc = _col(field(ad.const(colloc.boundary)))
        xa = self.anchors()
        data = _col(field(ad.const(xa))) - self.reference(xa)[:, 0]
        return [[res], [bc], [data]]

    def exact_field(self, x):
        return ad.reshape(_sin_pi(x.col(0)) * _sin_pi(x.col(1), 2.0), (x.shape[0], 1))


# -- thermoelastic system -------------------------------------------------------

@dataclass
class ReferenceTable:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray           # (len(x), len(t))
    v: np.ndarray
    meta: dict = field(default_factory=dict)

    def interpolator(self):
        iu = RegularGridInterpolator((self.x, self.t), self.u)
        iv = RegularGridInterpolator((self.x, self.t), self.v)
        return lambda pts: np.stack([iu(pts), iv(pts)], axis=1)


THERMO = {"D": 0.01, "alpha": 0.5, "c": 1.0, "beta": 0.3}


def _laplacian_banded(n, dx, scale):
    """Banded form of ``I - scale * L`` for the Dirichlet second difference on n unknowns."""
    ab = np.zeros((3, n))
    r = scale / dx ** 2
    ab[0, 1:] = -r
    ab[1, :] = 1 + 2 * r
    ab[2, :-1] = -r
    return ab


def _lap(w, dx):
    out = np.zeros_like(w)
    out[1:-1] = (w[2:] - 2 * w[1:-1] + w[:-2]) / dx ** 2
    return out


def thermoelastic_reference(grid_n: int = 200, nt: int | None = None,
                            coeffs: dict | None = None) -> ReferenceTable:
    """Coupled heat/wave solution on [-1, 1] x [0, 1].

    The wave field is advanced first by leapfrog (Stormer-Verlet) using the
    current temperature; the heat field then takes a Crank-Nicolson step with
    the coupling term averaged over the two time levels.  Both schemes are
    second order.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    nt = grid_n if nt is None else nt
    p = dict(THERMO, **(coeffs or {}))
    Dc, al, c, be = p["D"], p["alpha"], p["c"], p["beta"]
    x = np.linspace(-1.0, 1.0, grid_n)
    t = np.linspace(0.0, 1.0, nt)
    dx, dt = x[1] - x[0], t[1] - t[0]
    cfl = c * dt / dx
    if cfl > 1.0:
        need = math.ceil(c * (grid_n - 1) / 2.0) + 1
        raise ValueError(f"CFL number {cfl:.3f} > 1 for the wave step; use nt >= {need}")

    u = np.zeros((grid_n, nt))
    v = np.zeros((grid_n, nt))
    u[:, 0] = np.sin(PI * x)
    v[:, 0] = np.cos(PI * x / 2)
    u[[0, -1], 0] = 0.0
    v[[0, -1], 0] = 0.0

    ab = _laplacian_banded(grid_n - 2, dx, 0.5 * Dc * dt)
    v_prev = None
    for n in range(nt - 1):
        un, vn = u[:, n], v[:, n]
        accel = c ** 2 * _lap(vn, dx) + be * un
        if v_prev is None:
            v_next = vn + 0.5 * dt ** 2 * accel        # v_t(0) = 0
        else:
            v_next = 2 * vn - v_prev + dt ** 2 * accel
        v_next[[0, -1]] = 0.0
        rhs = un + 0.5 * Dc * dt * _lap(un, dx) + dt * al * 0.5 * (vn + v_next)
        u_next = np.zeros(grid_n)
        u_next[1:-1] = solve_banded((1, 1), ab, rhs[1:-1])
        u[:, n + 1] = u_next
        v[:, n + 1] = v_next
        v_prev = vn
    meta = {"grid_n": grid_n, "nt": nt, "cfl": cfl,
            "scheme": "crank-nicolson heat + leapfrog wave", **p}
    return ReferenceTable(x, t, u, v, meta)


def save_reference_csv(table: ReferenceTable, path) -> None:
    X, T = np.meshgrid(table.x, table.t, indexing="ij")
    head = " ".join(f"{k}={v}" for k, v in sorted(table.meta.items()))
    data = np.stack([X.ravel(), T.ravel(), table.u.ravel(), table.v.ravel()], axis=1)
    np.savetxt(path, data, delimiter=",", fmt="%.17g", header=head + "\nx,t,u,v")


def load_reference_csv(path) -> ReferenceTable:
    with open(path) as fh:
        meta_line = fh.readline().lstrip("# ").strip()
    meta = {}
    for item in meta_line.split(" "):
        if "=" in item:
            k, v = item.split("=", 1)
            meta[k] = v
    data = np.loadtxt(path, delimiter=",", comments="#")
    x = np.unique(data[:, 0])
    t = np.unique(data[:, 1])
    shape = (len(x), len(t))
    return ReferenceTable(x, t, data[:, 2].reshape(shape), data[:, 3].reshape(shape), meta)


@functools.lru_cache(maxsize=4)
def _cached_reference(grid_n: int, cache_dir: str | None) -> ReferenceTable:
    if cache_dir:
        path = Path(cache_dir) / f"thermoelastic_{grid_n}.csv"
        if path.exists():
            return load_reference_csv(path)
        table = thermoelastic_reference(grid_n)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_reference_csv(table, path)
        return table
    return thermoelastic_reference(grid_n)


class ThermoelasticK4(PDEProblem):
    """Heat equation driven by a displacement field obeying a forced wave equation.

    ``u_t = D u_xx + alpha v`` and ``v_tt = c^2 v_xx + beta u`` with
    ``u = v = 0`` at ``x = +-1``, ``u(x,0) = sin(pi x)``, ``v(x,0) = cos(pi x / 2)``
    and ``v_t(x,0) = 0``.  Output columns are ``(u, v)``.
    """

    name = "thermoelastic_k4"
    loss_names = ("heat", "wave", "bc", "ic")
    bounds = ((-1.0, 1.0), (0.0, 1.0))
    time_dependent = True
    output_dim = 2
    analytic = False

    def default_params(self):
        return {"grid_n": 200, **THERMO}

    def residual_parts(self, field, colloc, phys):
        p = self.params
        x = ad.variable(colloc.interior, "xt")
        w = field(x)
        u, v = _col(w, 0), _col(w, 1)
        heat = (_col(_derivs(w, x, 1), 0) - ad.mul(p["D"], _col(_derivs(w, x, 0, 2), 0))
                - ad.mul(p["alpha"], v))
        wave = (_col(_derivs(w, x, 1, 2), 1) - ad.mul(p["c"] ** 2, _col(_derivs(w, x, 0, 2), 1))
                - ad.mul(p["beta"], u))
        wb = field(ad.const(colloc.boundary))
        x0 = ad.variable(colloc.initial, "x0")
        w0 = field(x0)
        s = colloc.initial[:, 0]
        ic = [_col(w0, 0) - np.sin(PI * s), _col(w0, 1) - np.cos(PI * s / 2),
              _col(_derivs(w0, x0, 1), 1)]
        return [[heat], [wave], [_col(wb, 0), _col(wb, 1)], ic]

    def table(self) -> ReferenceTable:
        cache = os.environ.get("CONFLICTLAB_CACHE")
        return _cached_reference(int(self.params["grid_n"]), cache)

    def reference(self, pts):
        return self.table().interpolator()(np.atleast_2d(pts))


# -- two-loss synthetic problems ----------------------------------------------------

class TargetPair(PDEProblem):
    """Two data losses on shared anchors with targets ``u* + gap`` and ``u* - gap``.

    With ``gap > 0`` the two gradients point in opposite directions whenever the
    fit error is small against the gap, so conflict persists for the whole run.
    ``gap = 0`` makes the two losses identical (no conflict at all).  The error
    reference is ``u*`` itself, the minimizer of the equally weighted sum.
    """

    name = "target_pair"
    loss_names = ("upper", "lower")
    bounds = ((0.0, 1.0),)

    def default_params(self):
        return {"gap": 2.0, "n_anchor": 64}

    def anchors(self):
        return np.linspace(0.0, 1.0, self.params["n_anchor"])[:, None]

    def residual_parts(self, field, colloc, phys):
        xa = self.anchors()
        e = _col(field(ad.const(xa))) - self.reference(xa)[:, 0]
        g = self.params["gap"]
        return [[e - g], [e + g]]

    def exact_field(self, x):
        s = x.col(0)
        target = _sin_pi(s) + ad.mul(0.5, _sin_pi(s, 3.0))
        return ad.reshape(target, (x.shape[0], 1))

    def losses(self, field, colloc, phys=None):
        if self.params["gap"] == 0.0:
            # one residual feeding both slots keeps the two gradients bit-identical
            r = self.residual_parts(field, colloc, phys)[0][0]
            loss = mse(r)
            return [loss, ad.mul(1.0, loss)]
        return super().losses(field, colloc, phys)


class OpposingPair(TargetPair):
    name = "opposing_pair"


class IdenticalPair(TargetPair):
    name = "identical_pair"

    def default_params(self):
        return {"gap": 0.0, "n_anchor": 64}


REGISTRY = {
    cls.name: cls for cls in
    (Poisson1D, Heat1D, Burgers1D, Helmholtz2D, ThermoelasticK4, InversePoisson,
     OpposingPair, IdenticalPair)
}


def make_problem(name: str, **params) -> PDEProblem:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; registered: {sorted(REGISTRY)}") from None
    return cls(**params)


def physical_nodes(leaves: dict) -> dict:
    """Positive physical values ``exp(theta)`` from the model's ``phys.*`` leaves."""
    return {n[len("phys."):]: ad.exp(v) for n, v in leaves.items() if n.startswith("phys.")}


def loss_values(problem: PDEProblem, model, colloc: CollocationSet, leaves=None) -> list[ad.Node]:
    """K differentiable losses for ``model`` at the given collocation set."""
    if model.trunk.input_dim != problem.input_dim or model.trunk.output_dim != problem.output_dim:
        raise ValueError("model dimensions do not match the problem")
    lv = leaves if leaves is not None else model.leaves()
    phys = physical_nodes(lv) if problem.physical is not None else {}
    return problem.losses(model.field(lv), colloc, phys or None)


def relative_l2(model, problem: PDEProblem, test_grid=None) -> float:
    """``|u - u_ref| / |u_ref|`` on the test grid; ``model`` may be a callable."""
    grid = problem.test_grid() if test_grid is None else np.atleast_2d(test_grid)
    ref = np.asarray(problem.reference(grid), dtype=np.float64)
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise ValueError("reference field has zero norm on the test grid")
    pred = model.predict(grid) if hasattr(model, "predict") else model(grid)
    pred = np.asarray(pred, dtype=np.float64).reshape(ref.shape)
    return float(np.linalg.norm(pred - ref) / denom)
