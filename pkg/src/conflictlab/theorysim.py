"""Monte Carlo and closed-form checks of the directional-to-magnitude theory.

Random directions are uniform on the unit sphere; magnitudes are i.i.d. and
independent of the directions.  Trials are drawn in fixed-size chunks, chunk
``c`` from a Philox stream keyed by ``(seed, c)``, so any trial is
reproducible regardless of how chunks are scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import ParamVector

CHUNK = 10_000


@dataclass(frozen=True)
class TailModel:
    """``exponential``: ``t0 + Exp(rate nu)``.  ``pareto``: ``P(m > t) = (t0 / t)^alpha``."""

    kind: str
    t0: float = 1.0
    nu: float = 1.0
    alpha: float = 2.0

    def __post_init__(self):
        if self.kind not in ("exponential", "pareto"):
            raise ValueError(f"unknown tail kind {self.kind!r}")
        if self.t0 <= 0:
            raise ValueError("t0 must be > 0")
        if self.kind == "pareto" and self.alpha <= 1:
            raise ValueError("Pareto tail needs alpha > 1")
        if self.kind == "exponential" and self.nu <= 0:
            raise ValueError("exponential rate nu must be > 0")

    @classmethod
    def exponential(cls, nu: float = 1.0, t0: float = 0.1) -> "TailModel":
        return cls("exponential", t0=t0, nu=nu)

    @classmethod
    def pareto(cls, alpha: float = 2.0, t0: float = 1.0) -> "TailModel":
        return cls("pareto", t0=t0, alpha=alpha)

    def describe(self) -> str:
        if self.kind == "pareto":
            return f"pareto(alpha={self.alpha},t0={self.t0})"
        return f"exponential(nu={self.nu},t0={self.t0})"


@dataclass
class MCEstimate:
    mean: float
    se: float
    trials: int
    config: dict = field(default_factory=dict)
    variance: float = float("nan")

    @classmethod
    def from_samples(cls, x, config=None) -> "MCEstimate":
        x = np.asarray(x, dtype=np.float64)
        var = float(x.var(ddof=1)) if x.size > 1 else 0.0
        return cls(float(x.mean()), math.sqrt(var / x.size), int(x.size), dict(config or {}), var)


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk])))


def run_chunks(fn, trials: int, seed: int, workers: int = 1) -> np.ndarray:
    """Call ``fn(rng, n)`` per chunk and concatenate the per-trial outputs in chunk order."""
    sizes = [min(CHUNK, trials - s) for s in range(0, trials, CHUNK)]
    jobs = [(chunk_rng(seed, c), n) for c, n in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: fn(*j), jobs))
    else:
        parts = [fn(*j) for j in jobs]
    return np.concatenate(parts)


# -- directions ---------------------------------------------------------------

def sample_unit_sphere(d: int, rng, n: int | None = None) -> np.ndarray:
    """Normalized Gaussian vectors: one ``(d,)`` vector, or ``(n, d)`` rows."""
    if d < 1:
        raise ValueError("d must be >= 1")
    shape = (d,) if n is None else (n, d)
    z = rng.standard_normal(shape)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    # a zero draw has probability 0; redraw defensively rather than divide by 0
    while np.any(norm == 0):
        bad = (norm == 0)[..., 0]
        z[bad] = rng.standard_normal(z[bad].shape)
        norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norm


def mu_d(d: int) -> float:
    """``E[max(0, -u.v)]`` for independent uniform unit vectors in ``R^d``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return float(math.exp(gammaln(d / 2) - gammaln((d + 1) / 2)) / (2 * math.sqrt(math.pi)))


def n_pairs(K: int) -> int:
    return K * (K - 1) // 2


def dk_variance(d: int, K: int) -> float:
    """``Var(D_K) = (1 / n_K)(1 / (2d) - mu_d^2)``; the pair terms are uncorrelated."""
    return (1.0 / (2 * d) - mu_d(d) ** 2) / n_pairs(K)


def dk_statistic(units) -> np.ndarray | float:
    """Mean clipped negative cosine over all pairs; ``units`` is ``(..., K, d)``."""
    U = np.asarray(units, dtype=np.float64)
    K = U.shape[-2]
    if K < 2:
        raise ValueError("D_K needs K >= 2")
    G = U @ np.swapaxes(U, -1, -2)
    iu = np.triu_indices(K, 1)
    X = np.maximum(0.0, -G[..., iu[0], iu[1]])
    out = X.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mc_dk_concentration(d: int, K: int, trials: int = 100_000, seed: int = 0,
                        workers: int = 1) -> dict:
    """Empirical mean and variance of ``D_K`` against ``mu_d`` and the closed-form variance."""
    if trials < 1000:
        raise ValueError("use at least 1000 trials")

    def chunk(rng, n):
        return dk_statistic(sample_unit_sphere(d, rng, n * K).reshape(n, K, d))

    x = run_chunks(chunk, trials, seed, workers)
    est = MCEstimate.from_samples(x, {"d": d, "K": K, "seed": seed})
    target_mean, target_var = mu_d(d), dk_variance(d, K)
    return {
        "estimate": est,
        "mu_d": target_mean,
        "mean_z": (est.mean - target_mean) / est.se if est.se > 0 else 0.0,
        "variance": est.variance,
        "variance_target": target_var,
        "variance_rel_err": abs(est.variance - target_var) / target_var,
    }


# -- magnitudes ----------------------------------------------------------------

def sample_magnitude(tail: TailModel, rng, size=None) -> np.ndarray | float:
    if tail.kind == "pareto":
        u = 1.0 - rng.random(size)            # in (0, 1]
        return tail.t0 * u ** (-1.0 / tail.alpha)
    return tail.t0 + rng.exponential(1.0 / tail.nu, size)


def mean_over_max(m) -> np.ndarray:
    """``mbar / A_K`` row-wise for magnitudes ``(..., K)``."""
    m = np.asarray(m, dtype=np.float64)
    return m.mean(axis=-1) / m.max(axis=-1)


def mc_uk(tail: TailModel, d: int, K: int, trials: int = 100_000, seed: int = 0,
          workers: int = 1) -> dict:
    """``E[U_K]`` estimated jointly and through ``mu_d * E[mbar / A_K]``.

    The two estimates use independent streams (seed and seed + 1).
    """
    if K < 2:
        raise ValueError("U_K needs K >= 2")

    def joint(rng, n):
        dirs = sample_unit_sphere(d, rng, n * K).reshape(n, K, d)
        mags = sample_magnitude(tail, rng, (n, K))
        return dk_statistic(dirs) * mean_over_max(mags)

    def ratio(rng, n):
        return mean_over_max(sample_magnitude(tail, rng, (n, K)))

    cfg = {"tail": tail.describe(), "d": d, "K": K, "seed": seed}
    j = MCEstimate.from_samples(run_chunks(joint, trials, seed, workers), cfg)
    r = MCEstimate.from_samples(run_chunks(ratio, trials, seed + 1, workers), cfg)
    mu = mu_d(d)
    fact = MCEstimate(mu * r.mean, mu * r.se, r.trials, cfg, mu * mu * r.variance)
    combined = math.hypot(j.se, fact.se)
    return {"joint": j, "factorized": fact,
            "z": (j.mean - fact.mean) / combined if combined > 0 else 0.0}


def pareto_inverse_moment_exact(K: int, r: float, alpha: float, t0: float = 1.0) -> float:
    """``E[A_K^-r]`` for the maximum of K Pareto(alpha, t0) magnitudes."""
    if alpha <= 0 or r <= 0 or t0 <= 0 or K < 1:
        raise ValueError("need K >= 1 and alpha, r, t0 > 0")
    s = r / alpha
    log_val = gammaln(1 + s) + gammaln(K + 1) - gammaln(K + 1 + s)
    return float(t0 ** (-r) * math.exp(log_val))


def mc_pareto_inverse_moment(K: int, r: float, alpha: float, t0: float = 1.0,
                             trials: int = 100_000, seed: int = 0) -> MCEstimate:
    tail = TailModel.pareto(alpha, t0)

    def chunk(rng, n):
        return sample_magnitude(tail, rng, (n, K)).max(axis=1) ** (-r)

    return MCEstimate.from_samples(run_chunks(chunk, trials, seed),
                                   {"K": K, "r": r, "alpha": alpha, "t0": t0})


def uk_curve(tail: TailModel, d: int, K_max: int, trials: int = 20_000, seed: int = 0) -> np.ndarray:
    """Factorized ``E[U_K]`` for K = 2..K_max from one set of magnitude draws.

    Entry ``K - 2`` holds the estimate for K (prefix means and maxima share draws).
    """
    if K_max < 2:
        raise ValueError("K_max must be >= 2")
    ks = np.arange(1, K_max + 1)
    total = np.zeros(K_max)
    start = 0
    c = 0
    while start < trials:
        n = min(2_500, trials - start)
        m = sample_magnitude(tail, chunk_rng(seed, c), (n, K_max))
        total += (np.cumsum(m, axis=1) / ks / np.maximum.accumulate(m, axis=1)).sum(axis=0)
        start += n
        c += 1
    return mu_d(d) * total[1:] / trials


def kstar_scan(tail: TailModel, d: int, tau, K_max: int = 1024, trials: int = 20_000,
               seed: int = 0, curve=None):
    """Largest ``K <= K_max`` with ``E[U_K] > tau`` (None when no K qualifies).

    ``tau`` may be a scalar or an array; estimates carry Monte Carlo error near
    the threshold.
    """
    curve = uk_curve(tail, d, K_max, trials, seed) if curve is None else np.asarray(curve)
    Ks = np.arange(2, len(curve) + 2)

    def one(t):
        if t <= 0:
            raise ValueError("tau must be > 0")
        above = np.nonzero(curve > t)[0]
        return int(Ks[above[-1]]) if above.size else None

    if np.ndim(tau) == 0:
        return one(float(tau))
    return [one(float(t)) for t in tau]


def loglog_slope(x, y) -> float:
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


# -- blockwise NTK -------------------------------------------------------------------

def field_channels(orders=(0, 2)):
    """Channels ``s(x)``: the field (order 0) or its pure derivatives along ``x_0``."""
    def make(order):
        def channel(model, leaves, x):
            u = model.forward(x, leaves)
            if order:
                u = ad.input_derivative(u, x, 0, order)
            return u.col(0)
        return channel
    return [make(o) for o in orders]


def channel_jacobians(channels, model, leaves: dict, points) -> list[list[ParamVector]]:
    """``J[i][p] = grad_theta s_i(x_p)`` for every channel and point."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = []
    for ch in channels:
        x = ad.variable(pts, "x")
        s = ch(model, leaves, x)
        out.append([ad.grad_params(ad.take(s, [p], axis=0).reshape_1d(), leaves)
                    if s.ndim else ad.grad_params(s, leaves) for p in range(len(pts))])
    return out


def block_kernels(jac, blocks: dict) -> dict:
    """Kernel tables ``(C, n, C, n)`` for the full vector and each named block group."""
    C, n = len(jac), len(jac[0])
    flat = np.array([[j.flat() for j in row] for row in jac])          # (C, n, P)
    tables = {"full": np.einsum("apx,bqx->apbq", flat, flat)}
    for name, members in blocks.items():
        sub = np.array([[j.group(*members) for j in row] for row in jac])
        tables[name] = np.einsum("apx,bqx->apbq", sub, sub)
    return tables


@dataclass
class NTKReport:
    tables: dict
    residual: float
    scale: float
    off_diag_adapter: dict

    @property
    def ok(self) -> bool:
        return self.residual <= 1e-10 * max(1.0, self.scale)


def model_blocks(model) -> dict:
    """``shared`` (trunk, readout, physical) plus one group per adapter."""
    names = list(model.params)
    blocks = {"shared": [n for n in names if not n.startswith("adapter")]}
    for k in range(model.adapters.n_adapters):
        blocks[f"adapter{k}"] = [f"adapter{k}."]
    return blocks


def ntk_block_check(model, channels, points) -> NTKReport:
    """Verify that the kernel splits into shared plus per-adapter parts."""
    if model.adapters.n_adapters < 1:
        raise ValueError("the block check needs a model with adapters")
    leaves = model.leaves()
    jac = channel_jacobians(channels, model, leaves, points)
    blocks = model_blocks(model)
    tables = block_kernels(jac, blocks)
    parts = sum(tables[b] for b in blocks)
    residual = float(np.max(np.abs(tables["full"] - parts)))
    off = {}
    C = len(channels)
    for k in range(model.adapters.n_adapters):
        T = tables[f"adapter{k}"]
        off[f"adapter{k}"] = float(max((np.max(np.abs(T[i, :, j, :]))
                                        for i in range(C) for j in range(C) if i != j), default=0.0))
    return NTKReport(tables, residual, float(np.max(np.abs(tables["full"]))), off)
