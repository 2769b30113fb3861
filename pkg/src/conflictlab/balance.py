"""Loss weighting and gradient-surgery strategies.

Weighting strategies keep their state in small dataclasses and are advanced
once per training step.  Surgery operates on per-loss :class:`ParamVector`
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector

STRATEGIES = ("fixed", "famo", "famo_log", "gradnorm", "uncertainty", "pcgrad", "pcgrad_grouped")

FAMO_GAMMA = 0.01
FAMO_FLOOR = 0.01
EPS_L = 1e-12


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def clamp_renormalize(w, floor: float = FAMO_FLOOR) -> np.ndarray:
    """Clamp to ``floor`` and rescale to sum 1 without pushing clamped entries back under it.

    Clamped entries are pinned at the floor and only the free ones are rescaled;
    this repeats until no free entry drops below the floor (at most K rounds).
    """
    w = np.asarray(w, dtype=np.float64)
    w = w / w.sum()
    pinned = np.zeros(w.size, dtype=bool)
    for _ in range(w.size):
        low = ~pinned & (w < floor)
        if not low.any():
            break
        pinned |= low
        free = ~pinned
        out = np.where(pinned, floor, w)
        mass = 1.0 - floor * pinned.sum()
        if free.any():
            out[free] = w[free] * (mass / w[free].sum())
        w = out
    return w


@dataclass
class FamoState:
    n_losses: int
    gamma: float = FAMO_GAMMA
    z: np.ndarray = None
    weights: np.ndarray = None
    prev_losses: np.ndarray | None = None
    events: list = field(default_factory=list)

    def __post_init__(self):
        if self.z is None:
            self.z = np.zeros(self.n_losses)
        if self.weights is None:
            self.weights = np.full(self.n_losses, 1.0 / self.n_losses)


def _famo_update(state: FamoState, losses, delta) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        state.events.append("non-finite losses; weights held")
        return state.weights.copy()
    if state.prev_losses is not None:
        state.z = state.z + state.gamma * delta(losses, state.prev_losses)
        state.weights = clamp_renormalize(softmax(state.z))
    state.prev_losses = losses
    return state.weights.copy()


def famo_step(state: FamoState, current_losses) -> np.ndarray:
    """Dual ascent on logits: ``z_k += gamma (L_k(t) - L_k(t-1))``, then floored softmax."""
    return _famo_update(state, current_losses, lambda new, old: new - old)


def famo_log_step(state: FamoState, current_losses, eps_l: float = EPS_L) -> np.ndarray:
    """Scale-free variant of :func:`famo_step` driven by log-loss differences."""
    # log of the ratio, so a common power-of-two scale cancels exactly
    return _famo_update(state, current_losses,
                        lambda new, old: np.log((new + eps_l) / (old + eps_l)))


@dataclass
class GradNormState:
    n_losses: int
    alpha: float = 1.5
    lr: float = 0.025
    eps: float = 1e-12
    weights: np.ndarray = None
    initial_losses: np.ndarray | None = None
    # Adam moments for the task weights
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    last_loss: float = float("nan")

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones(self.n_losses)
        self.m = np.zeros(self.n_losses)
        self.v = np.zeros(self.n_losses)


def gradnorm_targets(state: GradNormState, grad_norms, losses):
    """Weighted norms ``G_k``, their mean and the targets ``mean(G) * xi_k^alpha``."""
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if state.initial_losses is None:
        state.initial_losses = losses.copy()
    ratios = losses / np.maximum(state.initial_losses, state.eps)
    xi = ratios / max(ratios.mean(), state.eps)
    G = state.weights * grad_norms
    G_bar = G.mean()
    return G, G_bar, G_bar * xi ** state.alpha


def gradnorm_step(state: GradNormState, grad_norms, current_losses) -> np.ndarray:
    """One Adam step on ``sum_k |w_k |grad_k| - target_k|``; weights rescaled to sum K.

    Targets are held constant during the weight update, as in the reference
    algorithm.
    """
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    G, _, target = gradnorm_targets(state, grad_norms, current_losses)
    state.last_loss = float(np.abs(G - target).sum())
    g = np.sign(G - target) * grad_norms
    state.t += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    w = state.weights - state.lr * m_hat / (np.sqrt(v_hat) + eps)
    w = np.maximum(w, state.eps)
    state.weights = w * state.n_losses / w.sum()
    return state.weights.copy()


def uncertainty_total(losses, s):
    """``sum_k exp(-s_k) L_k + s_k``; works on graph nodes or plain numbers."""
    if any(isinstance(v, ad.Node) for v in list(losses) + list(s)):
        terms = [ad.add(ad.mul(ad.exp(ad.neg(s_k)), L_k), s_k) for L_k, s_k in zip(losses, s)]
        return ad.sum_nodes(terms)
    losses = np.asarray(losses, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return float(np.sum(np.exp(-s) * losses + s))


def _project(grads: list[np.ndarray], rng) -> np.ndarray:
    K = len(grads)
    out = np.zeros_like(grads[0])
    sq = [float(g @ g) for g in grads]
    for i in range(K):
        g = grads[i].copy()
        others = [j for j in range(K) if j != i]
        if rng is not None:
            others = list(rng.permutation(others))
        for j in others:
            dot = float(g @ grads[j])
            if dot < 0 and sq[j] > 0:
                g = g - dot / sq[j] * grads[j]
        out = out + g
    return out


def pcgrad_combine(grads: list[ParamVector], rng=None) -> ParamVector:
    """Project each gradient off every conflicting partner (shuffled order), then sum."""
    if len(grads) < 2:
        raise ValueError("PCGrad needs at least two gradients")
    flat = [g.flat() for g in grads]
    return grads[0].like(_project(flat, rng))


def pcgrad_grouped(grads: list[ParamVector], blocks_to_surger, rng=None) -> ParamVector:
    """PCGrad restricted to the named blocks; every other block gets the plain sum."""
    if len(grads) < 2:
        raise ValueError("PCGrad needs at least two gradients")
    names = grads[0].select(blocks_to_surger)
    rest = [n for n in grads[0].names if n not in names]
    total = grads[0]
    for g in grads[1:]:
        total = total + g
    surgered = pcgrad_combine([g.subset(names) for g in grads], rng) if names else None
    out = total.subset(rest) if rest else None
    merged = {}
    for n in grads[0].names:
        merged[n] = surgered.blocks[n] if n in names else out.blocks[n]
    return ParamVector(merged)


def network_blocks(vec: ParamVector) -> list[str]:
    """Every block that is not a learnable physical scalar."""
    return [n for n in vec.names if not n.startswith("phys.")]


@dataclass
class Balancer:
    """Per-run weighting state for one strategy tag."""

    strategy: str
    n_losses: int
    famo: FamoState | None = None
    gradnorm: GradNormState | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown balance strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy in ("famo", "famo_log"):
            self.famo = FamoState(self.n_losses)
        elif self.strategy == "gradnorm":
            self.gradnorm = GradNormState(self.n_losses)

    @property
    def needs_per_loss_grads(self) -> bool:
        return self.strategy in ("gradnorm", "pcgrad", "pcgrad_grouped")

    def neutral_weights(self) -> np.ndarray:
        if self.famo is not None:
            return np.full(self.n_losses, 1.0 / self.n_losses)
        return np.ones(self.n_losses)

    def weights(self, losses, grad_norms=None) -> np.ndarray:
        if self.strategy == "famo":
            return famo_step(self.famo, losses)
        if self.strategy == "famo_log":
            return famo_log_step(self.famo, losses)
        if self.strategy == "gradnorm":
            # the current weights drive this step; the update applies next step
            w = self.gradnorm.weights.copy()
            gradnorm_step(self.gradnorm, grad_norms, losses)
            return w
        return np.ones(self.n_losses)
