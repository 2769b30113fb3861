"""Training loop: warm-up, loss weighting, adapter mixing updates, AdamW with clipping."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .balance import Balancer, pcgrad_combine, pcgrad_grouped, network_blocks, uncertainty_total
from .metrics import StepConflictRecord, aggregate_conflict, conflict_matrix, step_summaries
from .model import PINN, RHO_MAX, RHO_MIN, UAM_RHO
from .problems import CollocationCounts, PDEProblem, loss_values, relative_l2
from .serialize import write_csv


@dataclass
class TrainConfig:
    epochs: int = 2000
    warmup: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    tau: int = 20
    ema_beta: float = 0.95
    a0: float = 1.0
    b: float = 2.0
    rho_min: float = RHO_MIN
    rho_max: float = RHO_MAX
    delta_shallow: float = 0.3
    delta_deep: float = -0.3
    lam_ortho: float = 0.01
    lam_cross: float = 0.001
    seed: int = 0
    balance: str = "famo"
    mixing: str | None = None       # None keeps the model's own mode
    n_coll: int = 128
    n_bc: int = 32
    n_ic: int = 32
    log_conflict_every: int = 0     # 0 disables per-step conflict logging

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup < self.epochs:
            raise ValueError("warmup must satisfy 0 <= warmup < epochs")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0 < self.rho_min <= self.rho_max < 1:
            raise ValueError("need 0 < rho_min <= rho_max < 1")
        if not 0 <= self.ema_beta < 1:
            raise ValueError("ema_beta must lie in [0, 1)")

    @property
    def counts(self) -> CollocationCounts:
        return CollocationCounts(self.n_coll, self.n_bc, self.n_ic)


@dataclass
class TrainResult:
    rel_l2: float
    losses: np.ndarray              # (epochs_run, K)
    weights: np.ndarray             # (epochs_run, K)
    total: np.ndarray
    lr: np.ndarray
    f_neg: np.ndarray               # NaN where conflict was not logged
    pi: np.ndarray                  # (epochs_run, K_adapters, L)
    records: list[StepConflictRecord] = field(default_factory=list)
    wall_time: float = 0.0
    failed: bool = False
    fail_reason: str = ""
    physical: dict = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.total)

    def summary(self) -> dict:
        return {
            "rel_l2": self.rel_l2, "failed": self.failed, "fail_reason": self.fail_reason,
            "epochs_run": self.epochs_run,
            "final_losses": self.losses[-1].tolist() if len(self.losses) else [],
            "final_total": float(self.total[-1]) if len(self.total) else float("nan"),
            "physical": self.physical,
        }


# -- small pieces ---------------------------------------------------------------

def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr``, then cosine decay to 0 at ``epochs``."""
    if t < cfg.warmup:
        return cfg.lr * t / cfg.warmup
    span = cfg.epochs - cfg.warmup
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (t - cfg.warmup) / span))


def clip_global_norm(grad: ParamVector, max_norm: float) -> ParamVector:
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    n = grad.norm()
    if n > max_norm:
        return grad * (max_norm / n)
    return grad


def ema(old, new, beta: float = 0.95):
    return beta * np.asarray(old) + (1.0 - beta) * np.asarray(new)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def layer_offsets(depth: int, shallow: float = 0.3, deep: float = -0.3) -> np.ndarray:
    return np.linspace(shallow, deep, depth)


def rho_update(C, mode: str, a0: float = 1.0, b: float = 2.0, delta=None,
               lo: float = RHO_MIN, hi: float = RHO_MAX) -> np.ndarray:
    """Latent mixing scores from conflict scores.

    ``cam`` takes per-loss scores ``C_k``; ``lcam`` takes a ``K x L`` table and
    per-layer offsets ``delta``.  ``uam`` ignores ``C``.
    """
    C = np.asarray(C, dtype=np.float64)
    if np.any(C < 0):
        raise ValueError("conflict scores must be nonnegative")
    if mode == "uam":
        return np.full(C.shape, UAM_RHO)
    if mode == "cam":
        return np.clip(sigmoid(a0 - b * C), lo, hi)
    if mode == "lcam":
        d = np.zeros(C.shape[-1]) if delta is None else np.asarray(delta, dtype=np.float64)
        return np.clip(sigmoid(a0 + d[None, :] - b * C), lo, hi)
    raise ValueError(f"unknown mixing mode {mode!r}")


class AdamW:
    """Decoupled weight decay Adam over named numpy blocks."""

    def __init__(self, names, shapes, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 no_decay=()):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.no_decay = set(no_decay)
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n, g in grads.items():
            g = g.reshape(params[n].shape)
            m = self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            v = self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            p = params[n]
            if self.wd and n not in self.no_decay:
                p = p * (1 - lr * self.wd)
            params[n] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- the loop ---------------------------------------------------------------------

def _trunk_layer_names(model: PINN, l: int) -> list[str]:
    return [f"trunk.block{l}.{p}" for p in ("W1", "b1", "W2", "b2")]


def _mixing_conflict(model: PINN, losses, leaves, mode):
    """Per-loss conflict from trunk-block gradients: ``(K,)`` for CAM, ``(K, L)`` for LCAM."""
    L = model.trunk.depth
    names = [n for l in range(L) for n in _trunk_layer_names(model, l)]
    per_loss = [ad.grad_params(Lk, {n: leaves[n] for n in names}) for Lk in losses]
    if mode == "cam":
        return aggregate_conflict(conflict_matrix([g.flat() for g in per_loss]))
    cols = []
    for l in range(L):
        layer = _trunk_layer_names(model, l)
        cols.append(aggregate_conflict(conflict_matrix([g.group(*layer) for g in per_loss])))
    return np.stack(cols, axis=1)


def train(problem: PDEProblem, model: PINN, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """Run the full schedule; divergence ends the run with ``failed=True``."""
    t_start = time.perf_counter()
    K = problem.K
    if model.trunk.input_dim != problem.input_dim or model.trunk.output_dim != problem.output_dim:
        raise ValueError("model dimensions do not match the problem")
    mode = cfg.mixing or model.mixing.mode
    if model.adapters.n_adapters and model.adapters.n_adapters != K:
        raise ValueError(f"model has {model.adapters.n_adapters} adapters but the problem has {K} losses")
    model.mixing.mode = mode
    adapters_on = model.adapters_active
    dynamic_mixing = adapters_on and mode in ("cam", "lcam")
    delta = layer_offsets(model.trunk.depth, cfg.delta_shallow, cfg.delta_deep)

    balancer = Balancer(cfg.balance, K)
    trainable = model.trainable_names()
    extra = {}
    if cfg.balance == "uncertainty":
        extra = {f"balance.s{k}": np.array(0.0) for k in range(K)}
    names = trainable + list(extra)
    store = {**model.params, **extra}
    no_decay = [n for n in names if n.startswith("phys.") or n.startswith("balance.")]
    opt = AdamW(names, [store[n].shape for n in names], weight_decay=cfg.weight_decay,
                no_decay=no_decay)

    coll_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    pc_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    gn_layer = f"trunk.block{model.trunk.depth - 1}.W2"

    loss_hist, w_hist, tot_hist, lr_hist, fneg_hist, pi_hist = [], [], [], [], [], []
    records = []
    ema_C = None
    failed, reason = False, ""

    for t in range(cfg.epochs):
        colloc = problem.sample_collocation(cfg.counts, coll_rng)
        leaves = model.leaves()
        for n, v in extra.items():
            leaves[n] = ad.param(store[n], n)
        losses = loss_values(problem, model, colloc, leaves)
        lvals = np.array([float(L.value) for L in losses])
        if not np.all(np.isfinite(lvals)):
            failed, reason = True, f"non-finite loss at epoch {t}"
            break

        if dynamic_mixing and t >= cfg.warmup and (t - cfg.warmup) % cfg.tau == 0:
            C = _mixing_conflict(model, losses, leaves, mode)
            ema_C = C if ema_C is None else ema(ema_C, C, cfg.ema_beta)
            rho = rho_update(ema_C, mode, cfg.a0, cfg.b, delta, cfg.rho_min, cfg.rho_max)
            if mode == "cam":
                rho = np.repeat(rho[:, None], model.trunk.depth, axis=1)
            model.mixing.set_rho(rho, cfg.rho_min, cfg.rho_max)

        want_conflict = cfg.log_conflict_every and t % cfg.log_conflict_every == 0
        per_loss = None
        if want_conflict or (t >= cfg.warmup and balancer.needs_per_loss_grads):
            per_loss = [ad.grad_params(Lk, {n: leaves[n] for n in trainable}) for Lk in losses]
        f_neg = float("nan")
        if want_conflict and K >= 2:
            rec = step_summaries([g.flat() for g in per_loss], step=t)
            records.append(rec)
            f_neg = rec.f_neg

        if t < cfg.warmup:
            w = balancer.neutral_weights()
        elif cfg.balance == "gradnorm":
            norms = [np.linalg.norm(g.blocks[gn_layer]) for g in per_loss]
            w = balancer.weights(lvals, norms)
        else:
            w = balancer.weights(lvals)

        ortho = model.ortho_penalty(leaves, cfg.lam_ortho, cfg.lam_cross) if adapters_on else None
        grad_leaves = {n: leaves[n] for n in names}
        if cfg.balance == "uncertainty" and t >= cfg.warmup:
            total = uncertainty_total(losses, [leaves[f"balance.s{k}"] for k in range(K)])
        else:
            total = ad.sum_nodes([ad.mul(float(w[k]), losses[k]) for k in range(K)])
        if ortho is not None:
            total = total + ortho
        tval = float(total.value)
        if not math.isfinite(tval):
            failed, reason = True, f"non-finite total loss at epoch {t}"
            break

        if cfg.balance in ("pcgrad", "pcgrad_grouped") and t >= cfg.warmup:
            if cfg.balance == "pcgrad":
                g = pcgrad_combine(per_loss, pc_rng)
            else:
                g = pcgrad_grouped(per_loss, network_blocks(per_loss[0]), pc_rng)
            if ortho is not None:
                g = g + ad.grad_params(ortho, {n: leaves[n] for n in trainable})
        else:
            g = ad.grad_params(total, grad_leaves)
        if not np.all(np.isfinite(g.flat())):
            failed, reason = True, f"non-finite gradient at epoch {t}"
            break
        g = clip_global_norm(g, cfg.clip_norm)
        lr = lr_schedule(t, cfg)
        opt.step(store, g.blocks, lr)
        for n in trainable:
            model.params[n] = store[n]

        loss_hist.append(lvals)
        w_hist.append(np.asarray(w, dtype=np.float64))
        tot_hist.append(tval)
        lr_hist.append(lr)
        fneg_hist.append(f_neg)
        pi_hist.append(model.mixing.pi.copy())
        if on_epoch is not None:
            on_epoch(t, lvals)

    try:
        err = relative_l2(model, problem) if not failed else float("nan")
    except (ValueError, FloatingPointError):
        err = float("nan")
    if not math.isfinite(err) and not failed:
        failed, reason = True, "non-finite prediction"
    physical = {n[len("phys."):]: model.physical_value(n[len("phys."):]) for n in model.physical_names}
    kk = model.adapters.n_adapters
    return TrainResult(
        rel_l2=err,
        losses=np.array(loss_hist).reshape(-1, K),
        weights=np.array(w_hist).reshape(-1, K),
        total=np.array(tot_hist),
        lr=np.array(lr_hist),
        f_neg=np.array(fneg_hist),
        pi=np.array(pi_hist) if pi_hist else np.zeros((0, kk, model.trunk.depth)),
        records=records,
        wall_time=time.perf_counter() - t_start,
        failed=failed,
        fail_reason=reason,
        physical=physical,
    )


def write_train_log(result: TrainResult, path, loss_names) -> None:
    """One row per epoch: losses, weights, learning rate, total and logged f_neg."""
    head = ["epoch", *[f"loss_{n}" for n in loss_names], *[f"w_{n}" for n in loss_names],
            "lr", "total", "f_neg"]
    rows = [[t, *result.losses[t], *result.weights[t], result.lr[t], result.total[t], result.f_neg[t]]
            for t in range(result.epochs_run)]
    write_csv(path, head, rows)
