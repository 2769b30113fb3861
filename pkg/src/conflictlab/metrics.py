"""Gradient-conflict metrics and windowed profile summaries.

All functions take plain numpy vectors (flattened per-loss gradients).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .serialize import read_json, write_csv, write_json

EPS_G = 1e-12
EPS_R = 1e-8
EPS_P = 1e-8


def safe_cosine(g_i, g_j) -> float:
    """Cosine similarity, defined as 0 when either vector is zero."""
    g_i = np.asarray(g_i, dtype=np.float64).ravel()
    g_j = np.asarray(g_j, dtype=np.float64).ravel()
    if g_i.shape != g_j.shape:
        raise ValueError(f"length mismatch: {g_i.size} vs {g_j.size}")
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni * nj == 0.0:
        return 0.0
    return float(np.clip(g_i @ g_j / (ni * nj), -1.0, 1.0))


def conflict_score(g_i, g_j, eps_g: float = EPS_G) -> float:
    """Magnitude-aware conflict: negative part of the regularized cosine times
    ``1 + |log((|g_i| + eps) / (|g_j| + eps))|``."""
    g_i = np.asarray(g_i, dtype=np.float64).ravel()
    g_j = np.asarray(g_j, dtype=np.float64).ravel()
    if g_i.shape != g_j.shape:
        raise ValueError(f"length mismatch: {g_i.size} vs {g_j.size}")
    ni = np.linalg.norm(g_i) + eps_g
    nj = np.linalg.norm(g_j) + eps_g
    neg = max(0.0, -float(g_i @ g_j) / (ni * nj))
    return neg * (1.0 + abs(math.log(ni / nj)))


def conflict_matrix(grads, eps_g: float = EPS_G) -> np.ndarray:
    K = len(grads)
    C = np.zeros((K, K))
    for i, j in combinations(range(K), 2):
        C[i, j] = C[j, i] = conflict_score(grads[i], grads[j], eps_g)
    return C


def aggregate_conflict(C, k: int | None = None):
    """Mean conflict of loss ``k`` against the others (all losses if ``k`` is None)."""
    C = np.asarray(C, dtype=np.float64)
    K = C.shape[0]
    if K < 2:
        raise ValueError("aggregate conflict needs at least two losses")
    off = C.sum(axis=1) - np.diag(C)
    agg = off / (K - 1)
    return agg if k is None else float(agg[k])


def layerwise_conflict(grads_by_layer) -> np.ndarray:
    """``C_k^(l)`` from per-layer gradient slices; ``grads_by_layer[l][k]``."""
    return np.stack([aggregate_conflict(conflict_matrix(layer)) for layer in grads_by_layer], axis=1)


def magnitude_ratio_bar(grads, eps_g: float = EPS_G) -> float:
    norms = [float(np.linalg.norm(np.ravel(g))) for g in grads]
    if len(norms) < 2:
        raise ValueError("magnitude ratio needs at least two losses")
    ratios = [(max(a, b) + eps_g) / (min(a, b) + eps_g) for a, b in combinations(norms, 2)]
    return float(np.mean(ratios))


@dataclass
class StepConflictRecord:
    step: int
    norms: list[float]
    cosines: list[float]          # pairs (i, j), i < j, in lexicographic order
    f_neg: float
    mean_neg_cos: float
    D: float
    M: float


def step_from_cosines(step: int, norms, cosines, eps_g: float = EPS_G) -> StepConflictRecord:
    norms = [float(n) for n in norms]
    cosines = [float(c) for c in cosines]
    neg = [c for c in cosines if c < 0]
    f_neg = len(neg) / len(cosines)
    c_bar = float(np.mean(neg)) if neg else 0.0
    arr = np.asarray(norms)
    M = float(arr.std() / (arr.mean() + eps_g))
    return StepConflictRecord(step, norms, cosines, f_neg, c_bar, f_neg * abs(c_bar), M)


def step_summaries(grads, step: int = 0, eps_g: float = EPS_G) -> StepConflictRecord:
    """Per-step negative-pair fraction, conflict strength and norm dispersion.

    ``M`` uses the population standard deviation of the gradient norms.
    """
    K = len(grads)
    if K < 2:
        raise ValueError("step summaries need at least two losses")
    flat = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    norms = [np.linalg.norm(g) for g in flat]
    cosines = [safe_cosine(flat[i], flat[j]) for i, j in combinations(range(K), 2)]
    return step_from_cosines(step, norms, cosines, eps_g)


@dataclass
class ConflictProfile:
    records: list[StepConflictRecord] = field(default_factory=list)
    n_steps: int = 0
    f_neg: float = 0.0
    D: float = 0.0
    M: float = 0.0
    R: float = 0.0
    early_f_neg: float = 0.0
    late_f_neg: float = 0.0
    persistence: float = 0.0
    slope: float = 0.0               # per profiling step
    eps_van: float = float("nan")
    failed: bool = False

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "records"}

    @classmethod
    def from_summary(cls, d: dict) -> "ConflictProfile":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "records"})


def ols_slope(y) -> float:
    y = np.asarray(y, dtype=np.float64)
    t = np.arange(y.size, dtype=np.float64)
    tc = t - t.mean()
    return float(tc @ (y - y.mean()) / (tc @ tc))


def profile_summaries(records, eps_van: float = float("nan")) -> ConflictProfile:
    """Window means, persistence and the least-squares ``f_neg`` trend.

    Early and late thirds each hold ``floor(T / 3)`` records.
    """
    records = list(records)
    if not records:
        raise ValueError("empty profiling window")
    if len(records) < 3:
        raise ValueError("profile summaries need at least three records")
    T = len(records)
    f = np.array([r.f_neg for r in records])
    D = float(np.mean([r.D for r in records]))
    M = float(np.mean([r.M for r in records]))
    third = T // 3
    early = float(f[:third].mean())
    late = float(f[T - third:].mean())
    return ConflictProfile(
        records=records, n_steps=T, f_neg=float(f.mean()), D=D, M=M, R=D / (M + EPS_R),
        early_f_neg=early, late_f_neg=late, persistence=late / max(early, EPS_P),
        slope=ols_slope(f), eps_van=eps_van)


def write_profile(profile: ConflictProfile, csv_path, json_path) -> None:
    """One CSV row per step plus a JSON summary record."""
    K = len(profile.records[0].norms) if profile.records else 0
    rows = [[r.step, *r.norms, r.f_neg, r.D, r.M] for r in profile.records]
    write_csv(csv_path, ["t", *[f"norm_{k}" for k in range(K)], "f_neg", "D", "M"], rows)
    write_json(json_path, profile.summary())


def read_profile(json_path) -> ConflictProfile:
    return ConflictProfile.from_summary(read_json(json_path))
