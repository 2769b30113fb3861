"""Vanilla conflict profiling, regime-aware method selection and the rank heuristic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .metrics import ConflictProfile, profile_summaries
from .model import PINN, TrunkConfig
from .problems import PDEProblem
from .trainer import TrainConfig, train

REWEIGHT_ONLY = "ReweightOnly_FAMO"
ADAPTER_UAM = "Adapter_FAMO_UAM"
NO_ADAPTER = "NoAdapter_FAMO_or_GradNorm"
CHOICES = (REWEIGHT_ONLY, ADAPTER_UAM, NO_ADAPTER)
REASONS = ("inverse_k3", "inverse_k4", "easy_problem", "negligible_conflict",
           "persistent", "transient", "default_conflict")

TABLE_ROWS = {
    "easy_problem": "Low conflict or easy profile",
    "negligible_conflict": "Low conflict or easy profile",
    "transient": "Transient: P<0.5, slope<-0.02",
    "persistent": "Persistent: P>0.8",
    # the table has no separate row for the fallback; it shares the adapter row
    "default_conflict": "Persistent: P>0.8",
    "inverse_k3": "Inverse or heterogeneous",
    "inverse_k4": "Inverse or heterogeneous",
}


@dataclass
class SelectorConfig:
    eps_easy: float = 1e-3
    f_neg_min: float = 0.05
    p_persistent: float = 0.8
    p_transient: float = 0.5
    slope_transient: float = -0.02
    # the raw per-step slope is rescaled to a window of this many ticks
    slope_ticks: float = 100.0


@dataclass
class RegimeDecision:
    choice: str
    reason: str
    diagnostics: dict = field(default_factory=dict)
    admissible: list = field(default_factory=list)

    @property
    def table_row(self) -> str:
        return TABLE_ROWS[self.reason]

    def to_dict(self) -> dict:
        return {"choice": self.choice, "reason": self.reason, "admissible": list(self.admissible),
                "table_row": self.table_row, "diagnostics": dict(self.diagnostics)}


def scaled_slope(profile: ConflictProfile, ticks: float = 100.0) -> float:
    """Per-step slope expressed per tick of a window rescaled to ``ticks`` ticks."""
    if profile.n_steps <= 0:
        return profile.slope
    return profile.slope * profile.n_steps / ticks


def select(profile: ConflictProfile | None, has_physical_params: bool, K: int,
           cfg: SelectorConfig | None = None) -> RegimeDecision:
    """Branch order: inverse checks, failed profile, easy problem, negligible
    conflict, persistent, transient, then the conflict default."""
    cfg = cfg or SelectorConfig()
    if has_physical_params and K == 3:
        return RegimeDecision(NO_ADAPTER, "inverse_k3", {"K": K},
                              admissible=["famo", "gradnorm"])
    if has_physical_params and K == 4:
        return RegimeDecision(ADAPTER_UAM, "inverse_k4", {"K": K})
    if profile is None or profile.failed:
        return RegimeDecision(ADAPTER_UAM, "default_conflict", {"K": K, "profile_failed": True})
    slope = scaled_slope(profile, cfg.slope_ticks)
    diag = {"K": K, "eps_van": profile.eps_van, "f_neg": profile.f_neg, "P": profile.persistence,
            "slope": profile.slope, "scaled_slope": slope, "D": profile.D, "M": profile.M,
            "R": profile.R}
    if profile.eps_van < cfg.eps_easy:
        return RegimeDecision(REWEIGHT_ONLY, "easy_problem", diag)
    if profile.f_neg < cfg.f_neg_min:
        return RegimeDecision(REWEIGHT_ONLY, "negligible_conflict", diag)
    if profile.persistence > cfg.p_persistent:
        return RegimeDecision(ADAPTER_UAM, "persistent", diag)
    if profile.persistence < cfg.p_transient and slope < cfg.slope_transient:
        return RegimeDecision(REWEIGHT_ONLY, "transient", diag)
    return RegimeDecision(ADAPTER_UAM, "default_conflict", diag)


def rank_heuristic(d_h: int, f_neg: float, K: int) -> int:
    """``ceil(d_h f_neg / K)``; zero conflict gives rank 0 (no adapters)."""
    if K < 1 or d_h < 1:
        raise ValueError("need K >= 1 and d_h >= 1")
    if not 0.0 <= f_neg <= 1.0:
        raise ValueError("f_neg must lie in [0, 1]")
    # guard against float noise such as 128 * 0.375 / 3 = 16.000000000000004
    return int(math.ceil(d_h * f_neg / K - 1e-9))


def profile(problem: PDEProblem, trunk: TrunkConfig | None = None, T_prof: int = 1000,
            seed: int = 0, train_cfg: TrainConfig | None = None) -> ConflictProfile:
    """Train the plain trunk with equal weights, logging full per-loss gradients each step."""
    trunk = trunk or TrunkConfig(input_dim=problem.input_dim, output_dim=problem.output_dim)
    if problem.K < 2:
        raise ValueError("profiling needs at least two losses")
    base = train_cfg or TrainConfig()
    warm = min(base.warmup, T_prof // 5)
    cfg = TrainConfig(**{**base.__dict__, "epochs": T_prof, "warmup": warm, "seed": seed,
                         "balance": "fixed", "log_conflict_every": 1, "mixing": None})
    physical = {problem.physical.name: problem.physical.init} if problem.physical else None
    model = PINN(trunk, None, seed=seed, physical=physical)
    result = train(problem, model, cfg)
    if result.failed or len(result.records) < 3:
        prof = ConflictProfile(records=result.records, n_steps=len(result.records), failed=True)
        return prof
    return profile_summaries(result.records, eps_van=result.rel_l2)
