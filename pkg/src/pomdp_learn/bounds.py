"""Empirical checks of the optimality-loss bounds for alpha-approximate POMDPs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import PomdpModel, alpha_distance
from .planner import (VALUE_TOL, evaluate_policy_exact, random_policy, solve_optimal_dp,
                      solve_optimal_enum)
from .simgen import random_pomdp


def alpha_for_epsilon(epsilon: float, horizon: int, num_states: int, r_max: float,
                      theorem: int = 1) -> float:
    """Transition tolerance alpha that guarantees a value gap of at most epsilon.

    Same-policy gap (theorem 1): eps / (H^2 N r_max).  Optimality loss
    (theorem 2): half of that.
    """
    if theorem not in (1, 2):
        raise ValueError("theorem must be 1 or 2")
    if min(epsilon, horizon, num_states, r_max) <= 0:
        raise ValueError("epsilon, horizon, num_states and r_max must be positive")
    alpha = epsilon / (theorem * horizon**2 * num_states * r_max)
    if not 0 < alpha < 1:
        raise ValueError(f"alpha = {alpha} is not inside (0, 1)")
    return alpha


def perturb_model(model: PomdpModel, alpha: float, seed=None) -> PomdpModel:
    """Random alpha-approximation of ``model``: only transition rows move.

    Each row moves toward a uniformly drawn point of the simplex, so it stays
    stochastic; the step is scaled so the largest entry change is a uniform
    draw from (0, alpha].
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if alpha == 0:
        return model.replace()
    rng = np.random.default_rng(seed)
    T = np.array(model.transition, dtype=float)
    na, n, _ = T.shape
    for a in range(na):
        for s in range(n):
            row = T[a, s]
            direction = rng.dirichlet(np.ones(n)) - row
            size = np.max(np.abs(direction))
            target = alpha * (1.0 - rng.random())
            if size == 0.0:
                continue
            t = min(1.0, target / size)
            for _ in range(60):
                new = np.clip(row + t * direction, 0.0, 1.0)
                if np.max(np.abs(new - row)) <= alpha:
                    break
                t *= 0.5
            else:
                continue
            T[a, s] = new
    return model.replace(transition=T)


@dataclass(frozen=True)
class BoundsConfig:
    epsilon: float = 0.5
    horizon: int = 3
    trials: int = 100
    seed: int = 0
    num_states: int = 3
    num_actions: int = 2
    num_observations: int = 2
    r_max: float = 1.0
    theorem: int = 1
    random_policies: int = 10
    alpha_override: float | None = None
    enum_cross_check: int = 0  # number of leading trials also solved by exhaustive search

    def alpha(self) -> float:
        if self.alpha_override is not None:
            return self.alpha_override
        return alpha_for_epsilon(self.epsilon, self.horizon, self.num_states, self.r_max, self.theorem)


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    alpha_used: float
    alpha_realized: float
    value_true_policy: float
    value_learned_policy: float
    gap: float
    policies_checked: int


@dataclass(frozen=True)
class BoundReport:
    theorem: int
    epsilon: float
    records: tuple[TrialRecord, ...]
    max_gap: float
    pass_: bool
    order_violations: int = 0
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        """Gap bound holds and (theorem 2) the learned policy never beats the optimal one."""
        return self.pass_ and self.order_violations == 0

    @property
    def slack_ratio(self) -> float:
        return math.inf if self.max_gap == 0 else self.epsilon / self.max_gap

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "epsilon": self.epsilon,
            "max_gap": self.max_gap,
            "slack_ratio": None if math.isinf(self.slack_ratio) else self.slack_ratio,
            "pass": self.pass_,
            "ok": self.ok,
            "order_violations": self.order_violations,
            "config": self.config,
            "records": [asdict(r) for r in self.records],
        }


def _trial_models(cfg: BoundsConfig, trial: int):
    model_seed, perturb_seed, policy_seed = np.random.SeedSequence([cfg.seed, trial]).spawn(3)
    M = random_pomdp(cfg.num_states, cfg.num_actions, cfg.num_observations, cfg.r_max, model_seed)
    alpha = cfg.alpha()
    M_bar = perturb_model(M, alpha, perturb_seed)
    return M, M_bar, alpha, np.random.default_rng(policy_seed)


def verify_theorem1(cfg: BoundsConfig) -> BoundReport:
    """Check |V^f_M - V^f_Mbar| <= eps for f in {optimal on Mbar, optimal on M, random trees}."""
    H = cfg.horizon
    records = []
    for trial in range(cfg.trials):
        M, M_bar, alpha, rng = _trial_models(cfg, trial)
        f, _ = solve_optimal_dp(M_bar, H)
        g, _ = solve_optimal_dp(M, H)
        policies = [f, g] + [random_policy(M, H, rng) for _ in range(cfg.random_policies)]
        gaps = []
        for pol in policies:
            v_true = evaluate_policy_exact(M, pol, H).value
            v_approx = evaluate_policy_exact(M_bar, pol, H).value
            gaps.append(abs(v_true - v_approx))
        v_f_true = evaluate_policy_exact(M, f, H).value
        v_f_bar = evaluate_policy_exact(M_bar, f, H).value
        records.append(TrialRecord(trial, alpha, alpha_distance(M, M_bar), v_f_true, v_f_bar,
                                   max(gaps), len(policies)))
    max_gap = max((r.gap for r in records), default=0.0)
    return BoundReport(1, cfg.epsilon, tuple(records), max_gap, max_gap <= cfg.epsilon,
                       config=asdict(cfg))


def verify_theorem2(cfg: BoundsConfig) -> BoundReport:
    """Check 0 <= V^g_M - V^f_M <= eps with f optimal on Mbar and g optimal on M."""
    H = cfg.horizon
    records = []
    order_violations = 0
    for trial in range(cfg.trials):
        M, M_bar, alpha, _ = _trial_models(cfg, trial)
        f, v_f_bar = solve_optimal_dp(M_bar, H)
        g, v_g = solve_optimal_dp(M, H)
        if trial < cfg.enum_cross_check:
            for model, v in ((M_bar, v_f_bar), (M, v_g)):
                _, v_enum = solve_optimal_enum(model, H)
                if abs(v_enum - v) > VALUE_TOL:
                    raise AssertionError(f"trial {trial}: dp value {v} != enumeration value {v_enum}")
        v_g_true = evaluate_policy_exact(M, g, H).value
        v_f_true = evaluate_policy_exact(M, f, H).value
        if v_f_true > v_g_true + VALUE_TOL:
            order_violations += 1
        records.append(TrialRecord(trial, alpha, alpha_distance(M, M_bar), v_g_true, v_f_true,
                                   abs(v_g_true - v_f_true), 2))
    max_gap = max((r.gap for r in records), default=0.0)
    return BoundReport(2, cfg.epsilon, tuple(records), max_gap, max_gap <= cfg.epsilon, order_violations,
                       config=asdict(cfg))


def verify(cfg: BoundsConfig) -> BoundReport:
    return verify_theorem1(cfg) if cfg.theorem == 1 else verify_theorem2(cfg)
