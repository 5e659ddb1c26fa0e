"""Finite-horizon policy evaluation and optimal planning over observation-history trees.

Step semantics, for t = 1..H: the system occupies s_t, emits o_t ~ E(.|s_t),
the policy picks a_t from (o_1..o_t), reward R(s_t, a_t) accrues, and
s_{t+1} ~ T(.|s_t, a_t).  Exactly H rewards accrue.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import PolicyTree, PomdpModel, histories, num_decision_nodes

VALUE_TOL = 1e-9
DEFAULT_SEQUENCE_CAP = 10**7
DEFAULT_TREE_CAP = 10**6
DEFAULT_DP_CAP = 10**7


class CapExceeded(RuntimeError):
    pass


class ImpossibleObservation(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationResult:
    value: float
    num_sequences: int
    horizon: int


def _state_sequences(n: int, H: int) -> np.ndarray:
    return np.array(list(itertools.product(range(n), repeat=H)), dtype=np.int64).reshape(-1, H)


def _check_policy(model: PomdpModel, policy: PolicyTree, H: int):
    if policy.horizon != H:
        raise ValueError(f"policy depth {policy.horizon} != horizon {H}")
    if policy.num_observations != model.num_observations:
        raise ValueError("policy branching does not match the observation count")
    bad = [a for a in policy.actions.values() if not 0 <= a < model.num_actions]
    if bad:
        raise ValueError(f"policy uses unknown action index {bad[0]}")


def evaluate_policy_exact(model: PomdpModel, policy: PolicyTree, H: int,
                          cap: int = DEFAULT_SEQUENCE_CAP) -> EvaluationResult:
    """V = sum over state-observation sequences rho of p(rho) * R_c(rho), enumerated explicitly."""
    _check_policy(model, policy, H)
    n, no = model.num_states, model.num_observations
    num_seq = (n * no) ** H
    if num_seq > cap:
        raise CapExceeded(f"{num_seq} state-observation sequences exceed the cap of {cap}; "
                          "use simgen.simulate_discrete for a Monte Carlo estimate")
    S = _state_sequences(n, H)
    T, E, R, b0 = model.transition, model.observation_fn, model.reward, model.initial_belief
    value = 0.0
    mass = 0.0
    for obs in itertools.product(range(no), repeat=H):
        acts = [policy.actions[obs[: t + 1]] for t in range(H)]
        p = b0[S[:, 0]].copy()
        ret = np.zeros(len(S))
        for t in range(H):
            p *= E[S[:, t], obs[t]]
            ret += R[S[:, t], acts[t]]
            if t + 1 < H:
                p *= T[acts[t], S[:, t], S[:, t + 1]]
        value += float(p @ ret)
        mass += float(p.sum())
    if abs(mass - 1.0) > VALUE_TOL:
        raise AssertionError(f"sequence probabilities sum to {mass!r}")
    return EvaluationResult(value, num_seq, H)


def _value_table(model: PomdpModel, H: int) -> np.ndarray:
    """table[o, a] = sum_s p(s, o | a) R_c(s, a) over observation sequences o and action sequences a."""
    n, na, no = model.num_states, model.num_actions, model.num_observations
    S = _state_sequences(n, H)
    Obs = _state_sequences(no, H)
    T, E, R, b0 = model.transition, model.observation_fn, model.reward, model.initial_belief
    emit = np.ones((len(S), len(Obs)))
    for t in range(H):
        emit *= E[S[:, t]][:, Obs[:, t]]
    table = np.empty((len(Obs), na**H))
    for k, acts in enumerate(itertools.product(range(na), repeat=H)):
        p = b0[S[:, 0]].copy()
        ret = np.zeros(len(S))
        for t in range(H):
            ret += R[S[:, t], acts[t]]
            if t + 1 < H:
                p *= T[acts[t], S[:, t], S[:, t + 1]]
        table[:, k] = (p * ret) @ emit
    return table


def solve_optimal_enum(model: PomdpModel, H: int, cap: int = DEFAULT_TREE_CAP,
                       sequence_cap: int = DEFAULT_SEQUENCE_CAP) -> tuple[PolicyTree, float]:
    """Exhaustive search over every depth-H policy tree.

    Ties within 1e-9 go to the first tree in lexicographic order of the
    action assignments (histories ordered shortest first).
    """
    na, no = model.num_actions, model.num_observations
    nodes = histories(no, H)
    ntrees = na ** len(nodes)
    if ntrees > cap:
        raise CapExceeded(f"{ntrees} policy trees exceed the cap of {cap}")
    if (model.num_states * no) ** H > sequence_cap:
        raise CapExceeded("state-observation sequence count exceeds the cap")
    node_index = {h: i for i, h in enumerate(nodes)}
    table = _value_table(model, H)
    k = np.arange(ntrees, dtype=np.int64)
    powers = na ** np.arange(len(nodes) - 1, -1, -1, dtype=np.int64)
    trees = (k[:, None] // powers[None, :]) % na
    values = np.zeros(ntrees)
    for oi, obs in enumerate(itertools.product(range(no), repeat=H)):
        aseq = np.zeros(ntrees, dtype=np.int64)
        for t in range(H):
            aseq = aseq * na + trees[:, node_index[obs[: t + 1]]]
        values += table[oi, aseq]
    best = int(np.flatnonzero(values >= values.max() - VALUE_TOL)[0])
    policy = PolicyTree(H, no, {h: int(trees[best, i]) for i, h in enumerate(nodes)})
    return policy, evaluate_policy_exact(model, policy, H, cap=sequence_cap).value


def condition_on_observation(belief, observation: int, model: PomdpModel) -> np.ndarray:
    """Posterior over the current state after seeing ``observation`` emitted from it."""
    w = np.asarray(belief, dtype=float) * model.observation_fn[:, observation]
    total = w.sum()
    if total <= 0:
        raise ImpossibleObservation(f"observation {model.observations[observation]!r} has zero probability")
    return w / total


def belief_update(belief, action: int, observation: int, model: PomdpModel) -> np.ndarray:
    """b'(s') proportional to E(o|s') * sum_s T(s'|s,a) b(s)."""
    predicted = np.asarray(belief, dtype=float) @ model.transition[action]
    return condition_on_observation(predicted, observation, model)


def solve_optimal_dp(model: PomdpModel, H: int, cap: int = DEFAULT_DP_CAP) -> tuple[PolicyTree, float]:
    """Backward induction over observation histories with belief updates.

    Zero-probability observation branches get action 0 throughout their subtree.
    """
    na, no = model.num_actions, model.num_observations
    work = (na * no) ** H
    if work > cap:
        raise CapExceeded(f"{work} history-action nodes exceed the cap of {cap}")
    R, T, E = model.reward, model.transition, model.observation_fn

    def fill_default(h, out):
        for rest in range(H - len(h)):
            for tail in itertools.product(range(no), repeat=rest + 1):
                out[h + tail] = 0

    def solve(predicted, h):
        # predicted: belief over s_t given o_1..o_{t-1} and the actions taken
        value = 0.0
        chosen = {}
        for o in range(no):
            p_o = float(predicted @ E[:, o])
            hh = h + (o,)
            if p_o <= 0.0:
                chosen[hh] = 0
                fill_default(hh, chosen)
                continue
            post = predicted * E[:, o] / p_o
            best_q, best_a, best_sub = None, None, None
            for a in range(na):
                q = float(post @ R[:, a])
                sub = {}
                if len(hh) < H:
                    v_next, sub = solve(post @ T[a], hh)
                    q += v_next
                if best_q is None or q > best_q + VALUE_TOL:
                    best_q, best_a, best_sub = q, a, sub
            chosen[hh] = best_a
            chosen.update(best_sub)
            value += p_o * best_q
        return value, chosen

    value, acts = solve(np.asarray(model.initial_belief, dtype=float), ())
    return PolicyTree(H, no, acts), value


def random_policy(model: PomdpModel, H: int, rng: np.random.Generator) -> PolicyTree:
    nodes = histories(model.num_observations, H)
    draws = rng.integers(model.num_actions, size=len(nodes))
    return PolicyTree(H, model.num_observations, {h: int(a) for h, a in zip(nodes, draws)})


def num_policy_trees(model: PomdpModel, H: int) -> int:
    return model.num_actions ** num_decision_nodes(model.num_observations, H)
