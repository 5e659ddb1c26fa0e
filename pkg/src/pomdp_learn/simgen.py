"""Synthetic ground truth: random POMDPs, Gaussian-emission trajectories, policy rollouts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import (GaussianEmission, PolicyTree, PomdpModel, TimeSeries, check_model,
                   histories, model_from_dict, model_to_dict)


def random_pomdp(num_states: int, num_actions: int, num_obs: int, r_max: float = 1.0,
                 seed=None) -> PomdpModel:
    """Transition and observation rows ~ Dirichlet(1), rewards ~ U[0, r_max], uniform b0."""
    if min(num_states, num_actions, num_obs) < 1:
        raise ValueError("sizes must be at least 1")
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.ones(num_states), size=(num_actions, num_states))
    E = rng.dirichlet(np.ones(num_obs), size=num_states)
    R = rng.uniform(0.0, r_max, size=(num_states, num_actions))
    return PomdpModel(
        states=[f"s{i}" for i in range(num_states)],
        actions=[f"a{i}" for i in range(num_actions)],
        observations=[f"o{i}" for i in range(num_obs)],
        transition=T,
        observation_fn=E,
        reward=R,
        r_max=r_max,
        initial_belief=np.full(num_states, 1.0 / num_states),
    )


@dataclass(frozen=True, eq=False)
class GroundTruthScenario:
    """A POMDP over human states plus the Gaussian emission of each state."""

    pomdp: PomdpModel
    emissions: tuple[GaussianEmission, ...]
    logging_policy: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "emissions", tuple(self.emissions))
        check_model(self.pomdp)
        if len(self.emissions) != self.pomdp.num_states:
            raise ValueError(f"{len(self.emissions)} emissions for {self.pomdp.num_states} states")
        if self.logging_policy != "uniform":
            raise ValueError(f"unsupported logging policy {self.logging_policy!r}")
        if len({e.dim for e in self.emissions}) != 1:
            raise ValueError("emissions must share one dimension")

    def to_dict(self) -> dict:
        return {"pomdp": model_to_dict(self.pomdp),
                "emissions": [e.to_dict() for e in self.emissions],
                "logging_policy": self.logging_policy}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthScenario":
        return cls(model_from_dict(d["pomdp"]),
                   tuple(GaussianEmission.from_dict(e) for e in d["emissions"]),
                   d.get("logging_policy", "uniform"))


def load_scenario(path=None) -> GroundTruthScenario:
    """Load a scenario JSON; with no path, the bundled three-state driver-like benchmark."""
    if path is None:
        text = resources.files("pomdp_learn").joinpath("data/driver_scenario.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return GroundTruthScenario.from_dict(json.loads(text))


def simulate_continuous(scenario: GroundTruthScenario, num_sequences: int, length: int,
                        seed=None) -> list[TimeSeries]:
    """Roll the hidden chain forward under uniform-random actions and emit Gaussian vectors."""
    if length < 1:
        raise ValueError("length must be at least 1")
    m = scenario.pomdp
    seeds = np.random.SeedSequence(seed).spawn(num_sequences)
    chol = [np.linalg.cholesky(e.covariance) for e in scenario.emissions]
    out = []
    for k in range(num_sequences):
        rng = np.random.default_rng(seeds[k])
        z = np.empty(length, dtype=np.int64)
        z[0] = rng.choice(m.num_states, p=m.initial_belief)
        acts = rng.integers(m.num_actions, size=length - 1)
        u = rng.random(length - 1)
        cum = np.cumsum(m.transition, axis=2)
        for t in range(length - 1):
            row = cum[acts[t], z[t]]
            z[t + 1] = min(int(np.searchsorted(row, u[t] * row[-1], side="right")), m.num_states - 1)
        noise = rng.standard_normal((length, scenario.emissions[0].dim))
        y = np.empty_like(noise)
        for t in range(length):
            e = scenario.emissions[z[t]]
            y[t] = e.mean + chol[z[t]] @ noise[t]
            for j, A in enumerate(e.ar_coeffs, start=1):
                if t - j >= 0:
                    y[t] += A @ y[t - j]
        out.append(TimeSeries(y, actions=[m.actions[a] for a in acts], latent_states=z, id=str(k)))
    return out


def _sample_rows(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cum: (episodes, K) cumulative rows; returns first index with cum > u
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def simulate_discrete(model: PomdpModel, policy: PolicyTree, H: int, episodes: int,
                      seed=None) -> tuple[float, float]:
    """Monte Carlo estimate of the H-step return: (mean, standard error)."""
    if policy.horizon != H:
        raise ValueError(f"policy depth {policy.horizon} != horizon {H}")
    rng = np.random.default_rng(seed)
    no, na = model.num_observations, model.num_actions
    # action tables indexed by the base-|O| code of the history
    tables = []
    for t in range(1, H + 1):
        tab = np.zeros(no**t, dtype=np.int64)
        for h in histories(no, t)[-no**t:]:
            code = 0
            for o in h:
                code = code * no + o
            tab[code] = policy.actions[h]
        tables.append(tab)
    cumE = np.cumsum(model.observation_fn, axis=1)
    cumT = np.cumsum(model.transition, axis=2)
    s = _sample_rows(np.broadcast_to(np.cumsum(model.initial_belief), (episodes, model.num_states)),
                     rng.random(episodes))
    code = np.zeros(episodes, dtype=np.int64)
    ret = np.zeros(episodes)
    for t in range(H):
        o = _sample_rows(cumE[s], rng.random(episodes))
        code = code * no + o
        a = tables[t][code]
        ret += model.reward[s, a]
        if t + 1 < H:
            s = _sample_rows(cumT[a, s], rng.random(episodes))
    mean = float(ret.mean())
    se = float(ret.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return mean, se


def marginal_state_distribution(model: PomdpModel, steps: int) -> np.ndarray:
    """P(s_t) for t = 0..steps-1 under the uniform-random logging policy."""
    P = model.transition.mean(axis=0)
    out = np.empty((steps, model.num_states))
    b = np.asarray(model.initial_belief, dtype=float)
    for t in range(steps):
        out[t] = b
        b = b @ P
    return out
