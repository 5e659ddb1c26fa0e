import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomdp_learn.bounds import (BoundsConfig, alpha_for_epsilon, perturb_model, verify,
                                verify_theorem1, verify_theorem2)
from pomdp_learn.core import alpha_distance, validate_model
from pomdp_learn.simgen import random_pomdp
from conftest import tiny_model


def test_alpha_for_epsilon_examples():
    assert alpha_for_epsilon(0.5, 3, 3, 1.0) == pytest.approx(0.5 / 27)
    assert alpha_for_epsilon(0.5, 3, 3, 1.0, theorem=2) == pytest.approx(0.5 / 54)
    assert alpha_for_epsilon(0.5, 3, 3, 1.0, theorem=2) == pytest.approx(0.009259, abs=1e-6)
    with pytest.raises(ValueError):
        alpha_for_epsilon(1, 1, 1, 1)
    with pytest.raises(ValueError):
        alpha_for_epsilon(0.5, 3, 3, 1.0, theorem=3)


def test_perturbation_sweep():
    M = random_pomdp(4, 2, 3, seed=1)
    for seed in range(1000):
        Mb = perturb_model(M, 0.05, seed)
        d = alpha_distance(M, Mb)
        assert 0 < d <= 0.05
        assert validate_model(Mb) == []
        assert np.array_equal(Mb.observation_fn, M.observation_fn)
        assert np.array_equal(Mb.reward, M.reward)
        assert np.array_equal(Mb.initial_belief, M.initial_belief)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-9, 0.5), st.integers(0, 10_000))
def test_perturbation_property(alpha, seed):
    M = random_pomdp(3, 2, 2, seed=seed)
    Mb = perturb_model(M, alpha, seed + 1)
    assert alpha_distance(M, Mb) <= alpha
    assert validate_model(Mb) == []


def test_deterministic_rows_stay_feasible():
    m = tiny_model(transition=[[[1, 0], [0, 1]], [[1, 0], [1, 0]]])
    for seed in range(50):
        Mb = perturb_model(m, 0.2, seed)
        assert np.all((Mb.transition >= 0) & (Mb.transition <= 1))
        assert np.allclose(Mb.transition.sum(axis=2), 1)
        assert alpha_distance(m, Mb) <= 0.2


def test_tiny_alpha():
    M = random_pomdp(3, 2, 2, seed=0)
    assert alpha_distance(M, perturb_model(M, 1e-12, 1)) <= 1e-12


def test_zero_alpha_gives_zero_gaps():
    for th in (1, 2):
        rep = verify(BoundsConfig(theorem=th, trials=10, alpha_override=0.0))
        assert rep.max_gap == pytest.approx(0.0, abs=1e-12) and rep.pass_ and rep.ok


def test_single_action_theorem2_gap_zero():
    cfg = BoundsConfig(theorem=2, trials=10, num_actions=1)
    rep = verify_theorem2(cfg)
    assert rep.max_gap == pytest.approx(0.0, abs=1e-12)


def test_large_slack_with_tiny_alpha():
    rep = verify_theorem1(BoundsConfig(epsilon=0.9, trials=10, alpha_override=1e-6))
    assert rep.pass_ and rep.slack_ratio >= 1


def test_report_deterministic_and_records():
    cfg = BoundsConfig(theorem=2, trials=15, seed=7, enum_cross_check=3)
    a, b = verify(cfg).to_dict(), verify(cfg).to_dict()
    assert a == b
    assert len(a["records"]) == 15
    assert a["pass"] == (a["max_gap"] <= a["epsilon"])
    assert all(r["alpha_realized"] <= r["alpha_used"] for r in a["records"])
