import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from pomdp_learn.core import GaussianEmission, TimeSeries
from pomdp_learn.obsfn import (ObservationMatrix, discretize_series, estimate_observation_matrix,
                               gaussian_loglik, lift_to_product, ml_decide)

PHI1 = norm.cdf(1.0)
PAIR = [GaussianEmission([0.0], [[1.0]]), GaussianEmission([2.0], [[1.0]])]


def test_own_mean_wins():
    em = [GaussianEmission(m, np.eye(2)) for m in ([0, 0], [3, 0], [0, 3])]
    for i, e in enumerate(em):
        assert ml_decide(e.mean, em) == i


def test_boundary_and_tie():
    assert ml_decide([0.9], PAIR) == 0
    assert ml_decide([1.1], PAIR) == 1
    assert ml_decide([1.0], PAIR) == 0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ml_decide([0.0, 1.0], PAIR)


def test_rejects_ar_emissions():
    with pytest.raises(ValueError, match="static"):
        ml_decide([0.0], [GaussianEmission([0.0], [[1.0]], ([[0.5]],))])


def test_loglik_matches_scipy():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    e = GaussianEmission(rng.normal(size=3), A @ A.T + np.eye(3))
    y = rng.normal(size=(5, 3))
    from scipy.stats import multivariate_normal
    assert np.allclose(gaussian_loglik(y, [e])[:, 0], multivariate_normal(e.mean, e.covariance).logpdf(y))


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0.1, 5), st.floats(-20, 20))
def test_translation_and_scale_move_boundary(shift, scale, y):
    em = [GaussianEmission([shift], [[scale]]), GaussianEmission([shift + 2.0], [[scale]])]
    mid = shift + 1.0
    if abs(y - mid) > 1e-9:
        assert ml_decide([y], em) == (0 if y < mid else 1)


def test_discretize():
    em = [GaussianEmission(m, np.eye(2)) for m in ([0, 0], [4, 0], [0, 4])]
    series = TimeSeries(np.array([e.mean for e in em]))
    assert discretize_series(series, em).tolist() == [0, 1, 2]
    y = np.random.default_rng(1).normal(scale=3, size=(40, 2))
    assert discretize_series(y, em).tolist() == [ml_decide(r, em) for r in y]
    assert discretize_series(np.zeros((0, 2)), em).tolist() == []


def test_single_state():
    obs = estimate_observation_matrix([GaussianEmission([1.0, 2.0], np.eye(2))], 1000, seed=0)
    assert obs.probs.tolist() == [[1.0]]


def test_one_dimensional_oracle():
    obs = estimate_observation_matrix(PAIR, 10**6, seed=0)
    truth = np.array([[PHI1, 1 - PHI1], [1 - PHI1, PHI1]])
    assert np.all(np.abs(obs.probs - truth) <= 3 * obs.std_err)
    assert np.allclose(obs.std_err, np.sqrt(obs.probs * (1 - obs.probs) / 10**6))
    assert np.all(np.abs(obs.probs.sum(axis=1) - 1) <= 1e-9)


def test_deterministic_and_row_streams():
    a = estimate_observation_matrix(PAIR, 5000, seed=3)
    b = estimate_observation_matrix(PAIR, 5000, seed=3)
    assert np.array_equal(a.probs, b.probs)
    # row 0 does not depend on what the other rows are
    c = estimate_observation_matrix([PAIR[0], GaussianEmission([2.0], [[1.0]])], 5000, seed=3)
    assert np.array_equal(a.probs[0], c.probs[0])


def test_json_round_trip():
    a = estimate_observation_matrix(PAIR, 100, seed=1)
    b = ObservationMatrix.from_dict(a.to_dict())
    assert np.array_equal(a.probs, b.probs) and b.n_mc == 100 and b.seed == 1


def test_convergence_rate():
    def rms(n):
        errs = [estimate_observation_matrix(PAIR, n, seed=s).probs[0, 0] - PHI1 for s in range(50)]
        return np.sqrt(np.mean(np.square(errs)))
    ratio = rms(20000) / rms(40000)
    assert 1.25 <= ratio <= 1.6


def test_diagonal_dominance():
    em = [GaussianEmission(m, np.eye(2)) for m in ([0, 0], [11, 0], [0, 11], [11, 11])]
    obs = estimate_observation_matrix(em, 200_000, seed=0)
    off = obs.probs.sum(axis=1) - np.diag(obs.probs)
    assert np.all(off < 1e-6)


def test_six_state_matrix_valid():
    rng = np.random.default_rng(4)
    em = [GaussianEmission(rng.normal(scale=2, size=3), np.eye(3)) for _ in range(6)]
    obs = estimate_observation_matrix(em, 20000, seed=0)
    assert obs.probs.shape == (6, 6)
    assert np.all((obs.probs >= 0) & (obs.probs <= 1))
    assert np.all(np.abs(obs.probs.sum(axis=1) - 1) <= 1e-9)


def test_lift_to_product():
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    L = lift_to_product(P, 3)
    assert L.shape == (6, 6)
    assert L[0 * 3 + 1, 1 * 3 + 1] == 0.1
    assert L[0 * 3 + 1, 1 * 3 + 2] == 0.0
    assert np.allclose(L.sum(axis=1), 1)
