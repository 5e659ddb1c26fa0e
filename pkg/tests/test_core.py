import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomdp_learn.core import (GaussianEmission, ModelParseError, ModelValidationError, PolicyTree,
                              TimeSeries, alpha_distance, deserialize_model, histories,
                              is_alpha_approximation, model_to_dict, num_decision_nodes,
                              product_states, read_labels_csv, read_series_csv, serialize_model,
                              validate_belief, validate_model, write_labels_csv, write_series_csv)
from pomdp_learn.simgen import random_pomdp

from conftest import tiny_model


def test_valid_model_has_no_violations(model2):
    assert validate_model(model2) == []
    assert validate_model(random_pomdp(3, 2, 2, 1.0, seed=1)) == []


def test_short_row_reported():
    T = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.6], [0.6, 0.4]]])
    v = validate_model(tiny_model(transition=T))
    assert len(v) == 1
    assert "transition[go][0]" in v[0] and "0.9" in v[0]


def test_reward_bound_violation():
    v = validate_model(tiny_model(reward=[[2.0, 0.0], [0.0, 0.0]]))
    assert len(v) == 1 and "reward[0][0]" in v[0]


def test_negative_reward_magnitude_checked():
    v = validate_model(tiny_model(reward=[[-1.5, 0.0], [0.0, 0.0]]))
    assert len(v) == 1


def test_bad_observation_and_belief():
    v = validate_model(tiny_model(observation_fn=[[1.2, -0.2], [0.5, 0.5]], initial_belief=[0.5, 0.6]))
    assert any("observation_fn[0][0]" in x for x in v)
    assert any("observation_fn[0][1]" in x for x in v)
    assert any("initial_belief" in x for x in v)


def test_alpha_distance_shift(model2):
    T = np.array(model2.transition)
    T[1, 0] += [0.05, -0.05]
    assert alpha_distance(model2, model2) == 0.0
    assert alpha_distance(model2, model2.replace(transition=T)) == pytest.approx(0.05, abs=1e-15)
    assert alpha_distance(model2.replace(transition=T), model2) == alpha_distance(model2, model2.replace(transition=T))


def test_alpha_distance_incomparable(model2):
    E = np.array(model2.observation_fn)
    E[0] = [0.8, 0.2]
    assert alpha_distance(model2, model2.replace(observation_fn=E)) is None
    assert alpha_distance(model2, model2.replace(reward=np.zeros((2, 2)))) is None
    assert alpha_distance(model2, model2.replace(initial_belief=[0.5, 0.5])) is None
    assert alpha_distance(model2, model2.replace(states=["x", "y"])) is None


def test_is_alpha_approximation(model2):
    T = np.array(model2.transition)
    T[0, 1] = [0.25, 0.75]
    other = model2.replace(transition=T)
    assert is_alpha_approximation(other, model2, 0.051)
    assert not is_alpha_approximation(other, model2, 0.049)


@st.composite
def models(draw):
    n = draw(st.integers(1, 4))
    na = draw(st.integers(1, 3))
    no = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    r_max = draw(st.floats(0.1, 100.0))
    return random_pomdp(n, na, no, r_max, seed=seed)


@settings(max_examples=60, deadline=None)
@given(models())
def test_round_trip_identity(m):
    assert deserialize_model(serialize_model(m)) == m
    assert deserialize_model(serialize_model(m, indent=None)) == m


@settings(max_examples=40, deadline=None)
@given(models(), st.floats(0.0, 0.3))
def test_alpha_distance_symmetric_and_zero_iff_equal(m, shift):
    T = np.array(m.transition)
    n = m.num_states
    if n > 1:
        move = min(shift, T[0, 0, 0], 1 - T[0, 0, 1])
        T[0, 0, 0] -= move
        T[0, 0, 1] += move
    other = m.replace(transition=T)
    d = alpha_distance(m, other)
    assert d == alpha_distance(other, m)
    assert (d == 0) == np.array_equal(m.transition, other.transition)
    assert is_alpha_approximation(other, m, d)


def test_missing_transition_is_parse_error(model2):
    doc = model_to_dict(model2)
    del doc["transition"]
    with pytest.raises(ModelParseError) as info:
        deserialize_model(json.dumps(doc))
    assert info.value.field == "transition"


def test_malformed_json_reports_line():
    with pytest.raises(ModelParseError) as info:
        deserialize_model('{\n "states": [\n')
    assert info.value.line is not None


def test_negative_probability_lists_violations(model2):
    doc = model_to_dict(model2)
    doc["observation_fn"][1] = [-0.1, 1.1]
    with pytest.raises(ModelValidationError) as info:
        deserialize_model(json.dumps(doc))
    assert len(info.value.violations) == 2


def test_model_is_immutable(model2):
    with pytest.raises(ValueError):
        model2.transition[0, 0, 0] = 0.5


def test_product_states():
    assert product_states(["d0", "d1"], ["r"], ["e0", "e1"]) == ["d0|r|e0", "d0|r|e1", "d1|r|e0", "d1|r|e1"]


def test_gaussian_emission_checks():
    GaussianEmission([0, 0], np.eye(2))
    with pytest.raises(ValueError, match="positive definite"):
        GaussianEmission([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError, match="symmetric"):
        GaussianEmission([0, 0], [[1, 0.5], [0, 1]])
    e = GaussianEmission([1.0], [[2.0]], ar_coeffs=([[0.5]],))
    assert e.ar_order == 1
    assert GaussianEmission.from_dict(e.to_dict()).ar_coeffs[0][0, 0] == 0.5


def test_time_series_lengths():
    TimeSeries(np.zeros((3, 2)), actions=["a", "b"], latent_states=[0, 1, 1])
    with pytest.raises(ValueError):
        TimeSeries(np.zeros((3, 2)), actions=["a"])
    with pytest.raises(ValueError):
        TimeSeries(np.zeros((3, 2)), latent_states=[0, 1])


def test_series_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    series = [TimeSeries(rng.normal(size=(4, 2)), actions=["a", "b", "a"], latent_states=[0, 1, 1, 2], id="x"),
              TimeSeries(rng.normal(size=(2, 2)), actions=["b"], latent_states=[2, 2], id="y")]
    path = tmp_path / "s.csv"
    write_series_csv(series, path)
    assert path.read_text().splitlines()[0] == "seq_id,t,y1,y2,action,latent"
    back = read_series_csv(path)
    for a, b in zip(series, back):
        assert a.id == b.id and a.actions == b.actions
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.latent_states, b.latent_states)


def test_series_csv_rejects_gaps(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("seq_id,t,y1\n0,0,1.0\n0,2,1.0\n")
    with pytest.raises(ModelParseError) as info:
        read_series_csv(path)
    assert info.value.line == 3


def test_labels_csv_round_trip(tmp_path):
    path = tmp_path / "l.csv"
    write_labels_csv([("0", [0, 0, 1], ["a", "b"]), ("1", [2], [])], path)
    rows = read_labels_csv(path)
    assert rows[0][0] == "0" and rows[0][1].tolist() == [0, 0, 1] and rows[0][2] == ("a", "b")
    assert rows[1][1].tolist() == [2] and rows[1][2] == ()


def test_belief_validation():
    assert validate_belief([0.25, 0.75]) == []
    assert validate_belief([0.5, 0.6])
    assert validate_belief([-0.5, 1.5])


def test_policy_tree_shape_and_json():
    assert num_decision_nodes(2, 3) == 14
    assert num_decision_nodes(1, 4) == 4
    assert histories(2, 2) == [(0,), (1,), (0, 0), (0, 1), (1, 0), (1, 1)]
    tree = PolicyTree(2, 2, {h: i % 2 for i, h in enumerate(histories(2, 2))})
    doc = tree.to_dict()
    assert doc["root"]["action"] is None
    assert set(doc["root"]["children"]) == {"0", "1"}
    assert "children" not in doc["root"]["children"]["1"]["children"]["0"]
    assert PolicyTree.from_dict(json.loads(json.dumps(doc))) == tree
    with pytest.raises(ValueError):
        PolicyTree(2, 2, {(0,): 0})


def test_policy_tree_named_json(model2):
    tree = PolicyTree.constant(2, 2, action=1)
    doc = tree.to_dict(model2)
    assert doc["root"]["children"]["o0"]["action"] == "go"
    assert PolicyTree.from_dict(doc, model2) == tree
