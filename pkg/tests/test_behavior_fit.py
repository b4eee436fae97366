import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confound_ope.behavior_fit import (EmptyDataset, apply_floor, first_and_rest_blocks,
                                       fit_history_tabular,
                                       fit_logistic, fit_logistic_step, fit_multinomial,
                                       fit_tabular, load_policy, policy_from_json, save_policy,
                                       split_fit, split_indices)
from confound_ope.core import Dataset

from conftest import toy_dataset


@settings(max_examples=100, deadline=None)
@given(arrays(float, (4, 3), elements=st.floats(0, 1)), st.floats(1e-6, 0.2))
def test_floor_gives_valid_rows(raw, p_min):
    raw = raw + 1e-9
    probs = raw / raw.sum(axis=1, keepdims=True)
    out = apply_floor(probs, p_min)
    assert np.allclose(out.sum(axis=1), 1.0)
    assert (out >= p_min - 1e-12).all()
    untouched = (probs >= p_min).all(axis=1)
    assert np.array_equal(out[untouched], probs[untouched])


def test_floor_infeasible():
    with pytest.raises(ValueError):
        apply_floor(np.full((1, 4), 0.25), 0.3)


def test_tabular_matches_counts():
    d = toy_dataset(2000, seed=1, n_states=3, n_actions=2)
    beh = fit_tabular(d, p_min=0.0)
    for t in range(d.horizon):
        for s in range(3):
            rows = d.states[t] == s
            freq = np.bincount(d.actions[rows, t], minlength=2) / rows.sum()
            assert np.allclose(beh.table(t)[s], freq)


def test_tabular_smoothing_and_unseen_states():
    d = Dataset((np.array([0, 0, 0]),), [[1], [1], [1]], np.zeros((3, 1)), 1.0, (2,))
    beh = fit_tabular(d, alpha=1.0, n_states=2, p_min=0.0)
    assert np.allclose(beh.table(0)[0], [0.2, 0.8])
    assert np.allclose(beh.table(0)[1], [0.5, 0.5])


def test_tabular_pooled_blocks():
    d = toy_dataset(500, seed=2, horizon=3)
    beh = fit_tabular(d, first_and_rest_blocks(3))
    assert np.array_equal(beh.table(1), beh.table(2))
    with pytest.raises(ValueError):
        fit_tabular(d, ((0,), (2,)))


def test_empty_dataset():
    d = toy_dataset(5).subset(np.array([], dtype=int))
    with pytest.raises(EmptyDataset):
        fit_tabular(d)


def test_multinomial_recovers_coefficients():
    rng = np.random.default_rng(0)
    n = 60_000
    x = rng.normal(size=(n, 2))
    X = np.hstack([np.ones((n, 1)), x])
    B = np.array([[0.0, 0.5, -0.3], [0.0, 1.0, 0.0], [0.0, -0.5, 1.5]])
    logits = X @ B
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    y = (p.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    est = fit_multinomial(X, y, 3, reg=0.0)
    assert np.allclose(est, B, atol=0.06)


def test_multinomial_stationarity():
    rng = np.random.default_rng(1)
    X = np.hstack([np.ones((500, 1)), rng.normal(size=(500, 3))])
    y = rng.integers(0, 3, 500)
    B = fit_multinomial(X, y, 3, reg=1e-2)
    logits = X @ B
    P = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    Y = np.eye(3)[y]
    grad = X.T @ (P - Y) / 500
    grad[1:] += 1e-2 * B[1:]
    assert np.abs(grad[:, 1:]).max() < 1e-7


def test_intercept_only_model_gives_frequencies():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 1000)
    B = fit_multinomial(np.ones((1000, 1)), y, 3)
    p = np.exp(B[0]) / np.exp(B[0]).sum()
    assert np.allclose(p, np.bincount(y, minlength=3) / 1000, atol=1e-8)


def _continuous_data(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    s1 = rng.normal(size=(n, 2))
    p1 = 1 / (1 + np.exp(-(0.5 + s1[:, 0])))
    a1 = (rng.random(n) < p1).astype(int)
    group = rng.integers(0, 2, n).astype(float)
    s2 = np.column_stack([rng.normal(size=n), group])
    a2 = np.where(group == 1, rng.integers(0, 3, n), 1)
    return Dataset((s1, s2), np.column_stack([a1, a2]), rng.normal(size=(n, 2)), 1.0, (2, 3))


def test_logistic_strata_and_deterministic_groups():
    d = _continuous_data()
    beh = fit_logistic(d, group_columns=[None, 1])
    p2 = beh.action_probs(d, 1)
    fixed = d.states[1][:, 1] == 0
    assert np.allclose(p2[fixed, 1], 1 - 2e-4)
    assert np.allclose(p2.sum(axis=1), 1.0)
    p1 = beh.action_probs(d, 0)[:, 1]
    assert np.corrcoef(p1, d.states[0][:, 0])[0, 1] > 0.9


def test_logistic_json_round_trip(tmp_path):
    d = _continuous_data(seed=3)
    beh = fit_logistic(d, group_columns=[None, 1])
    path = tmp_path / "beh.json"
    save_policy(beh, path)
    back = load_policy(path)
    for t in range(2):
        assert np.allclose(back.action_probs(d, t), beh.action_probs(d, t))


def test_tabular_json_round_trip():
    d = toy_dataset(300)
    beh = fit_tabular(d)
    back = policy_from_json(beh.to_json())
    assert np.array_equal(back.action_probs(d, 1), beh.action_probs(d, 1))
    with pytest.raises(ValueError):
        policy_from_json({"kind": "mystery"})


def test_logistic_step_single_class():
    d = _continuous_data()
    d1 = Dataset(d.states, np.column_stack([np.zeros(d.n, int), d.actions[:, 1]]),
                 d.rewards, 1.0, (2, 3))
    step = fit_logistic_step(d1, 0)
    assert np.allclose(step.predict(d1.states[0])[:, 0], 1 - 1e-4)


def test_split_is_deterministic_and_disjoint():
    a, b = split_indices(101, 0.3, 7)
    a2, _ = split_indices(101, 0.3, 7)
    assert np.array_equal(a, a2)
    assert len(a) == 30 and not set(a) & set(b) and len(a) + len(b) == 101
    with pytest.raises(ValueError):
        split_indices(10, 1.0, 0)
    pol, held = split_fit(toy_dataset(100), fit_tabular, 0.5, 1)
    assert held.n == 50


def test_history_behavior_frequencies_and_round_trip():
    d = toy_dataset(3000, seed=5)
    beh = fit_history_tabular(d, p_min=0.0)
    rows = (d.states[0] == 1) & (d.actions[:, 0] == 0) & (d.states[1] == 2)
    freq = np.bincount(d.actions[rows, 1], minlength=2) / rows.sum()
    assert np.allclose(beh.action_probs(d, 1)[rows][0], freq)
    back = policy_from_json(beh.to_json())
    assert np.array_equal(back.action_probs(d, 1), beh.action_probs(d, 1))
