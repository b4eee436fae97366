import itertools

import numpy as np
import pytest

from confound_ope.tabular_mdp import (TabularMDP, TabularPolicy, deterministic_policy, evaluate,
                                      exact_policy_value, inverse_transform_step, order_successors,
                                      policy_iteration, rollout, sample_actions, soften,
                                      value_iteration)

from conftest import random_mdp, random_policy


def brute_force_value(mdp, policy):
    """Enumerate every trajectory of a tiny MDP."""
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    for s, a, k in itertools.product(range(S), range(A), range(mdp.successors.shape[2])):
        if mdp.probs[s, a, k] > 0:
            P[s, a, mdp.successors[s, a, k]] += mdp.probs[s, a, k]
            R[s, a, mdp.successors[s, a, k]] = mdp.rewards[s, a, k]
    total = 0.0
    for path in itertools.product(range(S), repeat=T + 1):
        for acts in itertools.product(range(A), repeat=T):
            p = mdp.initial_distribution[path[0]]
            ret = 0.0
            for t in range(T):
                p *= policy.table(t)[path[t], acts[t]] * P[path[t], acts[t], path[t + 1]]
                ret += mdp.discount ** t * R[path[t], acts[t], path[t + 1]]
            total += p * ret
    return total


def test_validation_rejects_bad_rows():
    P = np.full((2, 1, 2), 0.4)
    with pytest.raises(ValueError):
        TabularMDP.from_dense(P, np.zeros_like(P), [0.5, 0.5])


def test_exact_value_matches_enumeration():
    mdp = random_mdp(0, n_states=3, n_actions=2, horizon=3)
    pol = random_policy(1, 3, 2, horizon=3)
    assert exact_policy_value(mdp, pol) == pytest.approx(brute_force_value(mdp, pol), abs=1e-12)


def test_value_iteration_dominates_every_deterministic_policy():
    mdp = random_mdp(2, n_states=3, n_actions=2, horizon=2)
    V, greedy = value_iteration(mdp)
    best = V[0] @ mdp.initial_distribution
    for choice in itertools.product(range(2), repeat=6):
        pol = deterministic_policy(np.array(choice).reshape(2, 3), 2)
        assert exact_policy_value(mdp, pol) <= best + 1e-12
    assert exact_policy_value(mdp, greedy) == pytest.approx(best)


def test_policy_iteration_agrees_with_value_iteration():
    mdp = random_mdp(4, n_states=5, n_actions=3, horizon=4)
    V, _ = value_iteration(mdp)
    pol = policy_iteration(mdp)
    assert exact_policy_value(mdp, pol) == pytest.approx(V[0] @ mdp.initial_distribution)


def test_evaluate_terminal_row_is_zero():
    mdp = random_mdp(5)
    V, Q = evaluate(mdp, random_policy(0, mdp.n_states, mdp.n_actions))
    assert np.all(V[-1] == 0)
    assert Q.shape == (mdp.horizon, mdp.n_states, mdp.n_actions)


def test_soften_keeps_rows_and_mass():
    pol = deterministic_policy(np.array([0, 1, 2]), 3)
    soft = soften(pol, 0.1, keep_rows=np.array([False, False, True]))
    assert np.allclose(soft.probs.sum(axis=-1), 1.0)
    assert soft.probs[0, 0] == pytest.approx(0.9 + 0.1 / 3)
    assert np.array_equal(soft.probs[2], pol.probs[2])


def test_policy_table_validation():
    with pytest.raises(ValueError):
        TabularPolicy(np.array([[0.5, 0.6]]))


def test_json_round_trip(tmp_path):
    mdp = random_mdp(6)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    back = TabularMDP.load(path)
    pol = random_policy(2, mdp.n_states, mdp.n_actions)
    assert exact_policy_value(back, pol) == pytest.approx(exact_policy_value(mdp, pol))


def test_sample_actions_skips_zero_probability():
    probs = np.array([[0.3, 0.7 - 1e-17, 0.0]] * 3)
    a = sample_actions(probs, np.array([0.0, 0.5, 1.0 - 1e-18]))
    assert list(a) == [0, 1, 1]


def test_inverse_transform_respects_order():
    mdp = random_mdp(7, n_states=4, n_actions=1)
    keys = -np.arange(mdp.successors.shape[2])[None, None, :] * np.ones(mdp.successors.shape)
    succ, cum, rew = order_successors(mdp, keys)
    s = np.zeros(2, dtype=np.int64)
    nxt, _ = inverse_transform_step(succ, cum, rew, s, s, np.array([0.0, 0.999999]))
    assert nxt[0] == succ[0, 0, 0]


def test_rollout_mean_matches_exact_value():
    mdp = random_mdp(8)
    pol = random_policy(3, mdp.n_states, mdp.n_actions, horizon=mdp.horizon)
    d = rollout(mdp, pol, 100_000, np.random.default_rng(0))
    y = d.returns()
    se = y.std() / np.sqrt(d.n)
    assert abs(y.mean() - exact_policy_value(mdp, pol)) < 4 * se
