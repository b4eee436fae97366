"""Finite-horizon tabular MDPs with sparse successor lists and exact planners."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset

MAX_ITERS = 1000
TIE_TOL = 1e-12


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon MDP with per-(s, a) successor lists padded to width K.

    ``successors[s, a, k]`` is the k-th possible next state, reached with
    probability ``probs[s, a, k]`` and reward ``rewards[s, a, k]``.  Padding
    entries carry probability zero.
    """

    successors: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    initial_distribution: np.ndarray
    absorbing: np.ndarray
    horizon: int = 5
    discount: float = 0.99

    def __post_init__(self):
        succ = np.asarray(self.successors, dtype=np.int64)
        probs = np.asarray(self.probs, dtype=float)
        rewards = np.asarray(self.rewards, dtype=float)
        if succ.ndim != 3 or probs.shape != succ.shape or rewards.shape != succ.shape:
            raise ValueError("successors, probs and rewards must share an (S, A, K) shape")
        n_states = succ.shape[0]
        init = np.asarray(self.initial_distribution, dtype=float)
        absorbing = np.asarray(self.absorbing, dtype=bool)
        if init.shape != (n_states,) or absorbing.shape != (n_states,):
            raise ValueError("initial_distribution and absorbing need one entry per state")
        if (succ < 0).any() or (succ >= n_states).any():
            raise ValueError("successor index out of range")
        if (probs < 0).any():
            raise ValueError("negative transition probability")
        rowsum = probs.sum(axis=2)
        if np.abs(rowsum - 1.0).max() > 1e-9:
            s, a = np.unravel_index(np.abs(rowsum - 1.0).argmax(), rowsum.shape)
            raise ValueError(f"P({s}, {a}, .) sums to {rowsum[s, a]!r}")
        if abs(init.sum() - 1.0) > 1e-9 or (init < 0).any():
            raise ValueError("initial_distribution must be a probability vector")
        for s in np.flatnonzero(absorbing):
            mass = probs[s] * (succ[s] == s)
            if np.abs(mass.sum(axis=1) - 1.0).max() > 1e-9 or np.abs(rewards[s] * probs[s]).max() > 0:
                raise ValueError(f"absorbing state {s} must self-loop with zero reward")
        if self.horizon < 1 or not 0.0 < self.discount <= 1.0:
            raise ValueError("need horizon >= 1 and discount in (0, 1]")
        for name, val in (("successors", succ), ("probs", probs), ("rewards", rewards),
                          ("initial_distribution", init), ("absorbing", absorbing)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_states(self) -> int:
        return self.successors.shape[0]

    @property
    def n_actions(self) -> int:
        return self.successors.shape[1]

    def expected_reward(self) -> np.ndarray:
        return (self.probs * self.rewards).sum(axis=2)

    def dense_transition(self) -> np.ndarray:
        """Dense ``P(s, a, s')``; only sensible for small MDPs."""
        P = np.zeros((self.n_states, self.n_actions, self.n_states))
        s, a, _ = np.indices(self.successors.shape)
        np.add.at(P, (s, a, self.successors), self.probs)
        return P

    @classmethod
    def from_dense(cls, P: np.ndarray, R: np.ndarray, initial_distribution,
                   absorbing=None, horizon: int = 5, discount: float = 0.99) -> "TabularMDP":
        """Build from dense ``P(s, a, s')`` and ``R(s, a, s')`` tensors."""
        P = np.asarray(P, dtype=float)
        R = np.broadcast_to(np.asarray(R, dtype=float), P.shape)
        S, A, _ = P.shape
        width = max(1, int((P > 0).sum(axis=2).max()))
        succ = np.zeros((S, A, width), dtype=np.int64)
        probs = np.zeros((S, A, width))
        rew = np.zeros((S, A, width))
        for s in range(S):
            for a in range(A):
                nz = np.flatnonzero(P[s, a] > 0)
                succ[s, a, :] = s
                succ[s, a, :len(nz)] = nz
                probs[s, a, :len(nz)] = P[s, a, nz]
                rew[s, a, :len(nz)] = R[s, a, nz]
        if absorbing is None:
            absorbing = np.zeros(S, dtype=bool)
        return cls(succ, probs, rew, initial_distribution, absorbing, horizon, discount)

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        transitions = []
        for s in range(self.n_states):
            row = []
            for a in range(self.n_actions):
                keep = self.probs[s, a] > 0
                row.append([[int(x) for x in self.successors[s, a, keep]],
                            [float(x) for x in self.probs[s, a, keep]],
                            [float(x) for x in self.rewards[s, a, keep]]])
            transitions.append(row)
        return {
            "format": "confound-ope/tabular-mdp",
            "version": 1,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "discount": self.discount,
            "initial_distribution": self.initial_distribution.tolist(),
            "absorbing": [int(s) for s in np.flatnonzero(self.absorbing)],
            "transitions": transitions,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TabularMDP":
        S, A = obj["n_states"], obj["n_actions"]
        width = max(len(cell[0]) for row in obj["transitions"] for cell in row)
        succ = np.zeros((S, A, width), dtype=np.int64)
        probs = np.zeros((S, A, width))
        rew = np.zeros((S, A, width))
        for s, row in enumerate(obj["transitions"]):
            for a, (nxt, p, r) in enumerate(row):
                succ[s, a, :] = s
                succ[s, a, :len(nxt)] = nxt
                probs[s, a, :len(p)] = p
                rew[s, a, :len(r)] = r
        absorbing = np.zeros(S, dtype=bool)
        absorbing[obj["absorbing"]] = True
        return cls(succ, probs, rew, np.array(obj["initial_distribution"]), absorbing,
                   obj["horizon"], obj["discount"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "TabularMDP":
        return cls.from_json(json.loads(Path(path).read_text()))


class TabularPolicy:
    """State-indexed action probabilities, stationary ``(S, A)`` or per-step ``(T, S, A)``."""

    def __init__(self, probs: np.ndarray, name: str = "tabular"):
        probs = np.array(probs, dtype=float)
        if probs.ndim not in (2, 3):
            raise ValueError("policy table must be (S, A) or (T, S, A)")
        if (probs < 0).any() or np.abs(probs.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ValueError("policy rows must be probability vectors")
        probs.setflags(write=False)
        self.probs = probs
        self.name = name

    @property
    def time_indexed(self) -> bool:
        return self.probs.ndim == 3

    def table(self, step: int) -> np.ndarray:
        """``(S, A)`` table used at 0-based ``step``."""
        if not self.time_indexed:
            return self.probs
        return self.probs[min(step, self.probs.shape[0] - 1)]

    def per_step(self, horizon: int) -> np.ndarray:
        return np.stack([self.table(t) for t in range(horizon)])

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        return self.table(step)[data.states[step]]

    def __repr__(self):
        return f"TabularPolicy({self.name!r}, shape={self.probs.shape})"


def deterministic_policy(actions: np.ndarray, n_actions: int, name: str = "deterministic") -> TabularPolicy:
    actions = np.asarray(actions)
    table = np.zeros(actions.shape + (n_actions,))
    np.put_along_axis(table, actions[..., None], 1.0, axis=-1)
    return TabularPolicy(table, name)


def soften(policy: TabularPolicy, epsilon: float, keep_rows: np.ndarray | None = None) -> TabularPolicy:
    """Mix ``(1 - epsilon) * policy + epsilon * uniform``.

    Rows flagged in ``keep_rows`` (a state mask) are left untouched.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    probs = policy.probs
    mixed = (1.0 - epsilon) * probs + epsilon / probs.shape[-1]
    if keep_rows is not None:
        mixed[..., keep_rows, :] = probs[..., keep_rows, :]
    return TabularPolicy(mixed, f"soft({policy.name}, {epsilon:g})")


def q_values(mdp: TabularMDP, V_next: np.ndarray) -> np.ndarray:
    """One Bellman backup: ``Q(s, a) = sum_k p (r + gamma V_next(s'))``."""
    return (mdp.probs * (mdp.rewards + mdp.discount * V_next[mdp.successors])).sum(axis=2)


def evaluate(mdp: TabularMDP, policy: TabularPolicy, horizon: int | None = None):
    """Backward induction for a fixed policy.

    Returns ``(V, Q)`` with ``V`` of shape ``(T + 1, S)`` (``V[T] = 0``) and
    ``Q`` of shape ``(T, S, A)``.
    """
    T = mdp.horizon if horizon is None else horizon
    V = np.zeros((T + 1, mdp.n_states))
    Q = np.zeros((T, mdp.n_states, mdp.n_actions))
    for t in range(T - 1, -1, -1):
        Q[t] = q_values(mdp, V[t + 1])
        V[t] = (policy.table(t) * Q[t]).sum(axis=1)
    return V, Q


def exact_policy_value(mdp: TabularMDP, policy: TabularPolicy) -> float:
    """Expected discounted return over ``mdp.horizon`` steps from the initial distribution."""
    V, _ = evaluate(mdp, policy)
    return float(mdp.initial_distribution @ V[0])


def _greedy(Q: np.ndarray) -> np.ndarray:
    best = Q.max(axis=-1, keepdims=True)
    return np.argmax(Q >= best - TIE_TOL, axis=-1)


def value_iteration(mdp: TabularMDP):
    """Finite-horizon optimal values by backward induction.

    Returns ``(V, policy)`` where ``policy`` is the greedy deterministic
    per-step policy (ties broken toward the lowest action index).
    """
    T = mdp.horizon
    V = np.zeros((T + 1, mdp.n_states))
    acts = np.zeros((T, mdp.n_states), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        Q = q_values(mdp, V[t + 1])
        acts[t] = _greedy(Q)
        V[t] = Q.max(axis=1)
    return V, deterministic_policy(acts, mdp.n_actions, "value-iteration")


def policy_iteration(mdp: TabularMDP, max_iters: int = MAX_ITERS) -> TabularPolicy:
    """Howard policy iteration over per-step deterministic policies."""
    acts = np.zeros((mdp.horizon, mdp.n_states), dtype=np.int64)
    for _ in range(max_iters):
        policy = deterministic_policy(acts, mdp.n_actions, "optimal")
        _, Q = evaluate(mdp, policy)
        current = np.take_along_axis(Q, acts[..., None], axis=-1)[..., 0]
        improved = _greedy(Q)
        # keep the current action unless another is strictly better
        keep = Q.max(axis=-1) <= current + TIE_TOL
        new_acts = np.where(keep, np.minimum(acts, improved), improved)
        if np.array_equal(new_acts, acts):
            return policy
        acts = new_acts
    raise ConvergenceError(f"policy iteration did not converge in {max_iters} iterations")


def order_successors(mdp: TabularMDP, keys: np.ndarray, tiebreak: np.ndarray | None = None):
    """Sort every successor list by ascending ``keys`` (then ``tiebreak``, then index).

    Padding entries always go last.  Returns ``(successors, cumulative_probs)``.
    """
    pad = mdp.probs <= 0
    tb = mdp.rewards if tiebreak is None else tiebreak
    order = np.lexsort((mdp.successors, tb, keys, pad), axis=-1)
    succ = np.take_along_axis(mdp.successors, order, axis=-1)
    cum = np.cumsum(np.take_along_axis(mdp.probs, order, axis=-1), axis=-1)
    rew = np.take_along_axis(mdp.rewards, order, axis=-1)
    return succ, cum, rew


def inverse_transform_step(succ: np.ndarray, cum: np.ndarray, rew: np.ndarray,
                           states: np.ndarray, actions: np.ndarray, u: np.ndarray):
    """Next states and rewards picked by uniforms ``u`` from ordered successor lists."""
    c = cum[states, actions]
    k = (c <= u[:, None]).sum(axis=1)
    # cumulative sums can round just below one; never step onto padding
    last = np.argmax(c >= c[:, -1:], axis=1)
    k = np.minimum(k, last)
    rows = np.arange(len(states))
    return succ[states, actions][rows, k], rew[states, actions][rows, k]


def sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-transform draw of one action per row of ``probs``.

    Never returns an action whose probability is zero, even when the row's
    cumulative sum rounds just below one.
    """
    cum = np.cumsum(probs, axis=1)
    a = (cum <= u[:, None]).sum(axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(a, last)


def rollout(mdp: TabularMDP, policy: TabularPolicy, n: int, rng: np.random.Generator) -> Dataset:
    """Monte Carlo episodes under ``policy``; all randomness comes from ``rng``."""
    T = mdp.horizon
    u = rng.random((n, 2 * T + 1))
    succ, cum, rew = order_successors(mdp, np.zeros(mdp.successors.shape))
    s = np.searchsorted(np.cumsum(mdp.initial_distribution), u[:, 0], side="right")
    s = np.minimum(s, mdp.n_states - 1)
    states, actions, rewards = [], np.zeros((n, T), dtype=np.int64), np.zeros((n, T))
    for t in range(T):
        states.append(s)
        a = sample_actions(policy.table(t)[s], u[:, 1 + 2 * t])
        actions[:, t] = a
        s, rewards[:, t] = inverse_transform_step(succ, cum, rew, s, a, u[:, 2 + 2 * t])
    return Dataset(tuple(states), actions, rewards, mdp.discount, (mdp.n_actions,) * T)


def estimate_mdp(mdp: TabularMDP, samples_per_pair: int, rng: np.random.Generator) -> TabularMDP:
    """Empirical MDP from ``samples_per_pair`` draws of every (s, a) transition."""
    S, A, K = mdp.successors.shape
    counts = np.zeros((S, A, K))
    for s in range(S):
        if mdp.absorbing[s]:
            counts[s, :, :] = mdp.probs[s] * samples_per_pair
            continue
        for a in range(A):
            counts[s, a] = rng.multinomial(samples_per_pair, mdp.probs[s, a] / mdp.probs[s, a].sum())
    return TabularMDP(mdp.successors, counts / samples_per_pair, mdp.rewards,
                      mdp.initial_distribution, mdp.absorbing, mdp.horizon, mdp.discount)
