"""Estimate the observed-history (marginal) behavior policy from logged data.

Two model families are provided: per-block frequency tables for discrete
states and multinomial logistic regression for feature states.  Every emitted
probability is at least ``p_min`` so importance ratios stay bounded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .core import DISCRETE, Dataset, history_codes, history_matrix

P_MIN = 1e-4
RIDGE = 1e-4
GRAD_TOL = 1e-8
MAX_NEWTON = 200
DIVERGENCE_NORM = 1e4


class EmptyDataset(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def apply_floor(probs: np.ndarray, p_min: float) -> np.ndarray:
    """Raise entries below ``p_min`` to ``p_min`` and rescale the rest of the row.

    Rows that already satisfy the floor are returned unchanged, bit for bit.
    """
    probs = np.array(probs, dtype=float)
    if p_min <= 0:
        return probs
    k = probs.shape[-1]
    if p_min * k > 1:
        raise ValueError(f"p_min={p_min} is infeasible for {k} actions")
    low = probs < p_min
    rows = low.any(axis=-1)
    if not rows.any():
        return probs
    sub, sub_low = probs[rows], low[rows]
    # rescaling can push another entry under the floor, so clamp until stable
    for _ in range(k):
        high_mass = np.where(sub_low, 0.0, sub).sum(axis=-1, keepdims=True)
        target = 1.0 - p_min * sub_low.sum(axis=-1, keepdims=True)
        out = np.where(sub_low, p_min, sub * target / high_mass)
        newly = out < p_min
        if not newly.any():
            break
        sub_low = sub_low | newly
    probs[rows] = out
    return probs


# -- tabular -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularBehavior:
    """Frequency tables, one per block of time steps.

    ``tables[b, s, a]`` is used at every 0-based step in ``blocks[b]``.
    """

    tables: np.ndarray
    blocks: tuple[tuple[int, ...], ...]
    alpha: float = 0.0
    p_min: float = P_MIN
    counts: np.ndarray | None = None
    kind: str = field(default="tabular", init=False)

    def block_of(self, step: int) -> int:
        for b, steps in enumerate(self.blocks):
            if step in steps:
                return b
        raise IndexError(f"step {step + 1} is not covered by any block")

    def table(self, step: int) -> np.ndarray:
        return self.tables[self.block_of(step)]

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        s = data.states[step]
        table = self.table(step)
        out = np.full((len(s), table.shape[1]), 1.0 / table.shape[1])
        known = s < table.shape[0]
        out[known] = table[s[known]]
        return out

    def to_json(self) -> dict:
        return {"kind": "tabular", "blocks": [list(b) for b in self.blocks],
                "alpha": self.alpha, "p_min": self.p_min,
                "tables": self.tables.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "TabularBehavior":
        return cls(np.array(obj["tables"]), tuple(tuple(b) for b in obj["blocks"]),
                   obj["alpha"], obj["p_min"])


def per_step_blocks(horizon: int) -> tuple[tuple[int, ...], ...]:
    return tuple((t,) for t in range(horizon))


def first_and_rest_blocks(horizon: int) -> tuple[tuple[int, ...], ...]:
    """The first step on its own, all later steps pooled."""
    return ((0,), tuple(range(1, horizon))) if horizon > 1 else ((0,),)


def fit_tabular(data: Dataset, time_blocks: Sequence[Sequence[int]] | None = None,
                alpha: float = 0.0, p_min: float = P_MIN,
                n_states: int | None = None) -> TabularBehavior:
    """Smoothed empirical action frequencies per (block, state).

    ``time_blocks`` partitions the 0-based steps; the default fits every step
    separately.  Unseen states get the uniform distribution.
    """
    if data.n == 0:
        raise EmptyDataset("cannot fit a behavior policy on zero episodes")
    if data.state_kind != DISCRETE:
        raise ValueError("fit_tabular needs discrete states")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    blocks = per_step_blocks(data.horizon) if time_blocks is None else tuple(
        tuple(int(t) for t in b) for b in time_blocks)
    covered = sorted(t for b in blocks for t in b)
    if covered != list(range(data.horizon)):
        raise ValueError("time_blocks must partition the steps 0..T-1")
    K = max(data.action_cardinalities)
    S = n_states or int(max(s.max() for s in data.states)) + 1
    counts = np.zeros((len(blocks), S, K))
    for b, steps in enumerate(blocks):
        for t in steps:
            np.add.at(counts[b], (data.states[t], data.actions[:, t]), 1.0)
    smoothed = counts + alpha
    totals = smoothed.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        tables = np.where(totals > 0, smoothed / totals, 1.0 / K)
    tables = apply_floor(tables, p_min)
    tables.setflags(write=False)
    return TabularBehavior(tables, blocks, alpha, p_min, counts)


@dataclass(frozen=True, eq=False)
class HistoryBehavior:
    """Frequency tables indexed by the whole observed history, one per step.

    Use when the logging policy may depend on more than the current state.
    ``keys[t]`` holds the history rows seen at 0-based step ``t`` and
    ``tables[t][c]`` the action frequencies after history ``keys[t][c]``.
    Unseen histories get the uniform distribution.
    """

    keys: tuple[np.ndarray, ...]
    tables: tuple[np.ndarray, ...]
    p_min: float = P_MIN
    kind: str = field(default="history", init=False)

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        table = self.tables[step]
        index = {tuple(r): i for i, r in enumerate(self.keys[step])}
        rows = history_matrix(data, step + 1)
        codes = np.array([index.get(tuple(r), -1) for r in rows], dtype=np.int64)
        out = np.full((data.n, table.shape[1]), 1.0 / table.shape[1])
        out[codes >= 0] = table[codes[codes >= 0]]
        return out

    def to_json(self) -> dict:
        return {"kind": "history", "p_min": self.p_min,
                "keys": [k.tolist() for k in self.keys],
                "tables": [t.tolist() for t in self.tables]}

    @classmethod
    def from_json(cls, obj: dict) -> "HistoryBehavior":
        return cls(tuple(np.array(k, dtype=float) for k in obj["keys"]),
                   tuple(np.array(t) for t in obj["tables"]), obj["p_min"])


def fit_history_tabular(data: Dataset, p_min: float = P_MIN) -> HistoryBehavior:
    """Empirical action frequencies after every distinct observed history."""
    if data.n == 0:
        raise EmptyDataset("cannot fit a behavior policy on zero episodes")
    if data.state_kind != DISCRETE:
        raise ValueError("fit_history_tabular needs discrete states")
    keys, tables = [], []
    for t in range(data.horizon):
        codes, k = history_codes(data, t + 1)
        counts = np.zeros((len(k), data.action_cardinalities[t]))
        np.add.at(counts, (codes, data.actions[:, t]), 1.0)
        keys.append(np.asarray(k, dtype=float).reshape(len(k), -1))
        tables.append(apply_floor(counts / counts.sum(axis=1, keepdims=True), p_min))
    return HistoryBehavior(tuple(keys), tuple(tables), p_min)


# -- logistic ------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_multinomial(X: np.ndarray, y: np.ndarray, n_classes: int, reg: float = RIDGE,
                    tol: float = GRAD_TOL, max_iter: int = MAX_NEWTON) -> np.ndarray:
    """Ridge multinomial logistic regression by damped Newton.

    ``X`` must already contain an intercept column (column 0, unpenalized).
    Class 0 is the reference, so the returned ``(d, n_classes)`` coefficient
    matrix has a zero first column.  Raises :class:`ConvergenceError` when the
    weights diverge (separable data without ridge) or ``max_iter`` is hit.
    """
    n, d = X.shape
    m = n_classes - 1
    if m == 0:
        return np.zeros((d, 1))
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), y] = 1.0
    pen = np.full(d, reg)
    pen[0] = 0.0
    pen_vec = np.tile(pen, m)

    def objective(B):
        logits = np.hstack([np.zeros((n, 1)), X @ B])
        z = logits.max(axis=1, keepdims=True)
        lse = z[:, 0] + np.log(np.exp(logits - z).sum(axis=1))
        return float((lse - (logits * Y).sum(axis=1)).mean() + 0.5 * (pen_vec * B.T.ravel() ** 2).sum())

    B = np.zeros((d, m))
    f = objective(B)
    for _ in range(max_iter):
        P = _softmax(np.hstack([np.zeros((n, 1)), X @ B]))[:, 1:]
        G = X.T @ (P - Y[:, 1:]) / n + pen[:, None] * B
        g = G.T.ravel()
        if np.abs(g).max() < tol:
            return np.hstack([np.zeros((d, 1)), B])
        H = np.empty((m * d, m * d))
        for j in range(m):
            for k in range(j, m):
                w = P[:, j] * ((j == k) - P[:, k])
                blk = (X * w[:, None]).T @ X / n
                H[j * d:(j + 1) * d, k * d:(k + 1) * d] = blk
                H[k * d:(k + 1) * d, j * d:(j + 1) * d] = blk
        H[np.diag_indices_from(H)] += pen_vec + 1e-12
        step = np.linalg.solve(H, g).reshape(m, d).T
        t = 1.0
        while True:
            cand = B - t * step
            f_new = objective(cand)
            if f_new <= f - 1e-4 * t * float(g @ step.T.ravel()) or t < 1e-10:
                break
            t *= 0.5
        B, f = cand, f_new
        if np.abs(B[1:]).max(initial=0.0) > DIVERGENCE_NORM:
            raise ConvergenceError("logistic weights diverge; the classes look separable "
                                   "(use a positive ridge penalty)")
    raise ConvergenceError(f"logistic regression did not converge in {max_iter} Newton steps")


@dataclass(frozen=True, eq=False)
class LogisticStep:
    """Logistic model for one step, optionally stratified by a state column.

    For each stratum the model covers the actions observed in it; a stratum
    with a single observed action is deterministic up to the ``p_min`` floor.
    Coefficients act on standardized features ``(x - mean) / scale``.
    """

    n_actions: int
    mean: np.ndarray
    scale: np.ndarray
    group_column: int | None
    groups: dict  # group value -> (classes tuple, coef array (d+1, len(classes)))
    p_min: float = P_MIN

    def design(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.mean) / self.scale
        return np.hstack([np.ones((len(feats), 1)), z])

    def predict(self, feats: np.ndarray) -> np.ndarray:
        out = np.full((len(feats), self.n_actions), 1.0 / self.n_actions)
        X = self.design(feats)
        keys = feats[:, self.group_column] if self.group_column is not None else np.zeros(len(feats))
        for g, (classes, coef) in self.groups.items():
            rows = keys == g
            if not rows.any():
                continue
            probs = np.zeros((rows.sum(), self.n_actions))
            probs[:, list(classes)] = _softmax(X[rows] @ coef)
            out[rows] = probs
        return apply_floor(out, self.p_min)

    def to_json(self) -> dict:
        return {"n_actions": self.n_actions, "mean": self.mean.tolist(),
                "scale": self.scale.tolist(), "group_column": self.group_column,
                "p_min": self.p_min,
                "groups": [{"value": float(g), "classes": list(c), "coef": coef.tolist()}
                           for g, (c, coef) in sorted(self.groups.items())]}

    @classmethod
    def from_json(cls, obj: dict) -> "LogisticStep":
        groups = {g["value"]: (tuple(g["classes"]), np.array(g["coef"])) for g in obj["groups"]}
        return cls(obj["n_actions"], np.array(obj["mean"]), np.array(obj["scale"]),
                   obj["group_column"], groups, obj["p_min"])


def state_features(data: Dataset, step: int) -> np.ndarray:
    """Feature matrix of the current state at 0-based ``step``."""
    s = data.states[step]
    return s[:, None].astype(float) if s.ndim == 1 else s


def fit_logistic_step(data: Dataset, step: int, reg: float = RIDGE,
                      featureizer: Callable[[Dataset, int], np.ndarray] = state_features,
                      group_column: int | None = None, p_min: float = P_MIN) -> LogisticStep:
    """Fit the behavior policy at 0-based ``step`` by multinomial logistic regression."""
    if data.n == 0:
        raise EmptyDataset("cannot fit a behavior policy on zero episodes")
    feats = featureizer(data, step)
    y = data.actions[:, step]
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    X = np.hstack([np.ones((len(feats), 1)), (feats - mean) / scale])
    keys = feats[:, group_column] if group_column is not None else np.zeros(len(feats))
    groups = {}
    for g in np.unique(keys):
        rows = keys == g
        classes = tuple(int(c) for c in np.unique(y[rows]))
        coef = np.zeros((X.shape[1], len(classes)))
        if len(classes) > 1:
            remap = np.searchsorted(classes, y[rows])
            # columns constant within the stratum carry nothing beyond the intercept
            cols = np.concatenate([[True], feats[rows].std(axis=0) > 0])
            coef[cols] = fit_multinomial(X[rows][:, cols], remap, len(classes), reg)
        groups[float(g)] = (classes, coef)
    return LogisticStep(data.action_cardinalities[step], mean, scale, group_column, groups, p_min)


@dataclass(frozen=True, eq=False)
class LogisticBehavior:
    """One :class:`LogisticStep` per time step."""

    steps: tuple[LogisticStep, ...]
    reg: float = RIDGE
    featureizer: Callable[[Dataset, int], np.ndarray] = state_features
    kind: str = field(default="logistic", init=False)

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        return self.steps[step].predict(self.featureizer(data, step))

    def to_json(self) -> dict:
        return {"kind": "logistic", "reg": self.reg, "steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, obj: dict) -> "LogisticBehavior":
        return cls(tuple(LogisticStep.from_json(s) for s in obj["steps"]), obj["reg"])


def fit_logistic(data: Dataset, reg: float = RIDGE,
                 featureizer: Callable[[Dataset, int], np.ndarray] = state_features,
                 group_columns: Sequence[int | None] | None = None,
                 p_min: float = P_MIN) -> LogisticBehavior:
    """Fit a separate logistic model at every step."""
    groups = group_columns or [None] * data.horizon
    steps = tuple(fit_logistic_step(data, t, reg, featureizer, groups[t], p_min)
                  for t in range(data.horizon))
    return LogisticBehavior(steps, reg, featureizer)


# -- sample splitting and I/O ----------------------------------------------------

def split_indices(n: int, split_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    perm = rng_mod.stream(seed, "split").permutation(n)
    cut = int(round(split_ratio * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def split_fit(data: Dataset, fitter: Callable[[Dataset], object], split_ratio: float = 0.5,
              seed: int = 0):
    """Fit on one part of the data and return ``(policy, held_out)``."""
    fit_idx, hold_idx = split_indices(data.n, split_ratio, seed)
    return fitter(data.subset(fit_idx)), data.subset(hold_idx)


def policy_to_json(policy) -> dict:
    return policy.to_json()


def policy_from_json(obj: dict):
    if obj.get("kind") == "tabular":
        return TabularBehavior.from_json(obj)
    if obj.get("kind") == "logistic":
        return LogisticBehavior.from_json(obj)
    if obj.get("kind") == "history":
        return HistoryBehavior.from_json(obj)
    raise ValueError(f"unknown policy kind {obj.get('kind')!r}")


def save_policy(policy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy.to_json(), sort_keys=True))


def load_policy(path: str | Path):
    return policy_from_json(json.loads(Path(path).read_text()))
