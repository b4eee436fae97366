"""Trajectory data model, returns, importance ratios and episode logs.

A :class:`Dataset` stores its episodes column-wise (one array per time step)
so every estimator can work on all episodes at once; :class:`Episode` is the
row view used at the edges (logs, single-episode helpers, tests).

Time steps are 0-based inside arrays.  Public functions that take a step
number in the domain sense (``history_key``, ``t_star``) say so explicitly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

EPS_PROB = 1e-12
SCHEMA_NAME = "confound-ope/episodes"
SCHEMA_VERSION = 1

DISCRETE = "discrete"
CONTINUOUS = "continuous"


class ZeroBehaviorProbability(ValueError):
    """An observed action has (numerically) zero probability under the behavior policy."""

    def __init__(self, step: int, episode: int | None = None, prob: float = 0.0):
        self.step = step
        self.episode = episode
        self.prob = prob
        where = f"step {step + 1}" if episode is None else f"episode {episode}, step {step + 1}"
        super().__init__(f"behavior probability {prob:.3g} <= {EPS_PROB:g} at {where}")


class SchemaError(ValueError):
    """An episode log violates the schema; ``problems`` holds ``(line, message)`` pairs."""

    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in problems[:10])
        super().__init__(f"{len(problems)} schema problem(s): {lines}")


@dataclass(frozen=True)
class Episode:
    """One observed trajectory of ``horizon`` steps."""

    states: tuple
    actions: tuple[int, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states, actions and rewards must have equal length")
        if len(self.actions) == 0:
            raise ValueError("an episode needs at least one step")

    @property
    def horizon(self) -> int:
        return len(self.actions)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Homogeneous collection of equal-horizon episodes.

    ``states[t]`` is an ``(n,)`` integer array for discrete state spaces or an
    ``(n, d_t)`` float array for feature vectors (``d_t`` may vary with t).
    ``extras`` carries per-episode side information such as the true behavior
    probabilities logged by a simulator; it never feeds an estimator.
    """

    states: tuple[np.ndarray, ...]
    actions: np.ndarray
    rewards: np.ndarray
    discount: float
    action_cardinalities: tuple[int, ...]
    extras: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if actions.ndim != 2 or rewards.shape != actions.shape:
            raise ValueError("actions and rewards must both be (n, T) arrays")
        n, horizon = actions.shape
        if horizon == 0:
            raise ValueError("horizon must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        cards = tuple(int(k) for k in self.action_cardinalities)
        if len(cards) != horizon or min(cards) < 1:
            raise ValueError("need one positive action cardinality per step")
        if len(self.states) != horizon:
            raise ValueError("need one state array per step")
        states = []
        kinds = set()
        for s in self.states:
            s = np.asarray(s)
            if s.shape[0] != n:
                raise ValueError("state arrays must have one row per episode")
            if s.ndim == 1:
                kinds.add(DISCRETE)
                s = s.astype(np.int64)
            elif s.ndim == 2:
                kinds.add(CONTINUOUS)
                s = s.astype(float)
            else:
                raise ValueError("states must be (n,) indices or (n, d) features")
            states.append(_freeze(s))
        if len(kinds) > 1:
            raise ValueError("a dataset cannot mix discrete and continuous states")
        if n and ((actions < 0).any() or (actions >= np.array(cards)).any()):
            raise ValueError("action index outside its step's action set")
        object.__setattr__(self, "states", tuple(states))
        object.__setattr__(self, "actions", _freeze(actions))
        object.__setattr__(self, "rewards", _freeze(rewards))
        object.__setattr__(self, "action_cardinalities", cards)
        object.__setattr__(self, "extras", {k: _freeze(np.asarray(v)) for k, v in self.extras.items()})

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def state_kind(self) -> str:
        return DISCRETE if self.states[0].ndim == 1 else CONTINUOUS

    def returns(self) -> np.ndarray:
        """Discounted return of every episode."""
        powers = self.discount ** np.arange(self.horizon)
        return self.rewards @ powers

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            states=tuple(s[index] for s in self.states),
            actions=self.actions[index],
            rewards=self.rewards[index],
            discount=self.discount,
            action_cardinalities=self.action_cardinalities,
            extras={k: v[index] for k, v in self.extras.items()},
        )

    def with_rewards(self, rewards: np.ndarray) -> "Dataset":
        return Dataset(self.states, self.actions, rewards, self.discount,
                       self.action_cardinalities, self.extras)

    def negated(self) -> "Dataset":
        """Same episodes with every reward negated (used for upper bounds)."""
        return self.with_rewards(-self.rewards)

    def episode(self, i: int) -> Episode:
        states = tuple(
            int(s[i]) if s.ndim == 1 else tuple(float(x) for x in s[i]) for s in self.states
        )
        return Episode(states, tuple(int(a) for a in self.actions[i]),
                       tuple(float(r) for r in self.rewards[i]))

    @property
    def episodes(self) -> Iterator[Episode]:
        return (self.episode(i) for i in range(self.n))

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], discount: float,
                      action_cardinalities: Sequence[int],
                      extras: Mapping[str, np.ndarray] | None = None) -> "Dataset":
        if not episodes:
            raise ValueError("need at least one episode")
        horizon = episodes[0].horizon
        if any(ep.horizon != horizon for ep in episodes):
            raise ValueError("all episodes must share the same horizon")
        states = []
        for t in range(horizon):
            col = [ep.states[t] for ep in episodes]
            if np.ndim(col[0]) == 0:
                states.append(np.array(col, dtype=np.int64))
            else:
                states.append(np.array(col, dtype=float))
        return cls(
            states=tuple(states),
            actions=np.array([ep.actions for ep in episodes], dtype=np.int64),
            rewards=np.array([ep.rewards for ep in episodes], dtype=float),
            discount=discount,
            action_cardinalities=tuple(action_cardinalities),
            extras=dict(extras or {}),
        )


class Policy(Protocol):
    """Anything that maps the observed history at ``step`` to action probabilities."""

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        """Return an ``(n, |A_step|)`` array of probabilities (0-based step)."""
        ...


class FunctionPolicy:
    """Wrap ``fn(data, step) -> (n, K)`` as a policy."""

    def __init__(self, fn, name: str = "policy"):
        self.fn = fn
        self.name = name

    def action_probs(self, data: Dataset, step: int) -> np.ndarray:
        return np.asarray(self.fn(data, step), dtype=float)

    def __repr__(self):
        return f"FunctionPolicy({self.name!r})"


def discounted_return(episode: Episode, discount: float) -> float:
    if not 0.0 < discount <= 1.0:
        raise ValueError(f"discount must lie in (0, 1], got {discount}")
    return float(sum(discount ** t * r for t, r in enumerate(episode.rewards)))


@dataclass(frozen=True)
class WeightVector:
    """Per-step importance ratios of one episode."""

    ratios: np.ndarray

    @property
    def max_rho(self) -> float:
        return float(np.max(self.ratios))

    @property
    def total(self) -> float:
        return float(np.prod(self.ratios))

    def cumulative(self, start: int = 0, stop: int | None = None) -> float:
        """Product of ratios over the 0-based half-open range ``[start, stop)``."""
        return float(np.prod(self.ratios[start:stop]))


def observed_probs(policy: Policy, data: Dataset) -> np.ndarray:
    """``(n, T)`` probability each policy assigns to the observed action."""
    rows = np.arange(data.n)
    out = np.empty(data.actions.shape)
    for t in range(data.horizon):
        out[:, t] = policy.action_probs(data, t)[rows, data.actions[:, t]]
    return out


def check_behavior(pb: np.ndarray) -> None:
    bad = np.argwhere(pb <= EPS_PROB)
    if bad.size:
        i, t = bad[0]
        raise ZeroBehaviorProbability(int(t), int(i), float(pb[i, t]))


def importance_ratios(data: Dataset, behavior: Policy, evaluation: Policy,
                      rho_cap: float | None = None) -> np.ndarray:
    """``(n, T)`` matrix of per-step ratios, optionally clipped at ``rho_cap``."""
    pb = observed_probs(behavior, data)
    check_behavior(pb)
    rho = observed_probs(evaluation, data) / pb
    if rho_cap is not None:
        rho = np.minimum(rho, rho_cap)
    return rho


def step_weights(episode: Episode, behavior: Policy, evaluation: Policy,
                 action_cardinalities: Sequence[int], discount: float = 1.0) -> WeightVector:
    data = Dataset.from_episodes([episode], discount, action_cardinalities)
    return WeightVector(importance_ratios(data, behavior, evaluation)[0])


HistoryKey = tuple


def history_key(episode: Episode, t: int) -> HistoryKey:
    """Canonical key of the observed history up to step ``t`` (1-based).

    The key interleaves states and actions, ``(S_1, A_1, ..., S_t)``; feature
    states are flattened to tuples of floats.
    """
    if not 1 <= t <= episode.horizon:
        raise IndexError(f"step {t} outside 1..{episode.horizon}")
    key: list = []
    for k in range(t):
        s = episode.states[k]
        key.append(s if np.ndim(s) == 0 else tuple(float(x) for x in s))
        if k < t - 1:
            key.append(int(episode.actions[k]))
    return tuple(key)


def history_matrix(data: Dataset, t: int) -> np.ndarray:
    """Stack the history up to 1-based step ``t`` into one row per episode."""
    cols = []
    for k in range(t):
        s = data.states[k]
        cols.append(s[:, None] if s.ndim == 1 else s)
        if k < t - 1:
            cols.append(data.actions[:, k:k + 1])
    return np.hstack([c.astype(float) for c in cols])


def history_codes(data: Dataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer bucket id per episode for the history up to 1-based step ``t``.

    Returns ``(codes, keys)`` where ``keys[c]`` is the history row of bucket
    ``c``.  Buckets are numbered in lexicographic order of their rows, so the
    numbering is deterministic.
    """
    if t == 1 and data.states[0].ndim == 1:
        keys, codes = np.unique(data.states[0], return_inverse=True)
        return codes.astype(np.int64), keys[:, None].astype(float)
    keys, codes = np.unique(history_matrix(data, t), axis=0, return_inverse=True)
    return codes.reshape(-1).astype(np.int64), keys


# -- episode logs -------------------------------------------------------------

def _header(data: Dataset) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "horizon": data.horizon,
        "discount": data.discount,
        "action_cardinalities": list(data.action_cardinalities),
        "state_kind": data.state_kind,
        "n": data.n,
    }


def dumps_jsonl(data: Dataset) -> str:
    buf = io.StringIO()
    buf.write(json.dumps(_header(data)) + "\n")
    extra_names = sorted(data.extras)
    for i in range(data.n):
        ep = data.episode(i)
        rec = {"states": [list(s) if isinstance(s, tuple) else s for s in ep.states],
               "actions": list(ep.actions), "rewards": list(ep.rewards)}
        for name in extra_names:
            v = data.extras[name][i]
            rec[name] = v.tolist() if np.ndim(v) else v.item()
        buf.write(json.dumps(rec) + "\n")
    return buf.getvalue()


def save_jsonl(data: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_jsonl(data))


def _parse_lines(lines: Iterable[str]) -> tuple[dict, list[tuple[int, dict]], list[tuple[int, str]]]:
    problems: list[tuple[int, str]] = []
    header: dict = {}
    records: list[tuple[int, dict]] = []
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append((ln, f"invalid JSON ({exc.msg})"))
            continue
        if not isinstance(obj, dict):
            problems.append((ln, "record is not a JSON object"))
        elif ln == 1 and "schema" in obj:
            header = obj
        else:
            records.append((ln, obj))
    return header, records, problems


def validate_records(text: str) -> tuple[dict, list[tuple[int, dict]], list[tuple[int, str]]]:
    """Parse an episode log and collect every schema problem with its line number."""
    header, records, problems = _parse_lines(text.splitlines())
    if not header:
        problems.insert(0, (1, "missing header line with a 'schema' field"))
        return header, records, problems
    if header.get("schema") != SCHEMA_NAME:
        problems.append((1, f"unknown schema {header.get('schema')!r}"))
    if header.get("version") != SCHEMA_VERSION:
        problems.append((1, f"unsupported schema version {header.get('version')!r}"))
    horizon = header.get("horizon")
    cards = header.get("action_cardinalities")
    if not isinstance(horizon, int) or horizon < 1:
        problems.append((1, "header 'horizon' must be a positive integer"))
        return header, records, problems
    if not isinstance(cards, list) or len(cards) != horizon:
        problems.append((1, "header 'action_cardinalities' must list one size per step"))
        return header, records, problems
    kind = header.get("state_kind", DISCRETE)
    for ln, rec in records:
        for name in ("states", "actions", "rewards"):
            if name not in rec:
                problems.append((ln, f"missing field {name!r}"))
            elif not isinstance(rec[name], list) or len(rec[name]) != horizon:
                problems.append((ln, f"{name!r} must be a list of length {horizon}"))
        if any(p[0] == ln for p in problems):
            continue
        for t, (a, k) in enumerate(zip(rec["actions"], cards)):
            if not isinstance(a, int) or not 0 <= a < k:
                problems.append((ln, f"action {a!r} at step {t + 1} outside 0..{k - 1}"))
        for t, s in enumerate(rec["states"]):
            if kind == DISCRETE and not isinstance(s, int):
                problems.append((ln, f"state at step {t + 1} must be an integer index"))
            if kind == CONTINUOUS and not isinstance(s, list):
                problems.append((ln, f"state at step {t + 1} must be a feature list"))
        if not all(isinstance(r, (int, float)) for r in rec["rewards"]):
            problems.append((ln, "rewards must be numbers"))
    if not records:
        problems.append((1, "no episodes"))
    return header, records, problems


def loads_jsonl(text: str) -> Dataset:
    header, records, problems = validate_records(text)
    if problems:
        raise SchemaError(problems)
    core_fields = {"states", "actions", "rewards"}
    episodes = [Episode(tuple(tuple(s) if isinstance(s, list) else s for s in r["states"]),
                        tuple(r["actions"]), tuple(float(x) for x in r["rewards"]))
                for _, r in records]
    extra_names = sorted(set(records[0][1]) - core_fields)
    extras = {}
    for name in extra_names:
        if all(name in r for _, r in records):
            extras[name] = np.array([r[name] for _, r in records])
    return Dataset.from_episodes(episodes, float(header["discount"]),
                                 header["action_cardinalities"], extras)


def load_jsonl(path: str | Path) -> Dataset:
    return loads_jsonl(Path(path).read_text())


def weights_csv(data: Dataset, rho: np.ndarray) -> str:
    """CSV of per-episode return, per-step ratios and their product."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "return"] + [f"rho_{t + 1}" for t in range(data.horizon)] + ["weight"])
    ret = data.returns()
    for i in range(data.n):
        w.writerow([i, repr(float(ret[i]))] + [repr(float(x)) for x in rho[i]]
                   + [repr(float(np.prod(rho[i])))])
    return buf.getvalue()
