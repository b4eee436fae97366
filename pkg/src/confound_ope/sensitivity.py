"""Gamma sweeps, replication quantiles and design sensitivity.

A *scenario* knows how to draw a dataset from a seed, fit the behavior
policy, and prepare one :class:`~confound_ope.bounds.BoundProblem` per
evaluation policy.  :func:`sweep` runs a scenario (or a fixed dataset) over a
Gamma grid and many replications; :func:`design_sensitivity` reads off the
Gamma at which one policy stops being certifiably better than another.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng as rng_mod
from .autism_sim import (AutismConfig, AutismSimulator, behavior_group_columns,
                         kappa_features)
from .behavior_fit import fit_logistic, fit_tabular, split_fit
from .bounds import RHO_CAP, BoundProblem
from .core import Dataset
from .sepsis_sim import SepsisDynamicsConfig, SepsisSimulator

METHODS = ("final", "naive")
CSV_COLUMNS = ("gamma", "policy", "lower", "upper",
               "lower_q025", "lower_q975", "upper_q025", "upper_q975")


class NotSeparatedAtGammaOne(ValueError):
    """The first policy's lower bound does not exceed the second's upper bound at Gamma = 1."""


def parse_grid(text: str) -> np.ndarray:
    """Parse ``"start:stop:step"`` (inclusive) or a comma list into a Gamma grid."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"grid {text!r} must look like start:stop:step with step > 0")
        start, stop, step = parts
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        grid = start + step * np.arange(count)
    else:
        grid = np.array([float(p) for p in text.split(",") if p.strip()])
    return check_grid(np.round(grid, 12))


def check_grid(grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("gamma grid must be a non-empty list")
    if grid[0] < 1.0:
        raise ValueError("gamma values must be >= 1")
    if (np.diff(grid) <= 0).any():
        raise ValueError("gamma grid must be strictly increasing")
    return grid


# -- scenarios -----------------------------------------------------------------

@dataclass
class SepsisScenario:
    """Confounded sepsis data, tabular behavior fit and tabular kappa at ``t_star = 1``."""

    gamma_star: float = 2.0
    n: int = 20_000
    config: SepsisDynamicsConfig = field(default_factory=SepsisDynamicsConfig)
    rho_cap: float | None = RHO_CAP
    split_ratio: float | None = None
    alpha: float = 0.0
    t_star: int = 1

    @cached_property
    def simulator(self) -> SepsisSimulator:
        return SepsisSimulator(self.config)

    @property
    def policies(self) -> dict:
        return self.simulator.evaluation_policies

    def generate(self, seed: int) -> Dataset:
        return self.simulator.simulate_confounded(self.gamma_star, self.n, seed)

    def fit_behavior(self, data: Dataset):
        return fit_tabular(data, alpha=self.alpha, n_states=self.simulator.mdp.n_states)

    def problems(self, data: Dataset, seed: int = 0) -> dict[str, BoundProblem]:
        behavior, data = _fit(self.fit_behavior, data, self.split_ratio, seed)
        return {name: BoundProblem(data, behavior, pol, self.t_star, self.rho_cap)
                for name, pol in self.policies.items()}

    def true_values(self) -> dict[str, float]:
        return {k: v for k, v in self.simulator.true_values().items() if k in self.policies}


@dataclass
class AutismScenario:
    """Two-stage trial data, stratified logistic behavior fit and linear kappa at ``t_star = 2``."""

    gamma_star: float = 2.0
    n: int = 20_000
    config: AutismConfig = field(default_factory=AutismConfig)
    rho_cap: float | None = RHO_CAP
    split_ratio: float | None = None
    reg: float = 1e-4
    t_star: int = 2
    n_mc: int = 1_000_000

    @cached_property
    def simulator(self) -> AutismSimulator:
        return AutismSimulator(self.config)

    @property
    def policies(self) -> dict:
        return self.simulator.evaluation_policies

    def generate(self, seed: int) -> Dataset:
        return self.simulator.generate(self.gamma_star, self.n, seed)

    def fit_behavior(self, data: Dataset):
        return fit_logistic(data, self.reg, group_columns=behavior_group_columns())

    def problems(self, data: Dataset, seed: int = 0) -> dict[str, BoundProblem]:
        behavior, data = _fit(self.fit_behavior, data, self.split_ratio, seed)
        return {name: BoundProblem(data, behavior, pol, self.t_star, self.rho_cap,
                                   kappa="linear", featureizer=kappa_features)
                for name, pol in self.policies.items()}

    def true_values(self) -> dict[str, float]:
        return {p: self.simulator.true_value(p, self.n_mc)[0] for p in self.policies}


def _fit(fitter, data: Dataset, split_ratio: float | None, seed: int):
    if split_ratio is None:
        return fitter(data), data
    return split_fit(data, fitter, split_ratio, seed)


# -- curves ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SensitivityCurve:
    """Bounds for several policies over a Gamma grid and across replications.

    ``lower[p]`` and ``upper[p]`` have shape ``(replications, len(gammas))``;
    ``point_is[p]`` has one entry per replication.
    """

    gammas: np.ndarray
    policies: tuple[str, ...]
    lower: Mapping[str, np.ndarray]
    upper: Mapping[str, np.ndarray]
    point_is: Mapping[str, np.ndarray]
    method: str = "final"
    quantiles: tuple[float, float] = (0.025, 0.975)

    def __post_init__(self):
        check_grid(self.gammas)
        for p in self.policies:
            if self.lower[p].shape != self.upper[p].shape or self.lower[p].shape[1] != len(self.gammas):
                raise ValueError(f"bound arrays for {p!r} do not match the grid")

    @property
    def replications(self) -> int:
        return self.lower[self.policies[0]].shape[0]

    def mean_lower(self, policy: str) -> np.ndarray:
        return self.lower[policy].mean(axis=0)

    def mean_upper(self, policy: str) -> np.ndarray:
        return self.upper[policy].mean(axis=0)

    def band(self, policy: str, side: str = "lower") -> tuple[np.ndarray, np.ndarray]:
        """Replication quantiles of one side of the bound at every Gamma."""
        arr = self.lower[policy] if side == "lower" else self.upper[policy]
        return tuple(np.quantile(arr, q, axis=0) for q in self.quantiles)

    def rows(self) -> list[dict]:
        out = []
        for p in self.policies:
            lq = self.band(p, "lower")
            uq = self.band(p, "upper")
            lo, up = self.mean_lower(p), self.mean_upper(p)
            for i, g in enumerate(self.gammas):
                out.append({"gamma": float(g), "policy": p, "lower": float(lo[i]),
                            "upper": float(up[i]), "lower_q025": float(lq[0][i]),
                            "lower_q975": float(lq[1][i]), "upper_q025": float(uq[0][i]),
                            "upper_q975": float(uq[1][i])})
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate_problems(problems: Mapping[str, BoundProblem], gammas: Sequence[float],
                      methods: Sequence[str] = METHODS) -> dict:
    """``{method: {policy: (lower[G], upper[G], is)}}`` for one dataset."""
    out = {m: {} for m in methods}
    for name, prob in problems.items():
        point = prob.is_estimate()
        for m in methods:
            if m not in METHODS:
                raise ValueError(f"unknown bound method {m!r}")
            ests = [prob.bound(g) if m == "final" else prob.naive(g) for g in gammas]
            out[m][name] = (np.array([e.lower for e in ests]),
                            np.array([e.upper for e in ests]), point)
    return out


def replicate_seed(seed: int, r: int) -> int:
    return rng_mod.child_seed(seed, "replication", r)


def bootstrap_sample(data: Dataset, seed: int, r: int) -> Dataset:
    idx = rng_mod.stream(seed, "bootstrap", r).integers(0, data.n, data.n)
    return data.subset(idx)


@dataclass(frozen=True)
class _Task:
    scenario: object
    source: Dataset | None
    gammas: tuple[float, ...]
    methods: tuple[str, ...]
    seed: int
    r: int
    bootstrap: bool

    def __call__(self):
        rs = replicate_seed(self.seed, self.r)
        if self.source is None:
            data = self.scenario.generate(rs)
        elif self.bootstrap:
            data = bootstrap_sample(self.source, self.seed, self.r)
        else:
            data = self.source
        return evaluate_problems(self.scenario.problems(data, rs), self.gammas, self.methods)


def _run(task: _Task):
    return task()


def sweep(scenario, gamma_grid: Sequence[float], replications: int = 1, seed: int = 0,
          data: Dataset | None = None, bootstrap: bool = False,
          methods: Sequence[str] = METHODS, workers: int = 1) -> dict[str, SensitivityCurve]:
    """Bound every scenario policy at every Gamma, once per replication.

    Without ``data`` each replication draws a fresh dataset from the scenario
    and refits everything.  With ``data`` the dataset is fixed; replications
    then need ``bootstrap=True`` and resample episodes with replacement.
    Results are merged by replication index, so ``workers`` never changes
    the output.
    """
    grid = check_grid(gamma_grid)
    if replications < 1:
        raise ValueError("replications must be at least 1")
    if data is not None and replications > 1 and not bootstrap:
        raise ValueError("a fixed dataset needs bootstrap=True for more than one replication")
    if data is None and bootstrap:
        data = scenario.generate(seed)
    tasks = [_Task(scenario, data, tuple(grid), tuple(methods), seed, r, bootstrap and data is not None)
             for r in range(replications)]
    if workers > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, tasks))
    else:
        results = [t() for t in tasks]
    policies = tuple(results[0][methods[0]])
    curves = {}
    for m in methods:
        curves[m] = SensitivityCurve(
            gammas=grid, policies=policies,
            lower={p: np.stack([res[m][p][0] for res in results]) for p in policies},
            upper={p: np.stack([res[m][p][1] for res in results]) for p in policies},
            point_is={p: np.array([res[m][p][2] for res in results]) for p in policies},
            method=m)
    return curves


# -- design sensitivity ------------------------------------------------------------

def crossing_point(gammas: Sequence[float], gap: Sequence[float]) -> float:
    """First Gamma where ``gap`` drops to zero or below, by linear interpolation.

    ``gap[0]`` must be positive; returns ``inf`` if the gap stays positive.
    """
    g = np.asarray(gammas, dtype=float)
    d = np.asarray(gap, dtype=float)
    if d[0] <= 0:
        raise NotSeparatedAtGammaOne(f"bounds already overlap at gamma={g[0]}")
    hits = np.flatnonzero(d <= 0)
    if hits.size == 0:
        return math.inf
    i = int(hits[0])
    return float(g[i - 1] + (g[i] - g[i - 1]) * d[i - 1] / (d[i - 1] - d[i]))


def design_sensitivity(curve: SensitivityCurve, policy_a: str, policy_b: str,
                       replication: int | None = None) -> float:
    """Smallest Gamma where ``lower_a(Gamma) <= upper_b(Gamma)``.

    Uses the replication-mean curves unless ``replication`` picks one run.
    The grid must start at Gamma = 1, where ``policy_a`` has to be
    separated from ``policy_b``.
    """
    for p in (policy_a, policy_b):
        if p not in curve.policies:
            raise KeyError(f"policy {p!r} is not in the curve")
    if curve.gammas[0] != 1.0:
        raise ValueError("design sensitivity needs a grid starting at gamma = 1")
    if replication is None:
        lo, up = curve.mean_lower(policy_a), curve.mean_upper(policy_b)
    else:
        lo, up = curve.lower[policy_a][replication], curve.upper[policy_b][replication]
    return crossing_point(curve.gammas, lo - up)


def curve_from_arrays(gammas: Sequence[float], bounds: Mapping[str, tuple],
                      method: str = "final") -> SensitivityCurve:
    """Single-replication curve from ``{policy: (lower, upper)}`` arrays."""
    lower = {p: np.atleast_2d(np.asarray(v[0], dtype=float)) for p, v in bounds.items()}
    upper = {p: np.atleast_2d(np.asarray(v[1], dtype=float)) for p, v in bounds.items()}
    point = {p: np.array([np.nan]) for p in bounds}
    return SensitivityCurve(np.asarray(gammas, dtype=float), tuple(bounds), lower, upper,
                            point, method)
