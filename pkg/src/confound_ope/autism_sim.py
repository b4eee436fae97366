"""Two-stage adaptive-intervention trial with a confounded second decision.

Each episode samples a child from a fixed synthetic population, randomizes
the first intervention (A1 = +1 spoken-language intervention, -1 speech
device), observes progress at week 12, and for slow responders chooses the
second-stage action A2.  A hidden per-child effect size ``theta`` drives both
the outcome and the second-stage choice.

Action indices: step 1 maps A1 -1 -> 0, +1 -> 1; step 2 maps A2 -1 -> 0,
0 -> 1, +1 -> 2.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .core import Dataset, FunctionPolicy

A1_VALUES = np.array([-1, 1])
A2_VALUES = np.array([-1, 0, 1])
RACES = ("african_american", "caucasian", "hispanic", "asian")

# column layout of the feature states
S1_COLUMNS = ("age", "gender", *RACES, "y0")
S2_COLUMNS = ("age", "gender", *RACES, "a1", "slow", "y12", "a1_x_slow")
S2_A1, S2_SLOW, S2_Y12, S2_A1_SLOW = 6, 7, 8, 9

POLICIES = ("adaptive", "aac")


@dataclass(frozen=True)
class AutismConfig:
    """Outcome, progress and population parameters.

    Outcome: ``Y = eta31 @ X + eta22 * Y0 + eta33 * A1 + eta34 * Y12
    - 2 * theta * (1 - R) * (A1 + 1) * A2 + noise``.  Week-12 utterances are
    ``Y12 = Y0 + gain`` with ``gain ~ N(gain_mean + gain_a1 * A1, gain_sd)``;
    a child is a slow responder when ``gain < slow_threshold``.

    ``responder_polarity="responder"`` reads R as the fast-responder flag, so
    ``1 - R`` is one for slow responders; ``"slow"`` reads R as the
    slow-responder flag.  ``tilted_a2`` is the second-stage action favored for
    children with ``theta >= theta0``.
    """

    eta31: tuple[float, ...] = (1.0, 2.0, -1.0, 0.5, -0.5, 1.0)
    eta22: float = 0.3
    eta33: float = -1.0
    eta34: float = 0.8
    theta0: float = 3.8
    sigma_theta: float = 5.0
    noise_sd: float = 5.0
    gain_mean: float = 12.0
    gain_a1: float = -2.0
    gain_sd: float = 8.0
    slow_threshold: float = 12.0
    age_low: float = 5.0
    age_high: float = 9.0
    p_male: float = 0.85
    race_probs: tuple[float, ...] = (0.2, 0.45, 0.15, 0.15)
    y0_log_mean: float = 3.2
    y0_log_sd: float = 0.5
    n_population: int = 300
    population_seed: int = 2016
    responder_polarity: str = "responder"
    tilted_a2: int = -1
    name: str = "custom"

    def __post_init__(self):
        if len(self.eta31) != 6:
            raise ValueError("eta31 needs one coefficient per covariate (6)")
        if self.noise_sd <= 0 or self.gain_sd <= 0:
            raise ValueError("noise_sd and gain_sd must be positive")
        if self.sigma_theta < 0:
            raise ValueError("sigma_theta must be nonnegative")
        if self.n_population < 1:
            raise ValueError("n_population must be at least 1")
        if len(self.race_probs) != 4 or min(self.race_probs) < 0 or sum(self.race_probs) > 1 + 1e-12:
            raise ValueError("race_probs must be four probabilities summing to at most one")
        if self.responder_polarity not in ("responder", "slow"):
            raise ValueError("responder_polarity must be 'responder' or 'slow'")
        if self.tilted_a2 not in (-1, 1):
            raise ValueError("tilted_a2 must be -1 or +1")
        if not 0 <= self.p_male <= 1 or self.age_high <= self.age_low:
            raise ValueError("bad population parameters")

    @classmethod
    def from_dict(cls, obj: dict) -> "AutismConfig":
        obj = dict(obj)
        for key in ("eta31", "race_probs"):
            if key in obj:
                obj[key] = tuple(float(x) for x in obj[key])
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown autism config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_toml(cls, path: str | Path) -> "AutismConfig":
        from ._toml import load_toml
        obj = load_toml(path)
        return cls.from_dict(obj.get("autism", obj))

    @classmethod
    def preset(cls, name: str) -> "AutismConfig":
        """Load a shipped preset (``case1`` or ``case2``)."""
        from ._toml import loads_toml
        try:
            text = resources.files("confound_ope.presets").joinpath(f"autism_{name}.toml").read_text()
        except FileNotFoundError:
            raise ValueError(f"unknown autism preset {name!r}; choose case1 or case2") from None
        return cls.from_dict(loads_toml(text)["autism"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta31"] = list(self.eta31)
        d["race_probs"] = list(self.race_probs)
        return d


@dataclass(frozen=True, eq=False)
class Population:
    """Fixed synthetic cohort: mean-centered covariates ``x`` and baseline ``y0``."""

    x: np.ndarray
    y0: np.ndarray


def make_population(config: AutismConfig) -> Population:
    g = rng_mod.stream(config.population_seed, "autism/population")
    n = config.n_population
    age = g.uniform(config.age_low, config.age_high, n)
    male = (g.random(n) < config.p_male).astype(float)
    probs = np.append(config.race_probs, 1.0 - sum(config.race_probs))
    race = g.choice(5, size=n, p=probs / probs.sum())
    ind = np.stack([(race == k).astype(float) for k in range(4)], axis=1)
    raw = np.column_stack([age, male, ind])
    x = raw - raw.mean(axis=0)
    y0 = np.exp(g.normal(config.y0_log_mean, config.y0_log_sd, n))
    return Population(x, y0)


def _normal(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    # Box-Muller keeps every draw a function of its own row of uniforms
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def a2_probability(gamma_star: float) -> tuple[float, float]:
    """P(tilted action | theta >= theta0) and P(tilted action | theta < theta0)."""
    if gamma_star < 1.0:
        raise ValueError("gamma_star must be >= 1")
    r = np.sqrt(gamma_star)
    return r / (1.0 + r), 1.0 / (1.0 + r)


@dataclass
class AutismSimulator:
    config: AutismConfig = field(default_factory=AutismConfig)

    @cached_property
    def population(self) -> Population:
        return make_population(self.config)

    def outcome(self, x, y0, a1, y12, slow, a2, theta, noise) -> np.ndarray:
        c = self.config
        r = 1.0 - slow if c.responder_polarity == "responder" else slow
        return (x @ np.asarray(c.eta31) + c.eta22 * y0 + c.eta33 * a1 + c.eta34 * y12
                - 2.0 * theta * (1.0 - r) * (a1 + 1.0) * a2 + c.noise_sd * noise)

    def _draws(self, n: int, seed: int, purpose: str):
        u = rng_mod.episode_uniforms(seed, purpose, n, 8)
        idx = np.minimum((u[:, 0] * self.config.n_population).astype(np.int64),
                         self.config.n_population - 1)
        return u, idx

    def generate(self, gamma_star: float, n: int, seed: int) -> Dataset:
        """Draw ``n`` confounded trial episodes."""
        if n < 1:
            raise ValueError("n must be positive")
        c = self.config
        p_hi, p_lo = a2_probability(gamma_star)
        u, idx = self._draws(n, seed, "autism/episodes")
        x, y0 = self.population.x[idx], self.population.y0[idx]
        a1 = np.where(u[:, 1] < 0.5, -1.0, 1.0)
        gain = c.gain_mean + c.gain_a1 * a1 + c.gain_sd * _normal(u[:, 2], u[:, 3])
        y12 = y0 + gain
        slow = (gain < c.slow_threshold).astype(float)
        high = u[:, 4] < 0.5
        theta = np.where(high, c.theta0 + c.sigma_theta, c.theta0 - c.sigma_theta)
        p_tilt = np.where(high, p_hi, p_lo)
        tilt = u[:, 5] < p_tilt
        a2 = np.where(slow == 1.0, np.where(tilt, c.tilted_a2, -c.tilted_a2), 0).astype(float)
        y = self.outcome(x, y0, a1, y12, slow, a2, theta, _normal(u[:, 6], u[:, 7]))
        s1 = np.column_stack([x, y0])
        s2 = np.column_stack([x, a1, slow, y12, a1 * slow])
        actions = np.column_stack([(a1 > 0).astype(np.int64), (a2 + 1).astype(np.int64)])
        rewards = np.column_stack([np.zeros(n), y])
        # true behavior probability of A2 given everything, and given the observed history
        p_obs = np.where(slow == 1.0, np.where(tilt, p_tilt, 1.0 - p_tilt), 1.0)
        p_marg = np.where(slow == 1.0, 0.5, 1.0)
        extras = {"theta": theta,
                  "behavior_prob": np.column_stack([np.full(n, 0.5), p_marg]),
                  "behavior_prob_conditional": np.column_stack([np.full(n, 0.5), p_obs])}
        return Dataset((s1, s2), actions, rewards, 1.0, (2, 3), extras)

    def true_value(self, policy: str, n_mc: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
        """Monte Carlo value of ``policy`` with its standard error."""
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        c = self.config
        u, idx = self._draws(n_mc, seed, "autism/truth")
        x, y0 = self.population.x[idx], self.population.y0[idx]
        a1 = np.full(n_mc, 1.0 if policy == "adaptive" else -1.0)
        gain = c.gain_mean + c.gain_a1 * a1 + c.gain_sd * _normal(u[:, 2], u[:, 3])
        y12 = y0 + gain
        slow = (gain < c.slow_threshold).astype(float)
        theta = np.where(u[:, 4] < 0.5, c.theta0 + c.sigma_theta, c.theta0 - c.sigma_theta)
        a2 = np.where(slow == 1.0, -1.0, 0.0)
        y = self.outcome(x, y0, a1, y12, slow, a2, theta, _normal(u[:, 6], u[:, 7]))
        return float(y.mean()), float(y.std(ddof=1) / np.sqrt(n_mc))

    @property
    def evaluation_policies(self) -> dict[str, FunctionPolicy]:
        return {"adaptive": adaptive_policy(), "aac": aac_policy()}


def _second_stage(data: Dataset) -> np.ndarray:
    slow = data.states[1][:, S2_SLOW] == 1.0
    out = np.zeros((data.n, 3))
    out[slow, 0] = 1.0
    out[~slow, 1] = 1.0
    return out


def adaptive_policy() -> FunctionPolicy:
    """Start with the spoken-language intervention; add the device for slow responders."""
    def probs(data: Dataset, step: int) -> np.ndarray:
        if step == 0:
            return np.tile([0.0, 1.0], (data.n, 1))
        return _second_stage(data)
    return FunctionPolicy(probs, "adaptive")


def aac_policy() -> FunctionPolicy:
    """Use the speech device throughout."""
    def probs(data: Dataset, step: int) -> np.ndarray:
        if step == 0:
            return np.tile([1.0, 0.0], (data.n, 1))
        return _second_stage(data)
    return FunctionPolicy(probs, "aac")


def generate_autism(config: AutismConfig, gamma_star: float, n: int, seed: int) -> Dataset:
    return AutismSimulator(config).generate(gamma_star, n, seed)


def true_policy_value_autism(config: AutismConfig, policy: str, n_mc: int = 1_000_000,
                             seed: int = 0) -> tuple[float, float]:
    return AutismSimulator(config).true_value(policy, n_mc, seed)


def kappa_features(data: Dataset, t: int) -> np.ndarray:
    """Intercept plus the state at 1-based step ``t`` (the second-stage history summary)."""
    s = data.states[t - 1]
    s = s[:, None] if s.ndim == 1 else s
    return np.hstack([np.ones((data.n, 1)), s])


def behavior_group_columns() -> list[int | None]:
    """Strata for the logistic behavior fit: none at step 1, A1 x slow at step 2."""
    return [None, S2_A1_SLOW]


def with_overrides(config: AutismConfig, **kw) -> AutismConfig:
    return replace(config, **kw)
