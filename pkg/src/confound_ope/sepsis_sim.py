"""Confounded sepsis-management simulator on a 1440-state tabular MDP.

Patients are described by four vitals, a diabetes flag and the three active
treatments.  The only confounded decision is the first one: whether the care
team starts antibiotics depends on a hidden health surrogate ``U`` built from
the same uniforms that drive every later transition.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .core import Dataset
from .tabular_mdp import (
    TabularMDP,
    TabularPolicy,
    exact_policy_value,
    inverse_transform_step,
    order_successors,
    policy_iteration,
    sample_actions,
    soften,
    value_iteration,
)

HR_LEVELS = ("low", "normal", "high")
BP_LEVELS = ("low", "normal", "high")
O2_LEVELS = ("low", "normal")
GLUCOSE_LEVELS = ("very_low", "low", "normal", "high", "very_high")
NORMAL = {"hr": 1, "bp": 1, "o2": 1, "glucose": 2}

N_STATES = 2 * 3 * 3 * 2 * 5 * 8  # 1440
DEATH = N_STATES
DISCHARGE = N_STATES + 1
N_ACTIONS = 8

ABX, VASO, VENT = 4, 2, 1  # action bit values


@dataclass(frozen=True)
class SepsisState:
    heart_rate: int
    blood_pressure: int
    oxygen: int
    glucose: int
    diabetic: bool
    antibiotics_on: bool = False
    vasopressors_on: bool = False
    ventilation_on: bool = False

    @property
    def index(self) -> int:
        idx = int(self.diabetic)
        for value, size in ((self.heart_rate, 3), (self.blood_pressure, 3), (self.oxygen, 2),
                            (self.glucose, 5), (self.antibiotics_on, 2),
                            (self.vasopressors_on, 2), (self.ventilation_on, 2)):
            if not 0 <= int(value) < size:
                raise ValueError(f"level {value} out of range")
            idx = idx * size + int(value)
        return idx

    @classmethod
    def from_index(cls, index: int) -> "SepsisState":
        if not 0 <= index < N_STATES:
            raise ValueError(f"state index {index} outside 0..{N_STATES - 1}")
        vals = []
        for size in (2, 2, 2, 5, 2, 3, 3):
            index, r = divmod(index, size)
            vals.append(r)
        vent, vaso, abx, glu, o2, bp, hr = vals
        return cls(hr, bp, o2, glu, bool(index), bool(abx), bool(vaso), bool(vent))

    @property
    def n_abnormal(self) -> int:
        return (int(self.heart_rate != NORMAL["hr"]) + int(self.blood_pressure != NORMAL["bp"])
                + int(self.oxygen != NORMAL["o2"]) + int(self.glucose != NORMAL["glucose"]))

    @property
    def on_treatment(self) -> bool:
        return self.antibiotics_on or self.vasopressors_on or self.ventilation_on


@dataclass(frozen=True)
class SepsisAction:
    antibiotics: bool
    vasopressors: bool
    ventilation: bool

    @property
    def index(self) -> int:
        return ABX * self.antibiotics + VASO * self.vasopressors + VENT * self.ventilation

    @classmethod
    def from_index(cls, index: int) -> "SepsisAction":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index {index} outside 0..7")
        return cls(bool(index & ABX), bool(index & VASO), bool(index & VENT))


@dataclass(frozen=True)
class SepsisDynamicsConfig:
    """Transition constants of the simulator.

    Vitals not acted on by an active treatment drift one level up or down with
    the ``fluct_*`` probabilities.  Treatment effects and withdrawal effects
    (a treatment that was on in the previous state and is now off) replace the
    drift for the vitals they act on.  ``initial_states`` lists admission
    presentations as ``(diabetic, hr, bp, o2, glucose, weight)`` with all
    treatments off.
    """

    fluct_hr: float = 0.1
    fluct_bp: float = 0.1
    fluct_o2: float = 0.1
    fluct_glucose: float = 0.1
    fluct_glucose_diabetic: float = 0.3
    abx_hr_high_to_normal: float = 0.5
    abx_bp_high_to_normal: float = 0.5
    abx_withdraw_hr_normal_to_high: float = 0.1
    abx_withdraw_bp_normal_to_high: float = 0.5
    vent_o2_low_to_normal: float = 0.7
    vent_withdraw_o2_normal_to_low: float = 0.1
    vaso_bp_up: float = 0.7
    vaso_diabetic_bp_up1: float = 0.5
    vaso_diabetic_bp_up2: float = 0.4
    vaso_diabetic_glucose_up: float = 0.5
    vaso_withdraw_bp_down: float = 0.1
    soften_epsilon: float = 0.05
    behavior_optimal_prob: float = 0.85
    horizon: int = 5
    discount: float = 0.99
    initial_states: tuple = (
        (0, 2, 2, 1, 2, 1.0),
        (0, 2, 1, 0, 2, 1.0),
        (0, 1, 2, 0, 2, 1.0),
        (1, 1, 2, 1, 2, 1.0),
    )

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("horizon", "discount", "initial_states"):
                continue
            v = getattr(self, f.name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f.name} must be a probability, got {v}")
        if self.vaso_diabetic_bp_up1 + self.vaso_diabetic_bp_up2 > 1.0:
            raise ValueError("diabetic vasopressor effects exceed total probability one")
        if self.fluct_glucose_diabetic > 0.5 or max(self.fluct_hr, self.fluct_bp, self.fluct_o2,
                                                     self.fluct_glucose) > 0.5:
            raise ValueError("drift probabilities must be at most 0.5 per direction")
        if not self.initial_states:
            raise ValueError("need at least one initial presentation")
        if self.horizon < 1 or not 0.0 < self.discount <= 1.0:
            raise ValueError("bad horizon or discount")

    @classmethod
    def from_dict(cls, obj: dict) -> "SepsisDynamicsConfig":
        obj = dict(obj)
        if "initial_states" in obj:
            obj["initial_states"] = tuple(tuple(x) for x in obj["initial_states"])
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown sepsis config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_toml(cls, path: str | Path) -> "SepsisDynamicsConfig":
        from ._toml import load_toml
        obj = load_toml(path)
        return cls.from_dict(obj.get("dynamics", obj))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_states"] = [list(x) for x in self.initial_states]
        return d


# -- per-vital kernels ----------------------------------------------------------

def _drift(size: int, p: float) -> np.ndarray:
    K = np.zeros((size, size))
    for i in range(size):
        up, down = (p if i < size - 1 else 0.0), (p if i > 0 else 0.0)
        K[i, i] = 1.0 - up - down
        if i < size - 1:
            K[i, i + 1] = up
        if i > 0:
            K[i, i - 1] = down
    return K


def _move(size: int, moves: dict[int, list[tuple[int, float]]]) -> np.ndarray:
    """Kernel that moves level ``i`` to ``j`` w.p. ``p`` for the listed entries."""
    K = np.eye(size)
    for i, targets in moves.items():
        for j, p in targets:
            K[i, i] -= p
            K[i, j] += p
    return K


def _vital_kernels(cfg: SepsisDynamicsConfig, diabetic: bool, prev: SepsisAction, act: SepsisAction):
    """Transition matrices for (hr, bp, o2, glucose) under one action."""
    hr_k, bp_k, o2_k, gl_k = [], [], [], []
    if act.antibiotics:
        hr_k.append(_move(3, {2: [(1, cfg.abx_hr_high_to_normal)]}))
        bp_k.append(_move(3, {2: [(1, cfg.abx_bp_high_to_normal)]}))
    elif prev.antibiotics:
        hr_k.append(_move(3, {1: [(2, cfg.abx_withdraw_hr_normal_to_high)]}))
        bp_k.append(_move(3, {1: [(2, cfg.abx_withdraw_bp_normal_to_high)]}))
    if act.ventilation:
        o2_k.append(_move(2, {0: [(1, cfg.vent_o2_low_to_normal)]}))
    elif prev.ventilation:
        o2_k.append(_move(2, {1: [(0, cfg.vent_withdraw_o2_normal_to_low)]}))
    if act.vasopressors:
        if diabetic:
            p1, p2 = cfg.vaso_diabetic_bp_up1, cfg.vaso_diabetic_bp_up2
            bp_k.append(_move(3, {0: [(1, p1), (2, p2)], 1: [(2, p1 + p2)]}))
            g = cfg.vaso_diabetic_glucose_up
            gl_k.append(_move(5, {i: [(i + 1, g)] for i in range(4)}))
        else:
            p = cfg.vaso_bp_up
            bp_k.append(_move(3, {0: [(1, p)], 1: [(2, p)]}))
    elif prev.vasopressors:
        p = cfg.vaso_withdraw_bp_down
        bp_k.append(_move(3, {1: [(0, p)], 2: [(1, p)]}))
    drift_gl = cfg.fluct_glucose_diabetic if diabetic else cfg.fluct_glucose
    out = []
    for kernels, size, p in ((hr_k, 3, cfg.fluct_hr), (bp_k, 3, cfg.fluct_bp),
                             (o2_k, 2, cfg.fluct_o2), (gl_k, 5, drift_gl)):
        K = _drift(size, p) if not kernels else np.linalg.multi_dot([np.eye(size)] + kernels)
        out.append(K)
    return out


def build_sepsis_mdp(config: SepsisDynamicsConfig | None = None) -> TabularMDP:
    """1440 patient states plus absorbing death (index 1440) and discharge (1441)."""
    cfg = config or SepsisDynamicsConfig()
    S = N_STATES + 2
    rows: dict[tuple[int, int], list[tuple[int, float, float]]] = {}
    for s in range(N_STATES):
        st = SepsisState.from_index(s)
        prev = SepsisAction(st.antibiotics_on, st.vasopressors_on, st.ventilation_on)
        if st.n_abnormal >= 3:
            for a in range(N_ACTIONS):
                rows[s, a] = [(DEATH, 1.0, -1.0)]
            continue
        if st.n_abnormal == 0 and not st.on_treatment:
            for a in range(N_ACTIONS):
                rows[s, a] = [(DISCHARGE, 1.0, 1.0)]
            continue
        for a in range(N_ACTIONS):
            act = SepsisAction.from_index(a)
            K_hr, K_bp, K_o2, K_gl = _vital_kernels(cfg, st.diabetic, prev, act)
            out: dict[int, list[float]] = {}
            for hr, bp, o2, gl in itertools.product(
                    np.flatnonzero(K_hr[st.heart_rate]), np.flatnonzero(K_bp[st.blood_pressure]),
                    np.flatnonzero(K_o2[st.oxygen]), np.flatnonzero(K_gl[st.glucose])):
                p = (K_hr[st.heart_rate, hr] * K_bp[st.blood_pressure, bp]
                     * K_o2[st.oxygen, o2] * K_gl[st.glucose, gl])
                nxt = SepsisState(int(hr), int(bp), int(o2), int(gl), st.diabetic,
                                  act.antibiotics, act.vasopressors, act.ventilation)
                if nxt.n_abnormal >= 3:
                    key, r = DEATH, -1.0
                elif nxt.n_abnormal == 0 and a == 0:
                    key, r = DISCHARGE, 1.0
                else:
                    key, r = nxt.index, 0.0
                cell = out.setdefault(key, [0.0, r])
                cell[0] += p
            rows[s, a] = [(k, p, r) for k, (p, r) in sorted(out.items())]
    width = max(len(v) for v in rows.values())
    succ = np.zeros((S, N_ACTIONS, width), dtype=np.int64)
    probs = np.zeros((S, N_ACTIONS, width))
    rew = np.zeros((S, N_ACTIONS, width))
    for (s, a), cells in rows.items():
        succ[s, a, :] = s
        for k, (nxt, p, r) in enumerate(cells):
            succ[s, a, k], probs[s, a, k], rew[s, a, k] = nxt, p, r
        probs[s, a] /= probs[s, a].sum()
    for s in (DEATH, DISCHARGE):
        succ[s] = s
        probs[s, :, 0] = 1.0
    init = np.zeros(S)
    for diabetic, hr, bp, o2, gl, w in cfg.initial_states:
        init[SepsisState(hr, bp, o2, gl, bool(diabetic)).index] += w
    absorbing = np.zeros(S, dtype=bool)
    absorbing[[DEATH, DISCHARGE]] = True
    return TabularMDP(succ, probs, rew, init / init.sum(), absorbing, cfg.horizon, cfg.discount)


# -- policies -------------------------------------------------------------------

def _shift(table: np.ndarray, to_on: bool, keep: np.ndarray) -> np.ndarray:
    """Move each action's mass across the antibiotics bit."""
    out = np.zeros_like(table)
    for a in range(N_ACTIONS):
        target = (a | ABX) if to_on else (a & ~ABX)
        out[..., target] += table[..., a]
    out[..., keep, :] = table[..., keep, :]
    return out


def derive_w_wo(soft_optimal: TabularPolicy, absorbing: np.ndarray | None = None):
    """First-step "with antibiotics" (W) and "without antibiotics" (WO) policies.

    Both equal ``soft_optimal`` from the second step on.
    """
    if not soft_optimal.time_indexed:
        raise ValueError("soft-optimal policy must be time-indexed to keep later steps intact")
    probs = soft_optimal.probs
    keep = np.zeros(probs.shape[1], dtype=bool) if absorbing is None else absorbing
    w, wo = probs.copy(), probs.copy()
    w[0] = _shift(probs[0], True, keep)
    wo[0] = _shift(probs[0], False, keep)
    return TabularPolicy(w, "W"), TabularPolicy(wo, "WO")


def flip_vasopressors(table: np.ndarray, keep: np.ndarray) -> np.ndarray:
    out = table[..., [a ^ VASO for a in range(N_ACTIONS)]]
    out[..., keep, :] = table[..., keep, :]
    return out


def confounding_probs(gamma_star: float) -> tuple[float, float]:
    """P(follow W | U > u0) and P(follow W | U <= u0)."""
    if gamma_star < 1.0:
        raise ValueError("gamma_star must be >= 1")
    r = np.sqrt(gamma_star)
    return r / (1.0 + r), 1.0 / (1.0 + r)


@dataclass
class SepsisSimulator:
    """Bundles the MDP, planned policies and the confounded data generator."""

    config: SepsisDynamicsConfig = field(default_factory=SepsisDynamicsConfig)
    mdp: TabularMDP | None = None

    def __post_init__(self):
        if self.mdp is None:
            self.mdp = build_sepsis_mdp(self.config)

    @cached_property
    def optimal_values(self) -> np.ndarray:
        V, _ = value_iteration(self.mdp)
        return V

    @cached_property
    def optimal(self) -> TabularPolicy:
        return policy_iteration(self.mdp)

    @cached_property
    def soft_optimal(self) -> TabularPolicy:
        return soften(self.optimal, self.config.soften_epsilon, keep_rows=self.mdp.absorbing)

    @cached_property
    def w_wo(self) -> tuple[TabularPolicy, TabularPolicy]:
        return derive_w_wo(self.soft_optimal, self.mdp.absorbing)

    @property
    def evaluation_policies(self) -> dict[str, TabularPolicy]:
        w, wo = self.w_wo
        return {"WO": wo, "W": w, "optimal": self.optimal}

    @cached_property
    def later_behavior(self) -> np.ndarray:
        """``(T, S, A)`` behavior tables; row 0 is unused (confounded step)."""
        soft = self.soft_optimal.per_step(self.mdp.horizon)
        q = self.config.behavior_optimal_prob
        return q * soft + (1.0 - q) * flip_vasopressors(soft, self.mdp.absorbing)

    @property
    def u0(self) -> float:
        # U is a sum of T iid uniforms whatever the policy, so its median is T / 2
        return self.mdp.horizon / 2.0

    def marginal_behavior(self) -> TabularPolicy:
        """True behavior policy with the confounder marginalized out."""
        w, wo = self.w_wo
        tables = self.later_behavior.copy()
        tables[0] = 0.5 * (w.table(0) + wo.table(0))
        return TabularPolicy(tables, "behavior")

    @cached_property
    def _ordered(self):
        """Successor lists sorted worst-to-best by ``r + gamma V*(s')`` per step."""
        mdp = self.mdp
        out = []
        for t in range(mdp.horizon):
            key = mdp.rewards + mdp.discount * self.optimal_values[t + 1][mdp.successors]
            out.append(order_successors(mdp, key, mdp.rewards))
        return out

    def true_values(self) -> dict[str, float]:
        vals = {name: exact_policy_value(self.mdp, pol) for name, pol in self.evaluation_policies.items()}
        vals["soft_optimal"] = exact_policy_value(self.mdp, self.soft_optimal)
        return vals

    def simulate_confounded(self, gamma_star: float, n: int, seed: int) -> Dataset:
        return simulate_confounded(self, gamma_star, n, seed)


def simulate_confounded(sim: SepsisSimulator, gamma_star: float, n: int, seed: int) -> Dataset:
    """Generate ``n`` episodes with first-step confounding of strength ``gamma_star``.

    Transition noise at step t is the uniform ``U_t``, applied by inverse
    transform over successors sorted worst-to-best, so ``U = sum_t U_t`` is a
    surrogate for how well the patient does.  At the first step the care team
    follows W w.p. sqrt(G)/(1+sqrt(G)) when ``U > u0`` and 1/(1+sqrt(G))
    otherwise, and WO the rest of the time.
    """
    if n < 1:
        raise ValueError("n must be positive")
    p_hi, p_lo = confounding_probs(gamma_star)
    mdp = sim.mdp
    T = mdp.horizon
    u = rng_mod.episode_uniforms(seed, "sepsis/episodes", n, 2 * T + 2)
    trans_u = u[:, 2 + T:2 + 2 * T]
    u_sum = trans_u.sum(axis=1)
    follow_w = u[:, 1] < np.where(u_sum > sim.u0, p_hi, p_lo)
    q_cond = np.where(u_sum > sim.u0, p_hi, p_lo)

    s = np.searchsorted(np.cumsum(mdp.initial_distribution), u[:, 0], side="right")
    s = np.minimum(s, mdp.n_states - 1)
    w, wo = sim.w_wo
    W1, WO1 = w.table(0), wo.table(0)
    states, actions, rewards = [], np.zeros((n, T), dtype=np.int64), np.zeros((n, T))
    pb_marg, pb_cond = np.zeros((n, T)), np.zeros((n, T))
    rows = np.arange(n)
    for t in range(T):
        states.append(s)
        if t == 0:
            table = np.where(follow_w[:, None], W1[s], WO1[s])
            a = sample_actions(table, u[:, 2])
            pb_marg[:, 0] = 0.5 * (W1[s, a] + WO1[s, a])
            pb_cond[:, 0] = q_cond * W1[s, a] + (1.0 - q_cond) * WO1[s, a]
        else:
            table = sim.later_behavior[t][s]
            a = sample_actions(table, u[:, 2 + t])
            pb_marg[:, t] = pb_cond[:, t] = table[rows, a]
        actions[:, t] = a
        succ, cum, rew = sim._ordered[t]
        s, rewards[:, t] = inverse_transform_step(succ, cum, rew, s, a, trans_u[:, t])
    extras = {"behavior_prob": pb_marg, "behavior_prob_conditional": pb_cond,
              "u_sum": u_sum, "followed_w": follow_w.astype(np.int64)}
    return Dataset(tuple(states), actions, rewards, mdp.discount, (N_ACTIONS,) * T, extras)
