"""Importance-sampling estimates and bounds under single-decision confounding.

The confounded step ``t_star`` is 1-based.  Lower bounds combine a per-action
adjustment ``kappa(H; a)`` (a weighted Gamma-expectile of the downstream
weighted return) with the observed-action part of the importance-sampling
estimator.  Upper bounds are the negated lower bound of the negated returns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import Dataset, Policy, check_behavior, history_codes, history_matrix, observed_probs

BISECT_TOL = 1e-10
LINEAR_GRAD_TOL = 1e-7
LINEAR_RIDGE = 1e-8
LINEAR_MAX_ITERS = 500
RHO_CAP = 100.0


class EstimationError(RuntimeError):
    """A bound cannot be computed from the supplied data."""


class EmptyAction(EstimationError):
    pass


class MissingKappa(EstimationError):
    pass


@dataclass(frozen=True)
class ConfoundingSpec:
    """Where confounding acts (1-based ``t_star``) and how strongly (``gamma``).

    ``gammas`` optionally gives one level per step for the naive bound; when
    absent the naive bound uses ``gamma`` at ``t_star`` and 1 elsewhere.
    """

    t_star: int
    gamma: float
    gammas: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.t_star < 1:
            raise ValueError("t_star is 1-based and must be >= 1")
        if self.gammas is not None and min(self.gammas) < 1.0:
            raise ValueError("every per-step gamma must be >= 1")

    def step_gammas(self, horizon: int) -> np.ndarray:
        if self.t_star > horizon:
            raise ValueError(f"t_star={self.t_star} exceeds horizon {horizon}")
        if self.gammas is not None:
            if len(self.gammas) != horizon:
                raise ValueError("need one gamma per step")
            return np.asarray(self.gammas, dtype=float)
        g = np.ones(horizon)
        g[self.t_star - 1] = self.gamma
        return g

    def with_gamma(self, gamma: float) -> "ConfoundingSpec":
        return ConfoundingSpec(self.t_star, gamma)


# -- asymmetric squared loss ------------------------------------------------------

def asym_loss(z: np.ndarray, gamma: float) -> np.ndarray:
    """``0.5 * (gamma * min(z, 0)**2 + max(z, 0)**2)``."""
    z = np.asarray(z, dtype=float)
    return 0.5 * np.where(z < 0, gamma * z * z, z * z)


def asym_loss_grad(z: np.ndarray, gamma: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.where(z < 0, gamma * z, z)


def expectile_bisection(z: np.ndarray, w: np.ndarray, gamma: float, tol: float = BISECT_TOL) -> float:
    """Root of ``sum w * l'(z - k)`` in ``k`` by bisection on ``[min z - 1, max z + 1]``."""
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    if z.size == 0:
        raise EmptyAction("expectile of an empty sample")
    lo, hi = z.min() - 1.0, z.max() + 1.0
    total = w.sum()
    while hi - lo > 1e-15 * max(1.0, abs(lo), abs(hi)):
        mid = 0.5 * (lo + hi)
        g = float(np.dot(w, asym_loss_grad(z - mid, gamma))) / total
        if abs(g) < tol:
            return mid
        if g > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def grouped_expectiles(codes: np.ndarray, z: np.ndarray, w: np.ndarray, gamma: float,
                       n_groups: int) -> np.ndarray:
    """Exact weighted Gamma-expectile of ``z`` within every group.

    The first-order condition ``sum_i w_i (z_i - k) c_i(k) = 0`` with
    ``c_i = gamma`` below ``k`` and ``1`` above is piecewise linear in ``k``,
    so after sorting each group the root has a closed form on the right
    segment.  Groups without samples get NaN.
    """
    out = np.full(n_groups, np.nan)
    if z.size == 0:
        return out
    order = np.lexsort((z, codes))
    c, zs, ws = codes[order], z[order], w[order]
    counts = np.bincount(c, minlength=n_groups)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cw = np.cumsum(ws)
    cwz = np.cumsum(ws * zs)
    base_w = np.where(starts > 0, cw[starts - 1], 0.0)[c]
    base_wz = np.where(starts > 0, cwz[starts - 1], 0.0)[c]
    end = starts + counts - 1
    tot_w = cw[end][c] - base_w
    tot_wz = cwz[end][c] - base_wz
    lo_w = cw - base_w  # weight of samples at or below this one (within group)
    lo_wz = cwz - base_wz
    # first-order condition evaluated at k = z_j
    g = (tot_wz - lo_wz) - zs * (tot_w - lo_w) + gamma * (lo_wz - zs * lo_w)
    scale = np.abs(ws * zs).max() + 1.0
    nonneg = g >= -1e-13 * scale * (tot_w + 1.0)
    n_ok = np.maximum(np.bincount(c, weights=nonneg.astype(float), minlength=n_groups), 1).astype(np.int64)
    has = counts > 0
    j = (starts + n_ok - 1)[has]
    lw, lwz = lo_w[j], lo_wz[j]
    hw, hwz = tot_w[j] - lw, tot_wz[j] - lwz
    out[has] = (hwz + gamma * lwz) / (hw + gamma * lw)
    # clamp into the segment to remove rounding drift
    nxt = np.minimum(j + 1, len(zs) - 1)
    upper = np.where(j + 1 < (starts + counts)[has], zs[nxt], np.inf)
    out[has] = np.clip(out[has], zs[j], upper)
    return out


def expectile(z: np.ndarray, w: np.ndarray | None, gamma: float) -> float:
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise EmptyAction("expectile of an empty sample")
    w = np.ones_like(z) if w is None else np.asarray(w, dtype=float)
    return float(grouped_expectiles(np.zeros(z.size, dtype=np.int64), z, w, gamma, 1)[0])


# -- kappa models -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularKappa:
    """One kappa value per (history bucket, action).

    ``values[c, a]`` belongs to the bucket whose history row is ``keys[c]``.
    Buckets with no sample of action ``a`` hold the pooled expectile of that
    action; ``empty_buckets`` counts them.
    """

    values: np.ndarray
    keys: np.ndarray
    gamma: float
    empty_buckets: int = 0

    def predict(self, data: Dataset, t_star: int) -> np.ndarray:
        rows = history_matrix(data, t_star)
        index = {tuple(r): i for i, r in enumerate(self.keys)}
        codes = np.array([index.get(tuple(r), -1) for r in rows])
        if (codes < 0).any():
            pooled = np.nanmean(self.values, axis=0)
            out = np.where((codes >= 0)[:, None], self.values[np.maximum(codes, 0)], pooled)
            return out
        return self.values[codes]


@dataclass(frozen=True, eq=False)
class LinearKappa:
    """kappa(H; a) = features(H) @ coef[:, a]."""

    coef: np.ndarray
    gamma: float
    featureizer: Callable[[Dataset, int], np.ndarray]
    iterations: tuple[int, ...] = ()
    losses: tuple[float, ...] = ()

    def predict(self, data: Dataset, t_star: int) -> np.ndarray:
        return self.featureizer(data, t_star) @ self.coef


def history_features(data: Dataset, t: int) -> np.ndarray:
    """Intercept followed by the flattened history up to 1-based step ``t``."""
    H = history_matrix(data, t)
    return np.hstack([np.ones((data.n, 1)), H])


def single_bucket(data: Dataset, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Put every history in one bucket (tabular analogue of an intercept-only model)."""
    return np.zeros(data.n, dtype=np.int64), np.zeros((1, 0))


def intercept_only(data: Dataset, t: int) -> np.ndarray:
    return np.ones((data.n, 1))


def linear_kappa_objective(theta, X, z, w, gamma, n_total, ridge=LINEAR_RIDGE):
    r = z - X @ theta
    pen = ridge * float(theta[1:] @ theta[1:]) if theta.size > 1 else 0.0
    return float(np.dot(w, asym_loss(r, gamma))) / n_total + 0.5 * pen


def solve_linear_expectile(X: np.ndarray, z: np.ndarray, w: np.ndarray, gamma: float,
                           n_total: int | None = None, ridge: float = LINEAR_RIDGE,
                           tol: float = LINEAR_GRAD_TOL, max_iters: int = LINEAR_MAX_ITERS):
    """Minimize ``sum w l_gamma(z - X theta) / n + ridge/2 |theta[1:]|^2``.

    Damped Newton on the piecewise quadratic objective, started from zero.
    The gradient tolerance is relative to the gradient norm at zero.  The first column of ``X`` is the unpenalized
    intercept.  Returns ``(theta, iterations, loss)``.
    """
    n_total = n_total or len(z)
    d = X.shape[1]
    pen = np.full(d, ridge)
    pen[0] = 0.0
    theta = np.zeros(d)
    f = linear_kappa_objective(theta, X, z, w, gamma, n_total, ridge)
    # the tolerance is relative to the gradient at theta = 0 (the scale of the data term)
    scale = 1.0 + gamma * float(np.linalg.norm(X.T @ (w * z))) / n_total
    for it in range(max_iters + 1):
        r = z - X @ theta
        c = np.where(r < 0, gamma, 1.0)
        grad = -(X.T @ (w * c * r)) / n_total + pen * theta
        if np.linalg.norm(grad) < tol * scale:
            return theta, it, f
        if it == max_iters:
            break
        H = (X * (w * c)[:, None]).T @ X / n_total + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            f_new = linear_kappa_objective(cand, X, z, w, gamma, n_total, ridge)
            if f_new <= f - 1e-4 * t * float(grad @ step) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12 or np.linalg.norm(t * step) <= 1e-13 * (1.0 + np.linalg.norm(theta)):
            # no progress possible along the Newton direction: at the optimum up to rounding
            return theta, it, f
        theta, f = cand, f_new
    raise EstimationError(f"linear kappa did not converge in {max_iters} iterations "
                          f"(gradient norm {np.linalg.norm(grad):.3g})")


# -- prepared problem ---------------------------------------------------------------

@dataclass(frozen=True)
class BoundEstimate:
    gamma: float
    t_star: int
    lower: float
    upper: float
    point_is: float
    components: Mapping[str, float] = field(default_factory=dict)
    n_used: int = 0
    diagnostics: Mapping[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "t_star": self.t_star, "lower": self.lower,
                "upper": self.upper, "point_IS": self.point_is,
                "components": dict(self.components), "n_used": self.n_used,
                "diagnostics": dict(self.diagnostics)}


class BoundProblem:
    """Everything the bounds need that does not depend on Gamma.

    Built once per (dataset, behavior, evaluation, t_star); sweeps over Gamma
    then only re-solve the kappa fits.
    """

    def __init__(self, data: Dataset, behavior: Policy, evaluation: Policy, t_star: int,
                 rho_cap: float | None = RHO_CAP, kappa: str = "tabular",
                 featureizer: Callable[[Dataset, int], np.ndarray] = history_features,
                 ridge: float = LINEAR_RIDGE,
                 bucketer: Callable[[Dataset, int], tuple] = history_codes):
        if not 1 <= t_star <= data.horizon:
            raise ValueError(f"t_star={t_star} outside 1..{data.horizon}")
        if kappa not in ("tabular", "linear"):
            raise ValueError(f"unknown kappa model {kappa!r}")
        self.data = data
        self.t_star = t_star
        self.kappa_kind = kappa
        self.featureizer = featureizer
        self.ridge = ridge
        k = t_star - 1
        pb = observed_probs(behavior, data)
        check_behavior(pb)
        pe = observed_probs(evaluation, data)
        raw = pe / pb
        self.rho = raw if rho_cap is None else np.minimum(raw, rho_cap)
        self.rho_cap = rho_cap
        self.clipped_fraction = 0.0 if rho_cap is None else float((raw > rho_cap).mean())
        self.y = data.returns()
        self.weight = self.rho.prod(axis=1)
        self.pre = self.rho[:, :k].prod(axis=1)
        self.post = self.rho[:, k + 1:].prod(axis=1)
        self.a_star = data.actions[:, k]
        self.pi_hat = np.asarray(behavior.action_probs(data, k), dtype=float)
        self.pi_bar = np.asarray(evaluation.action_probs(data, k), dtype=float)
        self.n_actions = data.action_cardinalities[k]
        rows = np.arange(data.n)
        self.pi_hat_obs = self.pi_hat[rows, self.a_star]
        # coefficient of kappa(H; a) in the adjustment term
        self.kappa_coef = self.pre[:, None] * self.pi_bar * (1.0 - self.pi_hat)
        if kappa == "tabular":
            self.codes, self.keys = bucketer(data, t_star)
            self.n_buckets = len(self.keys)
        else:
            self.features = featureizer(data, t_star)

    @property
    def n(self) -> int:
        return self.data.n

    def is_estimate(self) -> float:
        return float(np.mean(self.y * self.weight))

    def naive_lower(self, gamma: float | np.ndarray, sign: float = 1.0) -> float:
        """Naive bound; ``gamma`` is a scalar at ``t_star`` or one value per step."""
        g = np.asarray(gamma, dtype=float)
        if g.ndim == 0:
            total = float(g)
        else:
            total = float(np.prod(g))
        y = sign * self.y
        scale = np.where(y < 0, total, np.where(y > 0, 1.0 / total, 1.0))
        return float(np.mean(y * self.weight * scale))

    def fit_kappa(self, gamma: float, sign: float = 1.0):
        z = sign * self.y * self.post
        w_all = 1.0 / self.pi_hat
        if self.kappa_kind == "tabular":
            values = np.full((self.n_buckets, self.n_actions), np.nan)
            empty = 0
            for a in range(self.n_actions):
                sel = self.a_star == a
                if not sel.any():
                    if (self.pi_bar[:, a] > 0).any():
                        raise EmptyAction(f"no sample takes action {a} at step {self.t_star}, "
                                          "but the evaluation policy uses it")
                    values[:, a] = 0.0
                    continue
                zs, ws, cs = z[sel], w_all[sel, a], self.codes[sel]
                col = grouped_expectiles(cs, zs, ws, gamma, self.n_buckets)
                missing = np.isnan(col)
                if missing.any():
                    empty += int(missing.sum())
                    col[missing] = expectile(zs, ws, gamma)
                values[:, a] = col
            return TabularKappa(values, self.keys, gamma, empty)
        coef = np.zeros((self.features.shape[1], self.n_actions))
        iters, losses = [], []
        for a in range(self.n_actions):
            sel = self.a_star == a
            if not sel.any():
                if (self.pi_bar[:, a] > 0).any():
                    raise EmptyAction(f"no sample takes action {a} at step {self.t_star}, "
                                      "but the evaluation policy uses it")
                iters.append(0)
                losses.append(0.0)
                continue
            theta, it, loss = solve_linear_expectile(self.features[sel], z[sel], w_all[sel, a],
                                                     gamma, self.n, self.ridge)
            coef[:, a] = theta
            iters.append(it)
            losses.append(loss)
        return LinearKappa(coef, gamma, self.featureizer, tuple(iters), tuple(losses))

    def kappa_matrix(self, model) -> np.ndarray:
        if isinstance(model, TabularKappa) and model.keys is self.keys:
            return model.values[self.codes]
        if isinstance(model, LinearKappa):
            return self.features @ model.coef
        return model.predict(self.data, self.t_star)

    def assemble(self, model, sign: float = 1.0) -> tuple[float, float]:
        """``(kappa term, direct term)`` of the lower bound for ``sign * Y``."""
        kap = self.kappa_matrix(model)
        used = self.kappa_coef > 0
        if np.isnan(kap[used]).any():
            raise MissingKappa("kappa is undefined for an action the evaluation policy uses")
        kappa_term = float(np.mean(np.where(used, self.kappa_coef * np.nan_to_num(kap), 0.0).sum(axis=1)))
        direct = float(np.mean(self.pi_hat_obs * sign * self.y * self.weight))
        return kappa_term, direct

    def bound(self, gamma: float) -> BoundEstimate:
        if gamma < 1.0:
            raise ValueError("gamma must be >= 1")
        lo_model = self.fit_kappa(gamma, 1.0)
        k_lo, d_lo = self.assemble(lo_model, 1.0)
        up_model = self.fit_kappa(gamma, -1.0)
        k_up, d_up = self.assemble(up_model, -1.0)
        diag = {}
        if isinstance(lo_model, TabularKappa):
            diag["empty_buckets"] = lo_model.empty_buckets
        return BoundEstimate(
            gamma=float(gamma), t_star=self.t_star, lower=k_lo + d_lo, upper=-(k_up + d_up),
            point_is=self.is_estimate(),
            components={"kappa_term_lower": k_lo, "direct_term_lower": d_lo,
                        "kappa_term_upper": -k_up, "direct_term_upper": -d_up},
            n_used=self.n, diagnostics=diag)

    def naive(self, gamma: float) -> BoundEstimate:
        return BoundEstimate(gamma=float(gamma), t_star=self.t_star,
                             lower=self.naive_lower(gamma, 1.0), upper=-self.naive_lower(gamma, -1.0),
                             point_is=self.is_estimate(), n_used=self.n)


# -- functional interface ---------------------------------------------------------

def is_estimate(data: Dataset, behavior: Policy, evaluation: Policy,
                rho_cap: float | None = None) -> float:
    """Mean of ``Y * prod_t rho_t``."""
    pb = observed_probs(behavior, data)
    check_behavior(pb)
    rho = observed_probs(evaluation, data) / pb
    if rho_cap is not None:
        rho = np.minimum(rho, rho_cap)
    return float(np.mean(data.returns() * rho.prod(axis=1)))


def naive_bound(data: Dataset, behavior: Policy, evaluation: Policy, spec: ConfoundingSpec,
                direction: str = "lower", rho_cap: float | None = None) -> float:
    """Rescale importance weights by the worst-case odds ratio at every step.

    Negative returns have their weight multiplied, positive returns divided,
    by the product of the per-step gammas; the upper bound negates returns.
    """
    prob = BoundProblem(data, behavior, evaluation, spec.t_star, rho_cap)
    g = spec.step_gammas(data.horizon)
    if direction == "lower":
        return prob.naive_lower(g, 1.0)
    if direction == "upper":
        return -prob.naive_lower(g, -1.0)
    raise ValueError("direction must be 'lower' or 'upper'")


def solve_kappa_tabular(data: Dataset, behavior: Policy, evaluation: Policy,
                        spec: ConfoundingSpec, rho_cap: float | None = RHO_CAP,
                        sign: float = 1.0) -> TabularKappa:
    return BoundProblem(data, behavior, evaluation, spec.t_star, rho_cap).fit_kappa(spec.gamma, sign)


def solve_kappa_linear(data: Dataset, behavior: Policy, evaluation: Policy,
                       spec: ConfoundingSpec,
                       featureizer: Callable[[Dataset, int], np.ndarray] = history_features,
                       rho_cap: float | None = RHO_CAP, ridge: float = LINEAR_RIDGE,
                       sign: float = 1.0) -> LinearKappa:
    prob = BoundProblem(data, behavior, evaluation, spec.t_star, rho_cap, "linear", featureizer, ridge)
    return prob.fit_kappa(spec.gamma, sign)


def final_bound(data: Dataset, behavior: Policy, evaluation: Policy, spec: ConfoundingSpec,
                kappa: str = "tabular", rho_cap: float | None = RHO_CAP,
                featureizer: Callable[[Dataset, int], np.ndarray] = history_features) -> BoundEstimate:
    """Lower and upper bound on the evaluation policy's value at ``spec.gamma``."""
    prob = BoundProblem(data, behavior, evaluation, spec.t_star, rho_cap, kappa, featureizer)
    return prob.bound(spec.gamma)


def toy_confounded_likelihood(gamma, T: int):
    """Probabilities of (all actions 1, Y=1) and (all actions 1, Y=0).

    Exact for ``fractions.Fraction`` inputs whose square root is rational.
    """
    if gamma < 1 or T < 1:
        raise ValueError("need gamma >= 1 and T >= 1")
    from fractions import Fraction
    if isinstance(gamma, Fraction) or isinstance(gamma, int):
        g = Fraction(gamma)
        root = _exact_sqrt(g)
        if root is not None:
            denom = 2 * (1 + root) ** T
            return (root ** T) / denom, Fraction(1) / denom
    root = float(np.sqrt(float(gamma)))
    denom = 2.0 * (1.0 + root) ** T
    return root ** T / denom, 1.0 / denom


def _exact_sqrt(q):
    from fractions import Fraction
    from math import isqrt
    num, den = q.numerator, q.denominator
    rn, rd = isqrt(num), isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    return None


@dataclass(frozen=True)
class OverlapReport:
    max_rho: float
    max_rho_per_step: tuple[float, ...]
    rho_quantiles: Mapping[str, float]
    ess: float
    n: int
    clipped_fraction: float
    flags: tuple[str, ...]

    def to_json(self) -> dict:
        return {"max_rho": self.max_rho, "max_rho_per_step": list(self.max_rho_per_step),
                "rho_quantiles": dict(self.rho_quantiles), "ess": self.ess, "n": self.n,
                "clipped_fraction": self.clipped_fraction, "flags": list(self.flags)}


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.dot(w, w))
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


def overlap_diagnostics(data: Dataset, behavior: Policy, evaluation: Policy,
                        rho_cap: float | None = RHO_CAP) -> OverlapReport:
    pb = observed_probs(behavior, data)
    flags = []
    zero = pb <= 0
    if zero.any():
        flags.append(f"{int(zero.sum())} observed action(s) have zero behavior probability")
    pb_safe = np.where(zero, np.inf, pb)
    raw = observed_probs(evaluation, data) / pb_safe
    clipped = float((raw > rho_cap).mean()) if rho_cap is not None else 0.0
    rho = raw if rho_cap is None else np.minimum(raw, rho_cap)
    w = rho.prod(axis=1)
    ess = effective_sample_size(w)
    if clipped > 0:
        flags.append(f"{clipped:.2%} of ratios clipped at {rho_cap:g}")
    if ess < 0.01 * data.n:
        flags.append(f"effective sample size {ess:.1f} is below 1% of n")
    qs = {f"q{int(q * 100):02d}": float(np.quantile(rho, q)) for q in (0.5, 0.9, 0.99)}
    return OverlapReport(float(rho.max()), tuple(float(x) for x in rho.max(axis=0)), qs, ess,
                         data.n, clipped, tuple(flags))
