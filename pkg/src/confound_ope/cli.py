"""``confound-ope`` command line: generate data, fit behavior, bound, sweep, run.

Exit codes: 0 success, 2 configuration or input error, 3 estimation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from ._toml import load_toml
from .autism_sim import AutismConfig, AutismSimulator, behavior_group_columns
from .behavior_fit import (ConvergenceError, EmptyDataset, fit_logistic, fit_tabular,
                           load_policy, save_policy, split_fit)
from .bounds import (RHO_CAP, BoundProblem, EstimationError, overlap_diagnostics,
                     toy_confounded_likelihood)
from .core import (DISCRETE, SchemaError, ZeroBehaviorProbability, load_jsonl,
                   loads_jsonl, save_jsonl, validate_records)
from .sensitivity import (AutismScenario, NotSeparatedAtGammaOne, SepsisScenario,
                          design_sensitivity, parse_grid, sweep)
from .sepsis_sim import SepsisDynamicsConfig, SepsisSimulator

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 2, 3
SCENARIOS = ("sepsis", "autism", "toy", "external")
EXECUTION_ONLY = ("out_dir", "workers")


class ConfigError(ValueError):
    """Bad flags, config file or input file."""


# -- experiment config -----------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str = "sepsis"
    gamma_star: float = 2.0
    gamma_grid: str = "1:6:0.25"
    n: int = 20_000
    replications: int = 1
    seed: int = 0
    t_star: int | None = None
    kappa: str | None = None
    split_ratio: float | None = None
    rho_cap: float | None = RHO_CAP
    bootstrap: bool = False
    workers: int = 1
    preset: str = "case2"
    dynamics: str | None = None
    data: str | None = None
    evaluation: list = field(default_factory=list)
    behavior: str = "tabular"
    gamma: float = 2.0
    horizon: int = 2
    out_dir: str = "results"
    save_data: bool = False

    @classmethod
    def from_mapping(cls, obj: dict) -> "ExperimentConfig":
        obj = {k.replace("-", "_"): v for k, v in obj.items()}
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if isinstance(obj.get("gamma_grid"), list):
            obj["gamma_grid"] = ",".join(repr(float(g)) for g in obj["gamma_grid"])
        return cls(**obj)

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}")
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.gamma_star < 1 or self.gamma < 1:
            raise ConfigError("gamma values must be >= 1")
        try:
            parse_grid(self.gamma_grid)
        except ValueError as exc:
            raise ConfigError(f"gamma_grid: {exc}") from None
        if self.kappa not in (None, "tabular", "linear"):
            raise ConfigError("kappa must be 'tabular' or 'linear'")
        if self.split_ratio is not None and not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.behavior not in ("tabular", "logistic"):
            raise ConfigError("behavior must be 'tabular' or 'logistic'")
        if self.scenario == "external":
            if not self.data or not Path(self.data).exists():
                raise ConfigError(f"external scenario needs an existing data file, got {self.data!r}")
            if not self.evaluation:
                raise ConfigError("external scenario needs at least one evaluation policy file")
            for p in self.evaluation:
                if not Path(p).exists():
                    raise ConfigError(f"evaluation policy file {p!r} does not exist")
        if self.dynamics and not Path(self.dynamics).exists():
            raise ConfigError(f"dynamics file {self.dynamics!r} does not exist")
        if self.scenario == "autism" and self.preset not in ("case1", "case2") \
                and not Path(self.preset).exists():
            raise ConfigError("preset must be case1, case2 or a TOML file path")

    def canonical(self) -> dict:
        """Every setting that can change a number; output paths and worker count excluded."""
        d = asdict(self)
        for key in EXECUTION_ONLY:
            d.pop(key)
        return d

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def autism_config(preset: str) -> AutismConfig:
    if preset in ("case1", "case2"):
        return AutismConfig.preset(preset)
    return AutismConfig.from_toml(preset)


def sepsis_config(path: str | None) -> SepsisDynamicsConfig:
    return SepsisDynamicsConfig.from_toml(path) if path else SepsisDynamicsConfig()


def _dump(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is not None:
        path.write_text(text)
    return text


def versions() -> dict:
    return {"confound_ope": __version__, "numpy": np.__version__,
            "python": platform.python_version()}


# -- shared pieces -------------------------------------------------------------------

@dataclass
class ExternalScenario:
    """A fixed episode log with evaluation policies loaded from JSON files."""

    data: object
    policies: dict
    t_star: int = 1
    kappa: str = "tabular"
    behavior: str = "tabular"
    split_ratio: float | None = None
    rho_cap: float | None = RHO_CAP

    def generate(self, seed: int):
        return self.data

    def fit_behavior(self, data):
        return fit_tabular(data) if self.behavior == "tabular" else fit_logistic(data)

    def problems(self, data, seed: int = 0) -> dict:
        if self.split_ratio is None:
            beh = self.fit_behavior(data)
        else:
            beh, data = split_fit(data, self.fit_behavior, self.split_ratio, seed)
        return {name: BoundProblem(data, beh, pol, self.t_star, self.rho_cap, self.kappa)
                for name, pol in self.policies.items()}


def _external_scenario(cfg: ExperimentConfig):
    data = load_jsonl(cfg.data)
    policies = {Path(p).stem: load_policy(p) for p in cfg.evaluation}
    kind = cfg.kappa or ("tabular" if data.state_kind == DISCRETE else "linear")
    return ExternalScenario(data, policies, cfg.t_star or 1, kind, cfg.behavior,
                            cfg.split_ratio, cfg.rho_cap), data


def build_scenario(cfg: ExperimentConfig):
    if cfg.scenario == "sepsis":
        return SepsisScenario(cfg.gamma_star, cfg.n, sepsis_config(cfg.dynamics), cfg.rho_cap,
                              cfg.split_ratio, t_star=cfg.t_star or 1)
    if cfg.scenario == "autism":
        return AutismScenario(cfg.gamma_star, cfg.n, autism_config(cfg.preset), cfg.rho_cap,
                              cfg.split_ratio, t_star=cfg.t_star or 2)
    raise ConfigError(f"scenario {cfg.scenario!r} has no generator")


def _toy_report(gamma: float, horizon: int) -> dict:
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    g = Fraction(str(gamma)) if float(gamma) == float(Fraction(str(gamma))) else gamma
    p1, p0 = toy_confounded_likelihood(g, horizon)
    ratio = p1 / p0

    def fmt(x):
        return str(x) if isinstance(x, Fraction) else repr(float(x))
    return {"gamma": float(gamma), "horizon": horizon, "p_y1": fmt(p1), "p_y0": fmt(p0),
            "ratio": fmt(ratio), "p_y1_float": float(p1), "p_y0_float": float(p0),
            "ratio_float": float(ratio)}


# -- subcommands -------------------------------------------------------------------------

def cmd_sepsis_gen(args) -> int:
    sim = SepsisSimulator(sepsis_config(args.config))
    data = sim.simulate_confounded(args.gamma_star, args.n, args.seed)
    save_jsonl(data, args.out)
    oracle = Path(args.out).with_suffix(".oracle.json")
    _dump({"gamma_star": args.gamma_star, "values": sim.true_values()}, oracle)
    print(f"wrote {data.n} sepsis episodes to {args.out} and policy values to {oracle}")
    return EXIT_OK


def cmd_sepsis_mdp(args) -> int:
    sim = SepsisSimulator(sepsis_config(args.config))
    sim.mdp.save(args.out)
    print(f"wrote sepsis MDP with {sim.mdp.n_states} states to {args.out}")
    return EXIT_OK


def cmd_autism_gen(args) -> int:
    sim = AutismSimulator(autism_config(args.preset))
    data = sim.generate(args.gamma_star, args.n, args.seed)
    save_jsonl(data, args.out)
    print(f"wrote {data.n} autism episodes to {args.out}")
    return EXIT_OK


def cmd_toy(args) -> int:
    rep = _toy_report(args.gamma, args.horizon)
    print(f"p_y1={rep['p_y1']} p_y0={rep['p_y0']} ratio={rep['ratio']}")
    return EXIT_OK


def cmd_fit_behavior(args) -> int:
    data = load_jsonl(args.data)
    if args.kind == "tabular":
        fitter = lambda d: fit_tabular(d, alpha=args.alpha)  # noqa: E731
    else:
        groups = behavior_group_columns() if args.strata == "autism" else None
        fitter = lambda d: fit_logistic(d, args.reg, group_columns=groups)  # noqa: E731
    if args.split_ratio is not None:
        policy, _ = split_fit(data, fitter, args.split_ratio, args.seed)
    else:
        policy = fitter(data)
    save_policy(policy, args.out)
    print(f"wrote {args.kind} behavior policy to {args.out}")
    return EXIT_OK


def _evaluation_policies(scenario: str | None, files: list[str], preset: str, dynamics):
    out = {}
    if scenario == "sepsis":
        out.update(SepsisSimulator(sepsis_config(dynamics)).evaluation_policies)
    elif scenario == "autism":
        out.update(AutismSimulator(autism_config(preset)).evaluation_policies)
    for p in files:
        out[Path(p).stem] = load_policy(p)
    return out


def cmd_bound(args) -> int:
    data = load_jsonl(args.data)
    behavior = load_policy(args.behavior)
    policies = _evaluation_policies(args.scenario, args.evaluation, args.preset, None)
    if args.policy:
        missing = [p for p in args.policy if p not in policies]
        if missing:
            raise ConfigError(f"unknown evaluation policies: {', '.join(missing)}")
        policies = {p: policies[p] for p in args.policy}
    if not policies:
        raise ConfigError("no evaluation policy: pass --scenario or --evaluation")
    kind = args.kappa or ("tabular" if data.state_kind == DISCRETE else "linear")
    featureizer = {}
    if args.scenario == "autism" and kind == "linear":
        from .autism_sim import kappa_features
        featureizer = {"featureizer": kappa_features}
    result = {}
    for name, pol in policies.items():
        prob = BoundProblem(data, behavior, pol, args.t_star, args.rho_cap, kind, **featureizer)
        result[name] = {"final": prob.bound(args.gamma).to_json(),
                        "naive": prob.naive(args.gamma).to_json()}
    text = _dump(result, Path(args.out) if args.out else None)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        text = Path(args.data).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.data}: {exc}") from None
    header, records, problems = validate_records(text)
    if problems:
        for ln, msg in problems:
            print(f"line {ln}: {msg}")
        return EXIT_CONFIG
    data = loads_jsonl(text)
    print(f"OK, {data.n} episodes, T={data.horizon}, |A_t|={list(data.action_cardinalities)}")
    if args.behavior:
        behavior = load_policy(args.behavior)
        policies = _evaluation_policies(args.scenario, args.evaluation, args.preset, None)
        if not policies:
            policies = {"behavior": behavior}
        for name, pol in policies.items():
            rep = overlap_diagnostics(data, behavior, pol)
            print(f"overlap[{name}]: max_rho={rep.max_rho:.4g} ess={rep.ess:.1f}")
            for flag in rep.flags:
                print(f"warning: {name}: {flag}")
    return EXIT_OK


def _sweep_outputs(cfg: ExperimentConfig, scenario, data, compare):
    grid = parse_grid(cfg.gamma_grid)
    curves = sweep(scenario, grid, cfg.replications, cfg.seed, data=data,
                   bootstrap=cfg.bootstrap, workers=cfg.workers)
    summary = {}
    if compare:
        a, b = compare
        for m, c in curves.items():
            try:
                summary[m] = design_sensitivity(c, a, b)
            except NotSeparatedAtGammaOne:
                summary[m] = None
    return curves, summary


def _parse_compare(text: str | None):
    if not text:
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError("--compare takes two policy names separated by a comma")
    return parts[0], parts[1]


def _json_float(x):
    if x is None:
        return None
    return "inf" if x == float("inf") else x


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    scenario, data = (_external_scenario(cfg) if cfg.scenario == "external"
                      else (build_scenario(cfg), None))
    curves, summary = _sweep_outputs(cfg, scenario, data, _parse_compare(args.compare))
    out = Path(args.out)
    curves["final"].to_csv(out)
    if args.naive_out:
        curves["naive"].to_csv(args.naive_out)
    for m, v in summary.items():
        print(f"design sensitivity ({m}): {_json_float(v)}")
    print(f"wrote {out}")
    return EXIT_OK


def run_experiment(cfg: ExperimentConfig, compare=None) -> dict:
    """Generate, fit, bound and sweep; write every artifact under ``cfg.out_dir``."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    if cfg.scenario == "toy":
        artifacts["toy.json"] = _dump(_toy_report(cfg.gamma, cfg.horizon), out / "toy.json")
    else:
        if cfg.scenario == "external":
            scenario, fixed = _external_scenario(cfg)
            data = fixed
        else:
            scenario, fixed = build_scenario(cfg), None
            data = scenario.generate(cfg.seed)
        if cfg.save_data and cfg.scenario != "external":
            save_jsonl(data, out / "dataset.jsonl")
            artifacts["dataset.jsonl"] = True
        behavior = scenario.fit_behavior(data)
        save_policy(behavior, out / "behavior.json")
        problems = scenario.problems(data, cfg.seed)
        bounds = {name: {"final": p.bound(cfg.gamma_star).to_json(),
                         "naive": p.naive(cfg.gamma_star).to_json()}
                  for name, p in problems.items()}
        _dump(bounds, out / "bounds.json")
        if compare is None and cfg.scenario == "sepsis":
            compare = ("W", "WO")
        elif compare is None and cfg.scenario == "autism":
            compare = ("adaptive", "aac")
        curves, summary = _sweep_outputs(cfg, scenario, fixed, compare)
        curves["final"].to_csv(out / "sweep.csv")
        curves["naive"].to_csv(out / "sweep_naive.csv")
        _dump({m: _json_float(v) for m, v in summary.items()}, out / "design_sensitivity.json")
        artifacts.update({k: True for k in ("behavior.json", "bounds.json", "sweep.csv",
                                             "sweep_naive.csv", "design_sensitivity.json")})
    manifest = {"config": cfg.canonical(), "config_hash": cfg.digest(), "seed": cfg.seed,
                "versions": versions(), "artifacts": sorted(artifacts)}
    _dump(manifest, out / "manifest.json")
    return manifest


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if cfg.scenario == "toy":
        rep = _toy_report(cfg.gamma, cfg.horizon)
        print(f"p_y1={rep['p_y1']} p_y0={rep['p_y0']} ratio={rep['ratio']}")
    manifest = run_experiment(cfg, _parse_compare(args.compare))
    print(f"run {manifest['config_hash'][:12]} wrote {len(manifest['artifacts']) + 1} files "
          f"to {cfg.out_dir}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

CONFIG_FLAGS = {
    "scenario": str, "gamma_star": float, "gamma_grid": str, "n": int, "replications": int,
    "seed": int, "t_star": int, "kappa": str, "split_ratio": float, "rho_cap": float,
    "workers": int, "preset": str, "dynamics": str, "data": str, "behavior": str,
    "gamma": float, "horizon": int, "out_dir": str,
}


def _config_from_args(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            obj = load_toml(args.config)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        base = dict(obj.get("experiment", obj))
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    for flag in ("bootstrap", "save_data"):
        if getattr(args, flag, False):
            base[flag] = True
    if getattr(args, "evaluation", None):
        base["evaluation"] = list(args.evaluation)
    if getattr(args, "no_rho_cap", False):
        base["rho_cap"] = None
    cfg = ExperimentConfig.from_mapping(base)
    cfg.validate()
    return cfg


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with an [experiment] table")
    for name, typ in CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--evaluation", action="append", help="evaluation policy JSON (repeatable)")
    p.add_argument("--bootstrap", action="store_true",
                   help="replications resample one dataset instead of regenerating")
    p.add_argument("--save-data", action="store_true")
    p.add_argument("--no-rho-cap", action="store_true", help="do not clip importance ratios")
    p.add_argument("--compare", help="two policies 'A,B' for design sensitivity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confound-ope",
                                     description="Off-policy evaluation bounds under confounding.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sep = sub.add_parser("sepsis", help="sepsis simulator").add_subparsers(dest="action", required=True)
    g = sep.add_parser("gen", help="generate confounded sepsis episodes")
    g.add_argument("--gamma-star", type=float, default=2.0)
    g.add_argument("--n", type=int, default=20_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="TOML with a [dynamics] table")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sepsis_gen)
    g = sep.add_parser("mdp", help="write the configured dynamics as sparse JSON")
    g.add_argument("--config", help="TOML with a [dynamics] table")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sepsis_mdp)

    aut = sub.add_parser("autism", help="two-stage trial simulator").add_subparsers(dest="action", required=True)
    g = aut.add_parser("gen", help="generate confounded trial episodes")
    g.add_argument("--preset", default="case2", help="case1, case2 or a TOML path")
    g.add_argument("--gamma-star", type=float, default=2.0)
    g.add_argument("--n", type=int, default=20_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_autism_gen)

    t = sub.add_parser("toy", help="closed-form likelihoods of the two-outcome example")
    t.add_argument("--gamma", type=float, required=True)
    t.add_argument("--horizon", type=int, default=2)
    t.set_defaults(func=cmd_toy)

    f = sub.add_parser("fit-behavior", help="estimate the behavior policy from episodes")
    f.add_argument("--data", required=True)
    f.add_argument("--kind", choices=("tabular", "logistic"), default="tabular")
    f.add_argument("--alpha", type=float, default=0.0, help="additive smoothing (tabular)")
    f.add_argument("--reg", type=float, default=1e-4, help="ridge strength (logistic)")
    f.add_argument("--strata", choices=("none", "autism"), default="none",
                   help="per-step strata for the logistic fit")
    f.add_argument("--split-ratio", type=float)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_behavior)

    b = sub.add_parser("bound", help="final and naive bounds at one gamma")
    b.add_argument("--data", required=True)
    b.add_argument("--behavior", required=True, help="fitted behavior policy JSON")
    b.add_argument("--scenario", choices=("sepsis", "autism"),
                   help="use this scenario's evaluation policies")
    b.add_argument("--preset", default="case2")
    b.add_argument("--evaluation", action="append", default=[], help="evaluation policy JSON")
    b.add_argument("--policy", action="append", help="restrict to these policy names")
    b.add_argument("--gamma", type=float, required=True)
    b.add_argument("--t-star", type=int, default=1)
    b.add_argument("--kappa", choices=("tabular", "linear"))
    b.add_argument("--rho-cap", type=float, default=RHO_CAP)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bound)

    s = sub.add_parser("sweep", help="bounds over a gamma grid with replication quantiles")
    _add_experiment_flags(s)
    s.add_argument("--out", required=True, help="CSV for the final bound")
    s.add_argument("--naive-out", help="CSV for the naive bound")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="check an episode log")
    v.add_argument("data")
    v.add_argument("--behavior", help="behavior policy JSON for overlap diagnostics")
    v.add_argument("--scenario", choices=("sepsis", "autism"))
    v.add_argument("--preset", default="case2")
    v.add_argument("--evaluation", action="append", default=[])
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="generate, fit, bound and sweep in one go")
    _add_experiment_flags(r)
    r.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError, EmptyDataset) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, ZeroBehaviorProbability, ConvergenceError, NotSeparatedAtGammaOne) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
