"""Experiment configuration, ensemble orchestration, metrics, and report emission.

An experiment is declared in a TOML file (all keys optional; unspecified
keys load the benchmark defaults: alpha=1, eps=0.1, H=10, eta=1,
gamma=0.65, beta=0.1, dt=0.1, x0=3, mc_samples=10000, n_trajectories=50).
``run_experiment`` simulates the ensemble and reports, per time step, the
ensemble mean/std of the state, the expected safe probability E[F(Z_t)]
(the offline field queried along the simulated closed-loop trajectories),
the empirical safe probability (fraction of trajectories with no exit yet),
and fallback counts.  ``compare_controllers`` aligns several controllers on
the same plant and seed.  Identical (config, seed) produce byte-identical
CSV output regardless of the worker thread count.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .cde_field import GridSpec, SafeProbabilityField, smooth_mc_field, solve_cde
from .controllers import (
    AdditivePolicy,
    ConstrainedOptPolicy,
    CVaRPolicy,
    NominalPolicy,
    PrSBCPolicy,
    SafetyCertParams,
    StoCBFPolicy,
    SwitchingPolicy,
    WorstCaseEqualityPolicy,
)
from .dynamics import (
    HorizonMode,
    HorizonSpec,
    MarginSpec,
    affine_barrier,
    linear_1d,
    simulate,
    spawn_seed,
)
from .safety_prob import mc_field
from . import svgplot

__all__ = [
    "ComparisonResult",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentReport",
    "FallbackRateExceeded",
    "compare_controllers",
    "emit_outputs",
    "run_experiment",
]

SEED_ENV_VAR = "PROBSAFE_SEED"

_CONTROLLER_KINDS = ("nominal", "additive", "constrained_opt", "worst_case_equality",
                     "stocbf", "prsbc", "cvar", "switching")
_FIELD_SOURCES = ("cde", "mc", "mc_smoothed", "file")

# (section, key) -> dataclass attribute
_TOML_MAP = {
    ("", "label"): "label",
    ("system", "a"): "system_a",
    ("system", "gain"): "system_gain",
    ("system", "noise"): "system_noise",
    ("barrier", "offset"): "barrier_offset",
    ("safety", "ptype"): "ptype",
    ("safety", "epsilon"): "epsilon",
    ("safety", "alpha"): "alpha_gain",
    ("safety", "horizon_mode"): "horizon_mode",
    ("safety", "horizon"): "horizon",
    ("safety", "margin"): "margin",
    ("controller", "kind"): "controller",
    ("controller", "eta"): "eta",
    ("controller", "gamma"): "gamma",
    ("controller", "beta"): "beta",
    ("controller", "equality"): "equality",
    ("controller", "inner"): "switching_inner",
    ("controller", "drift_cap"): "drift_cap",
    ("controller", "gradient_floor"): "gradient_floor",
    ("nominal", "gain"): "nominal_gain",
    ("simulation", "x0"): "x0",
    ("simulation", "dt"): "dt",
    ("simulation", "t_end"): "t_end",
    ("simulation", "n_trajectories"): "n_trajectories",
    ("simulation", "seed"): "seed",
    ("simulation", "n_jobs"): "n_jobs",
    ("field", "source"): "field_source",
    ("field", "policy_tag"): "field_policy_tag",
    ("field", "file"): "field_file",
    ("field", "x_min"): "x_min",
    ("field", "x_max"): "x_max",
    ("field", "x_nodes"): "x_nodes",
    ("field", "t_nodes"): "t_nodes",
    ("field", "mc_samples"): "mc_samples",
    ("field", "mc_dt"): "mc_dt",
    ("field", "smooth_sweeps"): "smooth_sweeps",
    ("field", "smooth_blend"): "smooth_blend",
    ("output", "fallback_rate_limit"): "fallback_rate_limit",
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class FallbackRateExceeded(RuntimeError):
    """The infeasibility-fallback rate went past the configured limit."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative experiment description; defaults reproduce the 1-D benchmark."""

    label: str = "experiment"
    # plant dX = (a x + gain u) dt + noise dW, barrier phi(x) = x - offset
    system_a: float = 2.0
    system_gain: float = 1.0
    system_noise: float = 2.0
    barrier_offset: float = 1.0
    # safety requirement
    ptype: str = "I"
    epsilon: float = 0.1
    alpha_gain: float = 1.0
    horizon_mode: str = "fixed"
    horizon: float = 10.0
    margin: float = 0.0
    # controller
    controller: str = "worst_case_equality"
    eta: float = 1.0
    gamma: float = 0.65
    beta: float = 0.1
    equality: bool = False
    switching_inner: str = "constrained_opt"
    drift_cap: str = "auto"          # "auto" | "none" | numeric string
    gradient_floor: float = 1e-9
    nominal_gain: float = 2.5
    # simulation
    x0: float = 3.0
    dt: float = 0.1
    t_end: float = 10.0
    n_trajectories: int = 50
    seed: int = 20260808
    n_jobs: int = 1
    # field
    field_source: str = "cde"
    field_policy_tag: str = "nominal"
    field_file: str = ""
    x_min: float = -1.0
    x_max: float = 7.0
    x_nodes: int = 321
    t_nodes: int = 101
    mc_samples: int = 10000
    mc_dt: float = 0.01
    smooth_sweeps: int = 2
    smooth_blend: float = 0.85
    # output
    fallback_rate_limit: float = 1.0

    def __post_init__(self):
        if self.controller not in _CONTROLLER_KINDS:
            raise ConfigError(f"unknown controller kind {self.controller!r}")
        if self.field_source not in _FIELD_SOURCES:
            raise ConfigError(f"unknown field source {self.field_source!r}")
        if self.field_policy_tag not in ("nominal", "overall"):
            raise ConfigError("field policy_tag must be 'nominal' or 'overall'")
        if self.horizon_mode not in ("fixed", "receding"):
            raise ConfigError("horizon_mode must be 'fixed' or 'receding'")
        if self.dt <= 0 or self.t_end < self.dt:
            raise ConfigError("need dt > 0 and t_end >= dt")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.drift_cap not in ("auto", "none"):
            try:
                float(self.drift_cap)
            except ValueError:
                raise ConfigError("drift_cap must be 'auto', 'none', or a number") from None

    # -- TOML round trip ---------------------------------------------------

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"invalid TOML in {path}: {err}") from None
        return cls.from_dict(data, source=str(path))

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "ExperimentConfig":
        kwargs = {}
        for section, content in data.items():
            if isinstance(content, dict):
                for key, value in content.items():
                    attr = _TOML_MAP.get((section, key))
                    if attr is None:
                        raise ConfigError(f"unknown config key [{section}] {key} in {source}")
                    kwargs[attr] = value
            else:
                attr = _TOML_MAP.get(("", section))
                if attr is None:
                    raise ConfigError(f"unknown top-level config key {section!r} in {source}")
                kwargs[attr] = content
        if "drift_cap" in kwargs:
            kwargs["drift_cap"] = str(kwargs["drift_cap"])
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                kwargs["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
        try:
            return cls(**kwargs)
        except TypeError as err:
            raise ConfigError(str(err)) from None

    def to_toml(self) -> str:
        """Canonical resolved form; parsing it back yields an equal config."""
        sections: dict = {}
        top = []
        for (section, key), attr in _TOML_MAP.items():
            value = getattr(self, attr)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, (int, np.integer)):
                text = str(int(value))
            elif isinstance(value, float):
                text = repr(float(value))
            else:
                text = '"' + str(value) + '"'
            if section == "":
                top.append(f"{key} = {text}")
            else:
                sections.setdefault(section, []).append(f"{key} = {text}")
        lines = top[:]
        for section in sorted(sections):
            lines.append("")
            lines.append(f"[{section}]")
            lines.extend(sections[section])
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()[:16]


@dataclass
class ExperimentReport:
    """Per-step ensemble metrics plus reproducibility metadata.

    trajectory_expected keeps the per-trajectory field values (R, K+1) so
    downstream checks can attach standard errors to ensemble means.
    """

    label: str
    times: np.ndarray
    mean_state: np.ndarray
    std_state: np.ndarray
    expected_safe_prob: np.ndarray
    empirical_safe_prob: np.ndarray
    fallback_count: np.ndarray
    metadata: dict
    config: ExperimentConfig
    trajectory_expected: Optional[np.ndarray] = None

    def validate(self) -> None:
        if np.any(np.diff(self.empirical_safe_prob) > 1e-12):
            raise ValueError("empirical safe probability must be non-increasing")
        for name in ("expected_safe_prob", "empirical_safe_prob"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
                raise ValueError(f"{name} outside [0, 1]")

    def time_averaged_expected(self) -> float:
        return float(self.expected_safe_prob.mean())


@dataclass
class ComparisonResult:
    reports: list
    summary: list      # dicts: label, time_avg_expected, stderr, terminal_empirical


# -- builders -----------------------------------------------------------------

def _build_parts(config: ExperimentConfig):
    sys = linear_1d(config.system_a, config.system_gain, config.system_noise)
    barrier = affine_barrier([1.0], -float(config.barrier_offset))
    horizon = HorizonSpec(HorizonMode(config.horizon_mode), float(config.horizon))
    margin = MarginSpec(ell0=float(config.margin))
    nominal = NominalPolicy.linear(config.nominal_gain, 1)
    return sys, barrier, horizon, margin, nominal


def _grid(config: ExperimentConfig) -> GridSpec:
    return GridSpec.for_1d(config.x_min, config.x_max, config.x_nodes,
                           config.horizon, config.t_nodes)


def _drift_cap_args(config: ExperimentConfig) -> dict:
    if config.drift_cap == "none":
        return {"drift_cap": None}
    if config.drift_cap == "auto":
        return {"drift_cap": "auto", "dt": config.dt}
    return {"drift_cap": float(config.drift_cap)}


def build_field(config: ExperimentConfig, sys=None, barrier=None, horizon=None,
                margin=None, nominal=None) -> SafeProbabilityField:
    """Field per the config source; "overall" tag runs one policy-improvement pass."""
    if sys is None:
        sys, barrier, horizon, margin, nominal = _build_parts(config)
    grid = _grid(config)
    if config.field_source == "file":
        path = Path(config.field_file)
        if not path.exists():
            raise ConfigError(
                f"field file {path} not found; run `probsafe field --config <file> --out {path.parent or '.'}`"
                " or switch [field] source to 'cde'")
        return SafeProbabilityField.load(path)

    if config.field_policy_tag == "overall":
        base = solve_cde(sys, nominal, barrier, horizon, margin, config.ptype, grid,
                         policy_tag="nominal")
        loop_policy = _build_controller(config, sys, barrier, base, nominal)
        tag = "overall"
    else:
        loop_policy = nominal
        tag = "nominal"

    if config.field_source == "cde":
        return solve_cde(sys, loop_policy, barrier, horizon, margin, config.ptype, grid,
                         policy_tag=tag)
    raw = mc_field(sys, loop_policy, barrier, config.ptype, grid, config.mc_dt,
                   config.mc_samples, config.seed ^ 0x5EEDF1E1D, horizon=horizon,
                   margin=margin, policy_tag=tag)
    if config.field_source == "mc":
        return raw
    return smooth_mc_field(raw, sys, loop_policy, barrier, horizon, margin,
                           sweeps=config.smooth_sweeps, blend=config.smooth_blend)


def _build_controller(config: ExperimentConfig, sys, barrier,
                      field: Optional[SafeProbabilityField], nominal: NominalPolicy):
    kind = config.controller
    params = SafetyCertParams(epsilon=config.epsilon, alpha_gain=config.alpha_gain)
    cap = _drift_cap_args(config)
    if kind == "nominal":
        return nominal
    if kind == "stocbf":
        return StoCBFPolicy(sys, barrier, eta=config.eta, nominal=nominal,
                            equality=config.equality)
    if kind == "prsbc":
        return PrSBCPolicy(sys, barrier, eta=config.eta, eps=config.epsilon, dt=config.dt,
                           nominal=nominal, equality=config.equality)
    if kind == "cvar":
        return CVaRPolicy(sys, barrier, gamma=config.gamma, beta=config.beta, dt=config.dt,
                          nominal=nominal, equality=config.equality)
    if field is None:
        raise ConfigError(f"controller {kind!r} requires a safe-probability field")
    if kind == "additive":
        return AdditivePolicy(sys, barrier, field, params, nominal=nominal, **cap)
    if kind == "constrained_opt":
        return ConstrainedOptPolicy(sys, barrier, field, params, nominal=nominal, **cap)
    if kind == "worst_case_equality":
        return WorstCaseEqualityPolicy(sys, barrier, field, params, nominal=nominal,
                                       gradient_floor=config.gradient_floor, **cap)
    if kind == "switching":
        inner_cfg = replace(config, controller=config.switching_inner)
        inner = _build_controller(inner_cfg, sys, barrier, field, nominal)
        if not hasattr(inner, "slack_at"):
            raise ConfigError(f"switching inner policy {config.switching_inner!r} has no safety check")
        return SwitchingPolicy(nominal, inner)
    raise ConfigError(f"unknown controller kind {kind!r}")


def _needs_field(config: ExperimentConfig) -> bool:
    kind = config.controller
    if kind in ("additive", "constrained_opt", "worst_case_equality", "switching"):
        return True
    return False


# -- experiment runner ---------------------------------------------------------

def run_experiment(config: ExperimentConfig,
                   field: Optional[SafeProbabilityField] = None) -> ExperimentReport:
    """Simulate the configured ensemble and assemble the per-step report.

    The expected safe probability always queries a field (computed per the
    config when the controller itself does not need one).  A precomputed
    ``field`` short-circuits the field build, which compare_controllers uses
    to share one field across controllers.
    """
    sys, barrier, horizon, margin, nominal = _build_parts(config)
    t_end = config.t_end
    if horizon.mode is HorizonMode.RECEDING:
        t_end = min(t_end, horizon.H)
    if field is None:
        field = build_field(config, sys, barrier, horizon, margin, nominal)
    controller = _build_controller(config, sys, barrier, field, nominal)

    n_steps = max(1, math.ceil(t_end / config.dt - 1e-9))
    seeds = [spawn_seed(config.seed, i) for i in range(config.n_trajectories)]

    def one(seed):
        return simulate(sys, controller, barrier, horizon, margin, [config.x0],
                        config.dt, t_end, seed)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            trajectories = list(pool.map(one, seeds))
    else:
        trajectories = [one(s) for s in seeds]

    times = trajectories[0].times
    states = np.stack([tr.states[:, 0] for tr in trajectories])          # (R, K+1)
    fell = np.stack([tr.fell_back for tr in trajectories])               # (R, K)

    margins_t = np.empty(n_steps + 1)
    L = float(margin.ell0)
    for k in range(n_steps + 1):
        margins_t[k] = L
        L = margin.advance(L, config.dt)

    phi = barrier.values(states[..., None])                              # (R, K+1)
    alive = np.minimum.accumulate(phi - margins_t[None, :], axis=1) >= 0.0
    empirical = alive.mean(axis=0)

    traj_expected = np.empty((config.n_trajectories, n_steps + 1))
    for k in range(n_steps + 1):
        T_k = horizon.T_at(times[k]) if horizon.mode is HorizonMode.RECEDING else horizon.H
        traj_expected[:, k] = field.value_many(states[:, k][:, None], margins_t[k], T_k)
    expected = traj_expected.mean(axis=0)

    fallback_count = np.zeros(n_steps + 1, dtype=int)
    fallback_count[:n_steps] = fell.sum(axis=0)

    fallback_rate = float(fell.mean()) if fell.size else 0.0
    if fallback_rate > config.fallback_rate_limit:
        raise FallbackRateExceeded(
            f"fallback rate {fallback_rate:.3f} exceeds limit {config.fallback_rate_limit:.3f}")

    report = ExperimentReport(
        label=config.label,
        times=times,
        mean_state=states.mean(axis=0),
        std_state=states.std(axis=0),
        expected_safe_prob=expected,
        empirical_safe_prob=empirical,
        fallback_count=fallback_count,
        metadata={
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "field_provenance": field.provenance,
            "field_policy_tag": field.policy_tag,
            "fallback_rate": fallback_rate,
        },
        config=config,
        trajectory_expected=traj_expected,
    )
    report.validate()
    return report


def compare_controllers(configs, shared_field: bool = True) -> ComparisonResult:
    """Run several controller configs on the same plant/seed and rank them."""
    configs = list(configs)
    if not configs:
        raise ConfigError("compare needs at least one config")
    base = configs[0]
    shared_keys = ("system_a", "system_gain", "system_noise", "barrier_offset", "x0",
                   "dt", "t_end", "seed", "horizon", "horizon_mode", "margin",
                   "ptype", "epsilon")
    for c in configs[1:]:
        for key in shared_keys:
            if getattr(c, key) != getattr(base, key):
                raise ConfigError(
                    f"configs disagree on {key}: {getattr(base, key)!r} vs {getattr(c, key)!r}")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("controller labels must be unique")

    field_cache: dict = {}
    reports = []
    for c in configs:
        key = (c.field_source, c.field_policy_tag, c.nominal_gain, c.ptype,
               c.x_min, c.x_max, c.x_nodes, c.t_nodes, c.controller if c.field_policy_tag == "overall" else "")
        if shared_field:
            if key not in field_cache:
                field_cache[key] = build_field(c)
            fld = field_cache[key]
        else:
            fld = None
        reports.append(run_experiment(c, field=fld))

    summary = []
    for rep, c in zip(reports, configs):
        per_traj = rep.trajectory_expected.mean(axis=1)
        summary.append({
            "label": rep.label,
            "time_avg_expected": float(per_traj.mean()),
            "stderr": float(per_traj.std(ddof=1) / math.sqrt(len(per_traj))),
            "terminal_empirical": float(rep.empirical_safe_prob[-1]),
            "terminal_expected": float(rep.expected_safe_prob[-1]),
        })
    return ComparisonResult(reports=reports, summary=summary)


# -- emission ------------------------------------------------------------------

_CSV_HEADER = "t,controller,mean_state,std_state,expected_safe_prob,empirical_safe_prob,fallback_count"


def emit_outputs(result, out_dir) -> dict:
    """Write timeseries.csv, resolved configs, and SVG plots; returns the paths.

    Accepts an ExperimentReport or a ComparisonResult.  Emission is
    deterministic and idempotent.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = result.reports if isinstance(result, ComparisonResult) else [result]

    csv_path = out / "timeseries.csv"
    lines = [_CSV_HEADER]
    for rep in reports:
        for k in range(len(rep.times)):
            lines.append(",".join([
                f"{rep.times[k]:.10g}",
                rep.label,
                f"{rep.mean_state[k]:.10g}",
                f"{rep.std_state[k]:.10g}",
                f"{rep.expected_safe_prob[k]:.10g}",
                f"{rep.empirical_safe_prob[k]:.10g}",
                str(int(rep.fallback_count[k])),
            ]))
    csv_path.write_text("\n".join(lines) + "\n")

    paths = {"timeseries": csv_path}
    for rep in reports:
        suffix = f".{rep.label}" if len(reports) > 1 else ""
        cfg_path = out / f"config.resolved{suffix}.toml"
        cfg_path.write_text(rep.config.to_toml())
        paths[f"config{suffix}"] = cfg_path

    if isinstance(result, ComparisonResult):
        summary_path = out / "summary.csv"
        rows = ["label,time_avg_expected,stderr,terminal_expected,terminal_empirical"]
        for s in result.summary:
            rows.append(f"{s['label']},{s['time_avg_expected']:.10g},{s['stderr']:.10g},"
                        f"{s['terminal_expected']:.10g},{s['terminal_empirical']:.10g}")
        summary_path.write_text("\n".join(rows) + "\n")
        paths["summary"] = summary_path

    state_series = [(rep.label, rep.times, rep.mean_state) for rep in reports]
    svgplot.line_plot(out / "mean_state.svg", "Ensemble mean state", "t [s]", "mean state",
                      state_series)
    prob_series = []
    for rep in reports:
        prob_series.append((f"{rep.label} E[F]", rep.times, rep.expected_safe_prob))
        prob_series.append((f"{rep.label} empirical", rep.times, rep.empirical_safe_prob, True))
    svgplot.line_plot(out / "safe_probability.svg", "Safe probability", "t [s]", "probability",
                      prob_series, y_range=(0.0, 1.0))
    paths["mean_state_plot"] = out / "mean_state.svg"
    paths["probability_plot"] = out / "safe_probability.svg"
    return paths
