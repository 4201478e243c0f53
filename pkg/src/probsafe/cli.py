"""probsafe command line.

Subcommands:
  field             compute a safe-probability field and save it (+ CSV export)
  simulate          run one experiment and emit CSV/plots
  compare           run several configs on a shared plant and emit a combined report
  validate-oracles  check the estimators and solvers against closed-form values

Exit codes: 0 success, 2 config error, 3 infeasibility-rate limit exceeded,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys as _sys
from pathlib import Path

from .cde_field import CflError, SchemeFailureError, solve_cde
from .dynamics import (
    HorizonMode,
    HorizonSpec,
    IntegrationBlowupError,
    MarginSpec,
    affine_barrier,
    linear_1d,
    simulate,
)
from .controllers import NominalPolicy
from .harness import (
    ConfigError,
    ExperimentConfig,
    FallbackRateExceeded,
    build_field,
    compare_controllers,
    emit_outputs,
    run_experiment,
)
from . import oracles
from .safety_prob import mc_probability

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FALLBACK = 3
EXIT_NUMERICAL = 4


def _cmd_field(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    field = build_field(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field_path = out / f"field.{config.label}.txt"
    field.save(field_path)
    field.to_csv(out / f"field.{config.label}.csv")
    print(f"wrote {field_path}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = ExperimentConfig.from_toml(args.config)
    report = run_experiment(config)
    paths = emit_outputs(report, args.out)
    print(f"wrote {paths['timeseries']}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    configs = [ExperimentConfig.from_toml(p) for p in args.configs]
    result = compare_controllers(configs)
    paths = emit_outputs(result, args.out)
    for row in result.summary:
        print(f"{row['label']:>24s}  time-avg E[F] = {row['time_avg_expected']:.4f}"
              f"  terminal empirical = {row['terminal_empirical']:.3f}")
    print(f"wrote {paths['timeseries']}")
    return EXIT_OK


def _cmd_validate_oracles(args) -> int:
    """Exercise every closed-form oracle against the estimators and solvers."""
    failures = 0
    n_mc = 4000 if args.fast else 40000
    dt = 2e-3 if args.fast else 1e-3

    def check(name, got, want, tol):
        nonlocal failures
        ok = abs(got - want) <= tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name}: got {got:.6f}, expected {want:.6f} (tol {tol:.4g})")

    # reflection principle, invariance: driftless sigma=2, phi = x - 1
    sys0 = linear_1d(0.0, 0.0, 2.0)
    barrier = affine_barrier([1.0], -1.0)
    zero = NominalPolicy.zero(1)
    want = oracles.brownian_stay_above(3.0, 1.0, 2.0, 1.0)
    est = mc_probability(sys0, zero, barrier, "II", [3.0], 0.0, 1.0, dt, n_mc, seed=20260808)
    check("mc reflection (type II)", est.value, want, 3 * est.stderr + 0.02)

    from .cde_field import GridSpec
    grid = GridSpec.for_1d(-1.0, 11.0, 481, 1.0, 51)
    fld = solve_cde(sys0, zero, barrier, HorizonSpec(HorizonMode.FIXED, 1.0),
                    MarginSpec(0.0), "II", grid)
    from .dynamics import AugmentedState
    check("cde reflection (type II)", fld.value(AugmentedState.at(barrier, 1.0, 0.0, [3.0])),
          want, 0.02)

    # first-entry (recovery) against the hitting-probability closed form
    want_hit = oracles.brownian_hit_prob(0.0, 1.0, 2.0, 1.0)
    est = mc_probability(sys0, zero, barrier, "IV", [0.0], 0.0, 1.0, dt, n_mc, seed=4)
    check("mc hitting (type IV)", est.value, want_hit, 3 * est.stderr + 0.02)
    fld34 = solve_cde(sys0, zero, barrier, HorizonSpec(HorizonMode.FIXED, 1.0),
                      MarginSpec(0.0), "IV", GridSpec.for_1d(-9.0, 3.0, 481, 1.0, 51))
    check("cde hitting (type IV)", fld34.value(AugmentedState.at(barrier, 1.0, 0.0, [0.0])),
          want_hit, 0.02)

    # normal quantile by bisection on the CDF
    from scipy.special import ndtr
    lo, hi = -10.0, 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ndtr(mid) < 0.9:
            lo = mid
        else:
            hi = mid
    check("normal quantile 0.9", oracles.normal_quantile(0.9), 0.5 * (lo + hi), 1e-9)

    # Gaussian lower CVaR: closed form vs quadrature
    check("gaussian lower cvar", oracles.gaussian_lower_cvar(0.0, 1.0, 0.1),
          oracles.gaussian_lower_cvar_quadrature(0.0, 1.0, 0.1), 1e-8)

    # noiseless closed loop vs the ODE solution x0 e^{-t/2}
    sysv = linear_1d(2.0, 1.0, 0.0)
    nom = NominalPolicy.linear(2.5, 1)
    tr = simulate(sysv, nom, barrier, HorizonSpec(HorizonMode.FIXED, 10.0), MarginSpec(0.0),
                  [3.0], 1e-4, 3.0, seed=1)
    check("noiseless closed form", float(tr.states[20000, 0]), 3.0 * math.exp(-1.0), 1e-3)

    # the noiseless loop crosses phi = 0 at t = 2 ln 3 < 2.0
    from .safety_prob import first_exit_time
    check("noiseless first exit", first_exit_time(tr, barrier, 0.0), 2.0 * math.log(3.0),
          1e-4 + 1e-9)

    # type identities on one ensemble
    e1 = mc_probability(sys0, zero, barrier, "I", [2.0], 0.3, 0.7, 0.01, 2000, seed=11)
    e2 = mc_probability(sys0, zero, barrier, "II", [2.0], 0.3, 0.7, 0.01, 2000, seed=11)
    check("type I == type II", e1.value, e2.value, 0.0)

    print(f"{'all oracles passed' if failures == 0 else f'{failures} oracle check(s) failed'}")
    return EXIT_OK if failures == 0 else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probsafe", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("field", help="compute and save a safe-probability field")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_field)

    p = sub.add_parser("simulate", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("compare", help="run several configs on a shared plant")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("validate-oracles", help="closed-form cross-checks")
    p.add_argument("--fast", action="store_true", help="smaller sample sizes")
    p.set_defaults(fn=_cmd_validate_oracles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=_sys.stderr)
        return EXIT_CONFIG
    except FallbackRateExceeded as err:
        print(f"infeasibility: {err}", file=_sys.stderr)
        return EXIT_FALLBACK
    except (CflError, SchemeFailureError, IntegrationBlowupError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=_sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    _sys.exit(main())
