"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion.  The worst-case comparison (criteria 3 and 5) is expected to
fail in part: with the benchmark parameters (alpha = 1, eps = 0.1, H = 10,
sigma = 2, dt = 0.1) the riskiest-allowed controller cannot hold the
ensemble-mean safe probability near 0.9 (the absorbing boundary violates the
standing feasibility assumption), and the chance-constrained and
tail-expectation baselines are strictly more conservative than the 0.9
target, which inverts the claimed ordering.  The assertions are kept as
stated rather than loosened; see the measured numbers in the failure detail.
"""

import math
import time

import numpy as np
import pytest

from probsafe import (
    AugmentedState,
    GridSpec,
    HorizonSpec,
    MarginSpec,
    linear_1d,
    mc_probability,
    smooth_mc_field,
    solve_cde,
)
from probsafe.cde_field import SafeProbabilityField
from probsafe.controllers import (
    ConstrainedOptPolicy,
    NominalPolicy,
    check_safety_condition,
    prsbc_policy,
    stocbf_policy,
)
from probsafe.controllers import SafetyCertParams
from probsafe.harness import ExperimentConfig, compare_controllers, emit_outputs, run_experiment
from probsafe.oracles import gaussian_lower_cvar

# reflection principle: 2 Phi(1) - 1
STAY_ABOVE = 0.6826894921370859
SEED = 20260808


def _verdict(num, name, ok, detail=""):
    print(f"\nACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'}"
          + (f" -- {detail}" if detail else ""))
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------

def test_criterion_1_first_passage_oracles(driftless_system, barrier):
    t0 = time.time()
    est = mc_probability(driftless_system, NominalPolicy.zero(1), barrier, "II",
                         [3.0], 0.0, 1.0, 1e-3, 100_000, seed=SEED)
    grid = GridSpec.for_1d(-1.0, 11.0, 481, 1.0, 51)
    fld = solve_cde(driftless_system, NominalPolicy.zero(1), barrier,
                    HorizonSpec("fixed", 1.0), MarginSpec(0.0), "II", grid)
    cde = fld.value(AugmentedState.at(barrier, 1.0, 0.0, [3.0]))
    elapsed = time.time() - t0
    mc_err = abs(est.value - STAY_ABOVE)
    cde_err = abs(cde - STAY_ABOVE)
    _verdict(1, "first-passage oracle",
             mc_err <= 0.02 and cde_err <= 0.02 and elapsed < 120.0,
             f"mc={est.value:.4f} (err {mc_err:.4f}), cde={cde:.4f} (err {cde_err:.4f}), "
             f"runtime {elapsed:.1f}s")


def test_criterion_2_identity_suite(driftless_system, barrier):
    zero = NominalPolicy.zero(1)
    rng = np.random.default_rng(SEED)
    all_equal = True
    for case in range(20):
        x = float(rng.uniform(-2.0, 6.0))
        L = float(rng.uniform(-1.0, 2.0))
        T = float(rng.integers(2, 25)) * 0.1
        kw = dict(dt=0.02, n_samples=2000, seed=SEED + case)
        p1 = mc_probability(driftless_system, zero, barrier, "I", [x], L, T, **kw)
        p2 = mc_probability(driftless_system, zero, barrier, "II", [x], L, T, **kw)
        p3 = mc_probability(driftless_system, zero, barrier, "III", [x], L, T, **kw)
        p4 = mc_probability(driftless_system, zero, barrier, "IV", [x], L, T, **kw)
        all_equal &= (p1.value == p2.value) and (p3.value == p4.value)
    _verdict(2, "type identities", all_equal, "I==II and III==IV on 20 shared ensembles")


# ---------------------------------------------------------------------------
# worst-case setting: all four controllers hold their own condition with
# equality; no nominal objective (the safety conditions act alone)

def _worst_case_configs():
    base = dict(nominal_gain=0.0, seed=SEED, dt=0.1, t_end=10.0, horizon=10.0,
                n_trajectories=50)
    return [
        ExperimentConfig(label="proposed", controller="worst_case_equality", **base),
        ExperimentConfig(label="cvar", controller="cvar", equality=True, **base),
        ExperimentConfig(label="prsbc", controller="prsbc", equality=True, **base),
        ExperimentConfig(label="stocbf", controller="stocbf", equality=True, **base),
    ]


@pytest.fixture(scope="module")
def worst_case_result():
    t0 = time.time()
    result = compare_controllers(_worst_case_configs())
    result.elapsed = time.time() - t0
    return result


def _summary_map(result):
    return {s["label"]: s for s in result.summary}


def test_criterion_3a_proposed_band(worst_case_result):
    rep = worst_case_result.reports[0]
    lo, hi = rep.expected_safe_prob.min(), rep.expected_safe_prob.max()
    ok = lo >= 0.85 and hi <= 1.0 and worst_case_result.elapsed < 600.0
    _verdict("3a", "worst-case proposed within [0.85, 1.0]", ok,
             f"min={lo:.3f}, max={hi:.3f}, runtime {worst_case_result.elapsed:.0f}s")


def test_criterion_3b_stocbf_dips(worst_case_result):
    rep = next(r for r in worst_case_result.reports if r.label == "stocbf")
    lo = rep.expected_safe_prob.min()
    _verdict("3b", "worst-case StoCBF falls below 0.85", lo < 0.85, f"min={lo:.3f}")


def test_criterion_3c_ordering(worst_case_result):
    s = _summary_map(worst_case_result)
    order = ["proposed", "cvar", "prsbc", "stocbf"]
    detail = ", ".join(f"{k}={s[k]['time_avg_expected']:.3f}±{s[k]['stderr']:.3f}"
                       for k in order)
    ok = True
    for hi, lo in zip(order[:-1], order[1:]):
        gap = s[hi]["time_avg_expected"] - s[lo]["time_avg_expected"]
        sep = 3.0 * math.hypot(s[hi]["stderr"], s[lo]["stderr"])
        if abs(gap) > sep and gap < 0:
            ok = False
    top = s["proposed"]["time_avg_expected"]
    strictly_highest = all(top > s[k]["time_avg_expected"] for k in order[1:])
    _verdict("3c", "worst-case ordering proposed > CVaR > PrSBC > StoCBF",
             ok and strictly_highest, detail)


def test_criterion_5_mean_forward_invariance(worst_case_result):
    rep = worst_case_result.reports[0]
    F = rep.trajectory_expected                      # (R, K+1)
    mean = F.mean(axis=0)
    diffs = np.diff(mean)
    se = np.std(np.diff(F, axis=1), axis=0, ddof=1) / math.sqrt(F.shape[0])
    mask = mean[:-1] <= 0.9
    violations = np.where(mask & (diffs < -3.0 * se))[0]
    worst = (f"worst step t={rep.times[violations[0]]:.1f}, diff={diffs[violations[0]]:.4f}, "
             f"-3se={-3 * se[violations[0]]:.4f}") if violations.size else "none"
    _verdict(5, "mean safe probability non-decreasing below the threshold",
             violations.size == 0,
             f"{violations.size} violating step(s) of {int(mask.sum())}; {worst}")


# ---------------------------------------------------------------------------
# switching setting: the safe action engages only when the proportional
# nominal violates the controller's own condition

def _switching_configs():
    base = dict(nominal_gain=2.5, seed=SEED, dt=0.1, t_end=10.0, horizon=10.0,
                n_trajectories=50)
    return [
        ExperimentConfig(label="proposed", controller="switching", **base),
        ExperimentConfig(label="cvar", controller="cvar", **base),
        ExperimentConfig(label="prsbc", controller="prsbc", **base),
        ExperimentConfig(label="stocbf", controller="stocbf", **base),
    ]


@pytest.fixture(scope="module")
def switching_result():
    return compare_controllers(_switching_configs())


def test_criterion_4_switching_reproduction(switching_result, tmp_path):
    s = _summary_map(switching_result)
    terminal = {k: s[k]["terminal_empirical"] for k in s}
    proposed = terminal["proposed"]
    highest = all(proposed >= terminal[k] for k in terminal)
    above_stocbf = proposed > terminal["stocbf"]

    a = emit_outputs(switching_result, tmp_path / "a")["timeseries"].read_bytes()
    b = emit_outputs(compare_controllers(_switching_configs()), tmp_path / "b")[
        "timeseries"].read_bytes()
    detail = ", ".join(f"{k}={v:.3f}" for k, v in terminal.items())
    _verdict(4, "switching terminal empirical safe probability",
             highest and above_stocbf and a == b, detail + "; CSV deterministic")


# ---------------------------------------------------------------------------

def test_criterion_6_controller_unit_contracts(benchmark_system, barrier, small_u0_field):
    params = SafetyCertParams(0.1, 1.0)
    nom = NominalPolicy.linear(2.5, 1)
    failures = []

    pol = ConstrainedOptPolicy(benchmark_system, barrier, small_u0_field, params, nominal=nom)
    for xq in (1.2, 1.8, 2.5, 3.5, 5.0):
        u_N = nom.control([xq], 0.0, 2.0)
        ok, _ = check_safety_condition(AugmentedState.at(barrier, 2.0, 0.0, [xq]), u_N,
                                       small_u0_field, params, benchmark_system, barrier)
        out = pol.step([xq], 0.0, 2.0)
        if ok != (out.u[0] == u_N[0]):
            failures.append(f"complementarity at x={xq}")
        if not ok and abs(out.slack) > 1e-9:
            failures.append(f"slack {out.slack:.2e} at x={xq}")

    sys0 = linear_1d(2.0, 1.0, 0.0)
    for xq, u_N in ((1.2, -3.0), (3.0, -7.5)):
        if prsbc_policy([xq], barrier, sys0, 1.0, 0.1, 0.1, [u_N]).u[0] != \
           stocbf_policy([xq], barrier, sys0, 1.0, [u_N]).u[0]:
            failures.append(f"prsbc sigma=0 reduction at x={xq}")
        a = prsbc_policy([xq], barrier, benchmark_system, 1.0, 0.5, 0.1, [u_N]).u[0]
        b = stocbf_policy([xq], barrier, benchmark_system, 1.0, [u_N]).u[0]
        if abs(a - b) > 1e-12:
            failures.append(f"prsbc eps=0.5 reduction at x={xq}")

    if abs(gaussian_lower_cvar(0.0, 1.0, 0.1) - (-1.755)) > 1e-3:
        failures.append("cvar gaussian value")

    _verdict(6, "controller unit contracts", not failures,
             "; ".join(failures) if failures else "complementarity, slack, reductions, cvar value")


@pytest.fixture(scope="module")
def benchmark_nominal_field(benchmark_system, barrier):
    grid = GridSpec.for_1d(-1.0, 7.0, 321, 10.0, 101)
    return solve_cde(benchmark_system, NominalPolicy.linear(2.5, 1), barrier,
                     HorizonSpec("fixed", 10.0), MarginSpec(0.0), "I", grid)


def test_criterion_7_field_quality(benchmark_system, barrier, benchmark_nominal_field):
    fld = benchmark_nominal_field
    nom = NominalPolicy.linear(2.5, 1)
    in_range = fld.values.min() >= 0.0 and fld.values.max() <= 1.0

    probes = [(x, T) for x in (1.5, 2.0, 2.5, 3.0, 4.0) for T in (0.5, 1.0, 2.0, 10.0)]
    worst_gap = 0.0
    agree = True
    for i, (xq, Tq) in enumerate(probes):
        est = mc_probability(benchmark_system, nom, barrier, "I", [xq], 0.0, Tq,
                             2e-3, 10_000, seed=SEED + 31 * i)
        got = fld.value(AugmentedState.at(barrier, Tq, 0.0, [xq]))
        gap = abs(got - est.value)
        tol = 3.0 * est.stderr + 0.02
        worst_gap = max(worst_gap, gap - tol)
        agree &= gap <= tol

    rng = np.random.default_rng(SEED)
    noisy = np.clip(fld.values + rng.normal(0.0, 0.05, fld.values.shape), 0.0, 1.0)
    raw = SafeProbabilityField(ptype="I", grid=fld.grid, values=noisy,
                               policy_tag="nominal", provenance="mc",
                               horizon=fld.horizon, margin=fld.margin,
                               barrier_normal=barrier.normal, phi_nodes=fld.phi_nodes)
    smoothed = smooth_mc_field(raw, benchmark_system, nom, barrier)
    rms_raw = float(np.sqrt(np.mean((raw.values - fld.values) ** 2)))
    rms_smooth = float(np.sqrt(np.mean((smoothed.values - fld.values) ** 2)))
    reduction = 1.0 - rms_smooth / rms_raw

    _verdict(7, "field quality", in_range and agree and reduction >= 0.40,
             f"range ok={in_range}, 20-probe agreement={agree} (worst excess "
             f"{worst_gap:.4f}), smoothing RMS reduction {100 * reduction:.0f}%")


def test_criterion_8_reproducibility(tmp_path):
    cfg = ExperimentConfig(label="repro", controller="worst_case_equality",
                           nominal_gain=0.0, seed=SEED, t_end=5.0, n_trajectories=20)
    payloads = []
    for jobs, name in ((1, "a"), (3, "b"), (1, "c")):
        rep = run_experiment(ExperimentConfig(**{**cfg.__dict__, "n_jobs": jobs}))
        payloads.append(emit_outputs(rep, tmp_path / name)["timeseries"].read_bytes())
    ok = payloads[0] == payloads[1] == payloads[2]
    _verdict(8, "byte-identical reruns across thread counts", ok,
             f"{len(payloads[0])} bytes")
