import math

import numpy as np
import pytest

from probsafe import (
    AugmentedState,
    BarrierSpec,
    ControlAffineSystem,
    HorizonSpec,
    IntegrationBlowupError,
    MarginSpec,
    Trajectory,
    augmented_dynamics,
    euler_maruyama_step,
    f_phi,
    linear_1d,
    simulate,
)
from probsafe.controllers import NominalPolicy
from probsafe.dynamics import wiener_increments


def test_euler_step_deterministic_arithmetic(benchmark_system):
    # x + (2x + u) dt with the noise draw zero
    out = euler_maruyama_step(benchmark_system, [3.0], [-7.5], 0.1, [0.0])
    assert out[0] == pytest.approx(2.85, abs=1e-12)


def test_euler_step_zero_dt_returns_x(benchmark_system):
    out = euler_maruyama_step(benchmark_system, [3.0], [0.0], 0.0, [0.0])
    assert out[0] == 3.0


def test_euler_step_noise_term(benchmark_system):
    out = euler_maruyama_step(benchmark_system, [3.0], [-7.5], 0.1, [0.05])
    assert out[0] == pytest.approx(2.95, abs=1e-12)


def test_euler_step_blowup_raises():
    sys_bad = ControlAffineSystem(
        1, 1, 1,
        drift=lambda x: np.array([1e308]) * max(1.0, abs(float(x[0]))),
        input_matrix=lambda x: np.ones((1, 1)),
        diffusion=lambda x: np.ones((1, 1)),
    )
    with np.errstate(over="ignore"), pytest.raises(IntegrationBlowupError):
        euler_maruyama_step(sys_bad, [1e300], [0.0], 10.0, [0.0])


def test_simulate_matches_ode_closed_form(barrier):
    # sigma = 0, nominal -2.5x: dx = -x/2 dt, so x(t) = 3 exp(-t/2)
    sys0 = linear_1d(2.0, 1.0, 0.0)
    nom = NominalPolicy.linear(2.5, 1)
    tr = simulate(sys0, nom, barrier, HorizonSpec("fixed", 10.0), MarginSpec(0.0),
                  [3.0], 1e-4, 2.0, seed=3)
    assert abs(tr.states[-1, 0] - 3.0 * math.exp(-1.0)) < 1e-3


def test_simulate_single_step(benchmark_system, barrier):
    tr = simulate(benchmark_system, NominalPolicy.zero(1), barrier,
                  HorizonSpec("fixed", 1.0), MarginSpec(0.0), [3.0], 0.1, 0.1, seed=5)
    assert tr.n_steps == 1
    assert len(tr.times) == 2


def test_simulate_deterministic_for_equal_seeds(benchmark_system, barrier):
    kw = dict(x0=[3.0], dt=0.1, t_end=2.0, seed=42)
    a = simulate(benchmark_system, NominalPolicy.linear(2.5, 1), barrier,
                 HorizonSpec("fixed", 10.0), MarginSpec(0.0), **kw)
    b = simulate(benchmark_system, NominalPolicy.linear(2.5, 1), barrier,
                 HorizonSpec("fixed", 10.0), MarginSpec(0.0), **kw)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.inputs, b.inputs)


def test_weak_order_at_least_point_nine(barrier):
    # noiseless Euler converges at first order to the ODE flow
    sys0 = linear_1d(2.0, 1.0, 0.0)
    nom = NominalPolicy.linear(2.5, 1)
    truth = 3.0 * math.exp(-0.5)
    errs = []
    for dt in (2e-3, 1e-3):
        tr = simulate(sys0, nom, barrier, HorizonSpec("fixed", 10.0), MarginSpec(0.0),
                      [3.0], dt, 1.0, seed=1)
        errs.append(abs(tr.states[-1, 0] - truth))
    order = math.log2(errs[0] / errs[1])
    assert order >= 0.9


def test_receding_horizon_refuses_long_runs(benchmark_system, barrier):
    with pytest.raises(ValueError, match="receding"):
        simulate(benchmark_system, NominalPolicy.zero(1), barrier,
                 HorizonSpec("receding", 1.0), MarginSpec(0.0), [3.0], 0.1, 2.0, seed=0)


def test_augmented_dynamics_benchmark(benchmark_system, barrier):
    tf, tg, ts = augmented_dynamics(benchmark_system, barrier,
                                    HorizonSpec("fixed", 10.0), MarginSpec(0.0))
    z = AugmentedState.at(barrier, 10.0, 0.0, [3.0]).vector()
    assert np.allclose(tf(z), [0.0, 0.0, 6.0, 6.0])
    assert np.allclose(tg(z).ravel(), [0.0, 0.0, 1.0, 1.0])
    assert np.allclose(ts(z).ravel(), [0.0, 0.0, 2.0, 2.0])


def test_augmented_dynamics_receding_first_row(benchmark_system, barrier):
    tf, _, _ = augmented_dynamics(benchmark_system, barrier,
                                  HorizonSpec("receding", 10.0), MarginSpec(0.0))
    z = AugmentedState.at(barrier, 4.0, 0.0, [2.0]).vector()
    assert tf(z)[0] == -1.0


def test_augmented_dynamics_zero_noise(barrier):
    sys0 = linear_1d(2.0, 1.0, 0.0)
    tf, _, ts = augmented_dynamics(sys0, barrier, HorizonSpec("fixed", 10.0), MarginSpec(0.0))
    z = AugmentedState.at(barrier, 10.0, 0.0, [3.0]).vector()
    assert np.all(ts(z) == 0.0)
    # trace term vanishes, leaving the pure Lie derivative
    assert tf(z)[2] == pytest.approx(f_phi(sys0, barrier, [3.0]))
    assert tf(z)[2] == pytest.approx(6.0)


def test_f_phi_values(benchmark_system, barrier):
    assert f_phi(benchmark_system, barrier, [3.0]) == pytest.approx(6.0)

    quad = BarrierSpec(phi=lambda x: float(x[0] ** 2),
                       grad_phi=lambda x: np.array([2.0 * x[0]]),
                       hess_phi=lambda x: np.array([[2.0]]))
    sys1 = linear_1d(0.0, 1.0, 1.0)
    assert f_phi(sys1, quad, [0.7]) == pytest.approx(1.0)

    sys_zero = linear_1d(0.0, 1.0, 0.0)
    assert f_phi(sys_zero, barrier, [1.3]) == pytest.approx(0.0)


def test_noise_stream_statistics():
    dt = 0.1
    draws = np.concatenate([wiener_increments(123, 0, k, dt, (1000,)) for k in range(100)])
    n = draws.size
    se_mean = math.sqrt(dt / n)
    assert abs(draws.mean()) < 4 * se_mean
    se_var = dt * math.sqrt(2.0 / n)
    assert abs(draws.var() - dt) < 4 * se_var


def test_noise_stream_is_counter_based():
    a = wiener_increments(9, 2, 5, 0.1, (8,))
    b = wiener_increments(9, 2, 5, 0.1, (8,))
    c = wiener_increments(9, 2, 6, 0.1, (8,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_augmentation_consistency_along_path(benchmark_system, barrier):
    tr = simulate(benchmark_system, NominalPolicy.linear(2.5, 1), barrier,
                  HorizonSpec("fixed", 10.0), MarginSpec(0.0), [3.0], 0.1, 5.0, seed=8)
    for t, x in zip(tr.times, tr.states):
        z = AugmentedState.at(barrier, 10.0, 0.0, x)
        z.check_consistency(barrier, tol=1e-12)


def test_barrier_finite_difference_validation(barrier):
    pts = [np.array([v]) for v in (-1.0, 0.5, 3.0)]
    barrier.validate(pts)

    broken = BarrierSpec(phi=lambda x: float(x[0]) - 1.0,
                         grad_phi=lambda x: np.array([2.0]),  # wrong slope
                         hess_phi=lambda x: np.zeros((1, 1)))
    with pytest.raises(ValueError, match="grad_phi"):
        broken.validate(pts)


def test_augmented_state_invariants(barrier):
    z = AugmentedState.at(barrier, 10.0, 0.0, [3.0])
    assert z.phi == pytest.approx(2.0)
    with pytest.raises(ValueError, match="horizon"):
        AugmentedState(-0.5, 0.0, 2.0, np.array([3.0]))
    with pytest.raises(ValueError, match="inconsistent"):
        AugmentedState(1.0, 0.0, 5.0, np.array([3.0])).check_consistency(barrier)


def test_trajectory_shape_invariants():
    with pytest.raises(ValueError, match="lengths"):
        Trajectory(dt=0.1, times=np.arange(3) * 0.1, states=np.zeros((3, 1)),
                   inputs=np.zeros((3, 1)), seed=0)
    with pytest.raises(ValueError, match="spaced"):
        Trajectory(dt=0.1, times=np.array([0.0, 0.1, 0.3]), states=np.zeros((3, 1)),
                   inputs=np.zeros((2, 1)), seed=0)


def test_horizon_and_margin_specs():
    fixed = HorizonSpec("fixed", 10.0)
    assert fixed.T_at(3.0) == 10.0 and fixed.f_T == 0.0
    rec = HorizonSpec("receding", 10.0)
    assert rec.T_at(3.0) == 7.0 and rec.f_T == -1.0
    with pytest.raises(ValueError):
        rec.T_at(11.0)

    fixed_margin = MarginSpec(0.5)
    assert fixed_margin.advance(0.5, 0.1) == 0.5
    moving = MarginSpec(0.5, f_ell=lambda L: -0.2 * L)
    assert moving.advance(0.5, 0.1) == pytest.approx(0.49)
