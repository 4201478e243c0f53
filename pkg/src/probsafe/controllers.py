"""Myopic safe controllers: the probability-space condition and three baselines.

The proposed family constrains the field generator,

    D_F(z, u) >= -alpha(F(z) - (1 - eps)),

which is affine in u, so a single closed-form projection handles the
constrained-optimisation form and an exact solve handles the worst-case
(equality) form.  The baselines constrain the barrier generator instead:

    StoCBF   L_f phi + L_g phi u + 1/2 tr(sigma sigma^T Hess phi) >= -eta phi
    PrSBC    same left side >= -eta phi + q_{1-eps} |L_sigma phi| / sqrt(dt)
    CVaR     one-step Gaussian model of phi_next; lower CVaR_beta >= gamma phi

PrSBC and CVaR use one-step Gaussian surrogates of their chance constraints
(the per-step noise of phi is N(0, |L_sigma phi|^2 dt)); both reduce to
StoCBF when the noise vanishes and PrSBC also does at eps = 0.5.

Every policy is a deterministic map (x, L, T) -> StepOutcome.  When the
constraint coefficient on u vanishes while the constraint is violated, the
policy emits the nominal action and flags the step instead of aborting, so
ensemble statistics stay unbiased.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cde_field import SafeProbabilityField, generator_parts
from .dynamics import BarrierSpec, ControlAffineSystem
from .oracles import normal_pdf, normal_quantile

__all__ = [
    "AdditivePolicy",
    "CVaRPolicy",
    "ConstrainedOptPolicy",
    "NominalPolicy",
    "Policy",
    "PrSBCPolicy",
    "SafetyCertParams",
    "StepOutcome",
    "StoCBFPolicy",
    "SwitchingPolicy",
    "WorstCaseEqualityPolicy",
    "additive_policy",
    "check_safety_condition",
    "constrained_opt_policy",
    "cvar_policy",
    "prsbc_policy",
    "stocbf_policy",
    "worst_case_equality_policy",
]

_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class StepOutcome:
    """One controller evaluation: action, condition status, and slack."""

    u: np.ndarray
    condition_satisfied: bool
    fell_back: bool
    slack: float


@dataclass(frozen=True)
class SafetyCertParams:
    """Tolerance eps and the class-K-like shaping function alpha.

    alpha must be monotonically increasing, concave or linear, with
    alpha(0) <= 0; the default is the identity scaled by ``alpha_gain``.
    Checked by sampling on construction.
    """

    epsilon: float = 0.1
    alpha_gain: float = 1.0
    alpha: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.alpha is None and self.alpha_gain <= 0:
            raise ValueError("alpha_gain must be positive")
        fn = self.alpha_of
        ys = np.linspace(-2.0, 2.0, 41)
        vals = np.array([fn(y) for y in ys])
        if np.any(np.diff(vals) < -1e-9):
            raise ValueError("alpha must be monotonically increasing")
        mid = np.array([fn(0.5 * (a + b)) for a, b in zip(ys[:-2], ys[2:])])
        if np.any(mid < 0.5 * (vals[:-2] + vals[2:]) - 1e-9):
            raise ValueError("alpha must be concave or linear")
        if fn(0.0) > 1e-12:
            raise ValueError("alpha(0) must be <= 0")

    def alpha_of(self, y: float) -> float:
        if self.alpha is not None:
            return float(self.alpha(y))
        return self.alpha_gain * float(y)

    @property
    def threshold(self) -> float:
        return 1.0 - self.epsilon


def _project(u_N: np.ndarray, a: np.ndarray, b: float,
             H: Optional[np.ndarray] = None) -> np.ndarray:
    """Minimal-deviation action under the single affine constraint a.u >= b."""
    if float(a @ u_N) >= b:
        return u_N.copy()
    if H is None:
        Hinv_a = a
    else:
        Hinv_a = np.linalg.solve(np.asarray(H, dtype=float), a)
    return u_N + ((b - float(a @ u_N)) / float(a @ Hinv_a)) * Hinv_a


def _equality(a: np.ndarray, b: float) -> np.ndarray:
    """Minimal-norm exact solution of a.u = b."""
    return (b / float(a @ a)) * a


# -- proposed-condition pieces ----------------------------------------------

def _condition_terms(z, u_or_none, field: SafeProbabilityField, params: SafetyCertParams,
                     sys: ControlAffineSystem, barrier: BarrierSpec):
    """(F, a, b, c0, clamped): the condition reads a.u >= b, slack = a.u - b."""
    F, a, c0, clamped = generator_parts(field, sys, barrier, z)
    b = -params.alpha_of(F - params.threshold) - c0
    return F, a, b, c0, clamped


def check_safety_condition(z, u, field: SafeProbabilityField, params: SafetyCertParams,
                           sys: ControlAffineSystem, barrier: BarrierSpec):
    """(satisfied, slack) of D_F(z, u) >= -alpha(F - (1 - eps))."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    _, a, b, _, _ = _condition_terms(z, u, field, params, sys, barrier)
    slack = float(a @ u) - b
    return slack >= 0.0, slack


def additive_policy(z, field: SafeProbabilityField, kappa, params: SafetyCertParams,
                    sys: ControlAffineSystem, barrier: BarrierSpec,
                    u_N: np.ndarray, drift_cap: Optional[float] = None) -> StepOutcome:
    """u = N + kappa(z) (L_g F)^T; the default kappa is the smallest nonnegative
    gain that restores the condition, so it vanishes on satisfied steps."""
    u_N = np.atleast_1d(np.asarray(u_N, dtype=float))
    zv = z.vector() if hasattr(z, "vector") else np.asarray(z, dtype=float)
    _, a, b, _, _ = _condition_terms(z, None, field, params, sys, barrier)
    slack_N = float(a @ u_N) - b
    a2 = float(a @ a)
    if kappa is not None:
        k = float(kappa(np.asarray(zv, dtype=float)))
        if k < 0:
            raise ValueError("kappa must be nonnegative")
    else:
        k = 0.0 if slack_N >= 0.0 or a2 <= _ZERO_TOL else -slack_N / a2
    if a2 <= _ZERO_TOL and slack_N < 0.0:
        return StepOutcome(u=u_N.copy(), condition_satisfied=False, fell_back=True, slack=slack_N)
    u = u_N + k * a
    if drift_cap is not None and k > 0.0:
        u, _ = _apply_drift_cap(sys, zv[3:], u, drift_cap)
    slack = float(a @ u) - b
    return StepOutcome(u=u, condition_satisfied=slack >= -1e-9, fell_back=False, slack=slack)


def constrained_opt_policy(z, field: SafeProbabilityField, params: SafetyCertParams,
                           sys: ControlAffineSystem, barrier: BarrierSpec,
                           u_N: np.ndarray, H: Optional[np.ndarray] = None,
                           drift_cap: Optional[float] = None) -> StepOutcome:
    """argmin (u - N)^T H (u - N) subject to the safety condition (closed form)."""
    u_N = np.atleast_1d(np.asarray(u_N, dtype=float))
    zv = z.vector() if hasattr(z, "vector") else np.asarray(z, dtype=float)
    _, a, b, _, _ = _condition_terms(z, None, field, params, sys, barrier)
    slack_N = float(a @ u_N) - b
    if slack_N >= 0.0:
        return StepOutcome(u=u_N.copy(), condition_satisfied=True, fell_back=False, slack=slack_N)
    if float(a @ a) <= _ZERO_TOL:
        return StepOutcome(u=u_N.copy(), condition_satisfied=False, fell_back=True, slack=slack_N)
    u = _project(u_N, a, b, H)
    capped = False
    if drift_cap is not None:
        u, capped = _apply_drift_cap(sys, zv[3:], u, drift_cap)
    slack = float(a @ u) - b
    return StepOutcome(u=u, condition_satisfied=(slack >= -1e-9), fell_back=False, slack=slack)


def worst_case_equality_policy(z, field: SafeProbabilityField, params: SafetyCertParams,
                               sys: ControlAffineSystem, barrier: BarrierSpec,
                               u_fallback: Optional[np.ndarray] = None,
                               gradient_floor: float = 1e-9,
                               drift_cap: Optional[float] = None) -> StepOutcome:
    """The riskiest admissible action: solves D_F(z, u) = -alpha(F - (1 - eps)).

    Where |L_g F| <= gradient_floor the equality is ill-posed and the policy
    falls back to the nominal action (flagged).  ``drift_cap`` optionally
    bounds the commanded state speed |f + g u|: on a saturated field the exact
    equality demands speeds of order 1/|grad F|, which a finite simulation
    step cannot follow; capped steps keep the action direction and report
    their true slack (the cap only ever errs on the safe side of the
    inequality when a descent is demanded).
    """
    zv = z.vector() if hasattr(z, "vector") else np.asarray(z, dtype=float)
    _, a, b, _, _ = _condition_terms(z, None, field, params, sys, barrier)
    if float(a @ a) <= max(gradient_floor, _ZERO_TOL) ** 2:
        u = (np.zeros(sys.dim_input) if u_fallback is None
             else np.atleast_1d(np.asarray(u_fallback, dtype=float)))
        slack = float(a @ u) - b
        return StepOutcome(u=u, condition_satisfied=slack >= 0.0, fell_back=True, slack=slack)
    u = _equality(a, b)
    capped = False
    if drift_cap is not None:
        u, capped = _apply_drift_cap(sys, zv[3:], u, drift_cap)
    slack = float(a @ u) - b
    return StepOutcome(u=u, condition_satisfied=slack >= -1e-9, fell_back=False, slack=slack)


def _apply_drift_cap(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray, cap: float):
    """Clamp the commanded state velocity |f + g u| to cap, keeping its direction.

    Returns (u, was_capped).  The replacement control realizes the capped
    drift in least squares; if the drift is uncontrollable (g ~ 0) the action
    is returned unchanged.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    f = np.asarray(sys.drift(x), dtype=float)
    g = np.asarray(sys.input_matrix(x), dtype=float).reshape(sys.dim_state, sys.dim_input)
    d = f + g @ u
    speed = float(np.linalg.norm(d))
    if speed <= cap:
        return u, False
    if float(np.abs(g).max()) <= _ZERO_TOL:
        return u, False
    target = d * (cap / speed)
    u_new, *_ = np.linalg.lstsq(g, target - f, rcond=None)
    return np.atleast_1d(u_new), True


def noise_matched_drift_cap(sys: ControlAffineSystem, x, dt: float, mult: float = 4.0) -> float:
    """A natural speed limit: mult sigma-spreads per step, |sigma|_F sqrt(dt) / dt."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.asarray(sys.diffusion(x), dtype=float)
    return mult * float(np.linalg.norm(s)) / math.sqrt(dt)


# -- barrier-generator baselines ---------------------------------------------

def _barrier_terms(sys: ControlAffineSystem, barrier: BarrierSpec, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.asarray(barrier.grad_phi(x), dtype=float)
    Hp = np.asarray(barrier.hess_phi(x), dtype=float)
    f = np.asarray(sys.drift(x), dtype=float)
    g = np.asarray(sys.input_matrix(x), dtype=float).reshape(sys.dim_state, sys.dim_input)
    s = np.asarray(sys.diffusion(x), dtype=float).reshape(sys.dim_state, sys.dim_noise)
    Lf = float(f @ grad)
    a = grad @ g
    tr = float(np.einsum("ik,jk,ij->", s, s, Hp))
    Lsig = grad @ s
    phi = float(barrier.phi(x))
    return phi, Lf, np.atleast_1d(a), tr, np.atleast_1d(Lsig)


def _barrier_step(a: np.ndarray, b: float, u_N: np.ndarray,
                  H: Optional[np.ndarray], equality: bool) -> StepOutcome:
    slack_N = float(a @ u_N) - b
    if float(a @ a) <= _ZERO_TOL:
        if equality or slack_N < 0.0:
            return StepOutcome(u=u_N.copy(), condition_satisfied=slack_N >= 0.0,
                               fell_back=True, slack=slack_N)
        return StepOutcome(u=u_N.copy(), condition_satisfied=True, fell_back=False, slack=slack_N)
    if equality:
        u = _equality(a, b)
    else:
        if slack_N >= 0.0:
            return StepOutcome(u=u_N.copy(), condition_satisfied=True, fell_back=False, slack=slack_N)
        u = _project(u_N, a, b, H)
    slack = float(a @ u) - b
    return StepOutcome(u=u, condition_satisfied=True, fell_back=False, slack=slack)


def stocbf_policy(x, barrier: BarrierSpec, sys: ControlAffineSystem, eta: float,
                  u_N, H=None, equality: bool = False) -> StepOutcome:
    """Mean-generator barrier condition D_phi(x, u) >= -eta phi(x)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    phi, Lf, a, tr, _ = _barrier_terms(sys, barrier, x)
    b = -eta * phi - Lf - 0.5 * tr
    return _barrier_step(a, b, np.atleast_1d(np.asarray(u_N, dtype=float)), H, equality)


def prsbc_policy(x, barrier: BarrierSpec, sys: ControlAffineSystem, eta: float,
                 eps: float, dt: float, u_N, H=None, equality: bool = False) -> StepOutcome:
    """Chance-constrained barrier condition, one-step Gaussian surrogate.

    P(D_phi + eta phi >= 0) >= 1 - eps over a step of length dt becomes
    D_phi + eta phi >= q_{1-eps} |L_sigma phi| / sqrt(dt).
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi, Lf, a, tr, Lsig = _barrier_terms(sys, barrier, x)
    q = normal_quantile(1.0 - eps)
    b = -eta * phi + q * float(np.linalg.norm(Lsig)) / math.sqrt(dt) - Lf - 0.5 * tr
    return _barrier_step(a, b, np.atleast_1d(np.asarray(u_N, dtype=float)), H, equality)


def cvar_policy(x, barrier: BarrierSpec, sys: ControlAffineSystem, gamma: float,
                beta: float, dt: float, u_N, H=None, equality: bool = False) -> StepOutcome:
    """Tail-expectation barrier condition CVaR_beta(phi_next) >= gamma phi.

    One-step Gaussian model: phi_next ~ N(phi + drift dt, |L_sigma phi|^2 dt),
    whose lower CVaR is mean - |L_sigma phi| sqrt(dt) pdf(q_beta) / beta.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if dt <= 0:
        raise ValueError("dt must be positive")
    phi, Lf, a, tr, Lsig = _barrier_terms(sys, barrier, x)
    sd = float(np.linalg.norm(Lsig)) * math.sqrt(dt)
    tail = 0.0 if beta >= 1.0 or sd == 0.0 else sd * normal_pdf(normal_quantile(beta)) / beta
    b = ((gamma - 1.0) * phi + tail) / dt - Lf - 0.5 * tr
    return _barrier_step(a, b, np.atleast_1d(np.asarray(u_N, dtype=float)), H, equality)


# -- policy objects -----------------------------------------------------------

class Policy:
    """Deterministic decision rule (x, L, T) -> StepOutcome."""

    depends_on_horizon = False
    depends_on_margin = False

    def step(self, x, L: float, T: float) -> StepOutcome:
        raise NotImplementedError

    def control(self, x, L: float, T: float) -> np.ndarray:
        return self.step(x, L, T).u

    def control_batch(self, X: np.ndarray, L: float, T: float) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([np.atleast_1d(self.step(x, L, T).u) for x in X])


class NominalPolicy(Policy):
    """Wraps a plain state-feedback map; no safety condition of its own."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim_input: int,
                 batch_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.fn = fn
        self.dim_input = int(dim_input)
        self.batch_fn = batch_fn

    @classmethod
    def linear(cls, gain: float, dim: int = 1) -> "NominalPolicy":
        gain = float(gain)

        def fn(x):
            return -gain * np.atleast_1d(np.asarray(x, dtype=float))

        def batch_fn(X):
            return -gain * np.atleast_2d(np.asarray(X, dtype=float))

        return cls(fn, dim, batch_fn)

    @classmethod
    def zero(cls, dim: int = 1) -> "NominalPolicy":
        return cls.linear(0.0, dim)

    def step(self, x, L, T) -> StepOutcome:
        u = np.atleast_1d(np.asarray(self.fn(np.asarray(x, dtype=float)), dtype=float))
        return StepOutcome(u=u, condition_satisfied=True, fell_back=False, slack=math.nan)

    def control_batch(self, X, L, T) -> np.ndarray:
        if self.batch_fn is not None:
            return np.atleast_2d(np.asarray(self.batch_fn(X), dtype=float))
        return super().control_batch(X, L, T)


class _FieldPolicy(Policy):
    """Shared plumbing for policies conditioned on a safe-probability field.

    ``drift_cap`` limits the commanded state speed |f + g u|: None disables,
    a float fixes the cap, and "auto" uses ``cap_mult`` noise spreads per
    step of length ``dt`` (requires dt).
    """

    depends_on_horizon = True
    depends_on_margin = True

    def __init__(self, sys: ControlAffineSystem, barrier: BarrierSpec,
                 field: SafeProbabilityField, params: SafetyCertParams,
                 nominal: Optional[NominalPolicy] = None,
                 drift_cap=None, dt: Optional[float] = None, cap_mult: float = 4.0):
        self.sys = sys
        self.barrier = barrier
        self.field = field
        self.params = params
        self.nominal = nominal or NominalPolicy.zero(sys.dim_input)
        if drift_cap == "auto" and dt is None:
            raise ValueError("drift_cap='auto' requires dt")
        self.drift_cap = drift_cap
        self.dt = dt
        self.cap_mult = float(cap_mult)

    def _cap_at(self, x) -> Optional[float]:
        if self.drift_cap is None:
            return None
        if self.drift_cap == "auto":
            return noise_matched_drift_cap(self.sys, x, self.dt, self.cap_mult)
        return float(self.drift_cap)

    def _z(self, x, L, T):
        from .dynamics import AugmentedState
        return AugmentedState.at(self.barrier, T, L, x)

    def slack_at(self, x, L, T, u) -> float:
        _, slack = check_safety_condition(self._z(x, L, T), u, self.field, self.params,
                                          self.sys, self.barrier)
        return slack


class AdditivePolicy(_FieldPolicy):
    def __init__(self, *args, kappa: Optional[Callable] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.kappa = kappa

    def step(self, x, L, T) -> StepOutcome:
        u_N = self.nominal.control(x, L, T)
        return additive_policy(self._z(x, L, T), self.field, self.kappa, self.params,
                               self.sys, self.barrier, u_N, drift_cap=self._cap_at(x))


class ConstrainedOptPolicy(_FieldPolicy):
    def __init__(self, *args, H: Optional[np.ndarray] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.H = H

    def step(self, x, L, T) -> StepOutcome:
        u_N = self.nominal.control(x, L, T)
        return constrained_opt_policy(self._z(x, L, T), self.field, self.params,
                                      self.sys, self.barrier, u_N, self.H,
                                      drift_cap=self._cap_at(x))


class WorstCaseEqualityPolicy(_FieldPolicy):
    def __init__(self, *args, gradient_floor: float = 1e-9, **kwargs):
        super().__init__(*args, **kwargs)
        self.gradient_floor = float(gradient_floor)

    def step(self, x, L, T) -> StepOutcome:
        u_fb = self.nominal.control(x, L, T)
        return worst_case_equality_policy(self._z(x, L, T), self.field, self.params,
                                          self.sys, self.barrier, u_fallback=u_fb,
                                          gradient_floor=self.gradient_floor,
                                          drift_cap=self._cap_at(x))


class _BarrierPolicy(Policy):
    """Shared plumbing for the barrier-generator baselines."""

    def __init__(self, sys: ControlAffineSystem, barrier: BarrierSpec,
                 nominal: Optional[NominalPolicy] = None, H: Optional[np.ndarray] = None,
                 equality: bool = False):
        self.sys = sys
        self.barrier = barrier
        self.nominal = nominal or NominalPolicy.zero(sys.dim_input)
        self.H = H
        self.equality = bool(equality)

    def _eval(self, x, u_N) -> StepOutcome:
        raise NotImplementedError

    def step(self, x, L, T) -> StepOutcome:
        return self._eval(x, self.nominal.control(x, L, T))

    def slack_at(self, x, L, T, u) -> float:
        a, b = self._eval_parts(x)
        return float(a @ np.atleast_1d(np.asarray(u, dtype=float))) - b

    def _eval_parts(self, x):
        raise NotImplementedError


class StoCBFPolicy(_BarrierPolicy):
    def __init__(self, sys, barrier, eta: float = 1.0, **kwargs):
        super().__init__(sys, barrier, **kwargs)
        self.eta = float(eta)

    def _eval_parts(self, x):
        phi, Lf, a, tr, _ = _barrier_terms(self.sys, self.barrier, x)
        return a, -self.eta * phi - Lf - 0.5 * tr

    def _eval(self, x, u_N) -> StepOutcome:
        return stocbf_policy(x, self.barrier, self.sys, self.eta, u_N, self.H, self.equality)


class PrSBCPolicy(_BarrierPolicy):
    def __init__(self, sys, barrier, eta: float = 1.0, eps: float = 0.1,
                 dt: float = 0.1, **kwargs):
        super().__init__(sys, barrier, **kwargs)
        self.eta = float(eta)
        self.eps = float(eps)
        self.dt = float(dt)

    def _eval_parts(self, x):
        phi, Lf, a, tr, Lsig = _barrier_terms(self.sys, self.barrier, x)
        q = normal_quantile(1.0 - self.eps)
        return a, -self.eta * phi + q * float(np.linalg.norm(Lsig)) / math.sqrt(self.dt) - Lf - 0.5 * tr

    def _eval(self, x, u_N) -> StepOutcome:
        return prsbc_policy(x, self.barrier, self.sys, self.eta, self.eps, self.dt,
                            u_N, self.H, self.equality)


class CVaRPolicy(_BarrierPolicy):
    def __init__(self, sys, barrier, gamma: float = 0.65, beta: float = 0.1,
                 dt: float = 0.1, **kwargs):
        super().__init__(sys, barrier, **kwargs)
        self.gamma = float(gamma)
        self.beta = float(beta)
        self.dt = float(dt)

    def _eval_parts(self, x):
        phi, Lf, a, tr, Lsig = _barrier_terms(self.sys, self.barrier, x)
        sd = float(np.linalg.norm(Lsig)) * math.sqrt(self.dt)
        tail = 0.0 if self.beta >= 1.0 or sd == 0.0 else sd * normal_pdf(normal_quantile(self.beta)) / self.beta
        return a, ((self.gamma - 1.0) * phi + tail) / self.dt - Lf - 0.5 * tr

    def _eval(self, x, u_N) -> StepOutcome:
        return cvar_policy(x, self.barrier, self.sys, self.gamma, self.beta, self.dt,
                           u_N, self.H, self.equality)


class SwitchingPolicy(Policy):
    """Nominal action when it already passes the inner policy's check, else defer."""

    def __init__(self, nominal: NominalPolicy, inner: Policy):
        if not hasattr(inner, "slack_at"):
            raise TypeError("inner policy must expose slack_at(x, L, T, u)")
        self.nominal = nominal
        self.inner = inner

    @property
    def depends_on_horizon(self):
        return getattr(self.inner, "depends_on_horizon", False)

    @property
    def depends_on_margin(self):
        return getattr(self.inner, "depends_on_margin", False)

    def step(self, x, L, T) -> StepOutcome:
        u_N = self.nominal.control(x, L, T)
        slack = self.inner.slack_at(x, L, T, u_N)
        if slack >= 0.0:
            return StepOutcome(u=u_N, condition_satisfied=True, fell_back=False, slack=slack)
        out = self.inner.step(x, L, T)
        return StepOutcome(u=out.u, condition_satisfied=False, fell_back=out.fell_back,
                           slack=out.slack)
