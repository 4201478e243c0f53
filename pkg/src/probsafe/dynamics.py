"""Control-affine SDE plant, barrier geometry, and seeded trajectory simulation.

The plant is

    dX = (f(X) + g(X) u) dt + sigma(X) dW,

with state X in R^n, input u in R^m and an omega-dimensional Wiener process W.
Safety is measured through a scalar barrier phi; the margin-L safe set is
{x : phi(x) >= L}.

For horizon/margin bookkeeping the state is augmented to

    Z = [T, L, phi(X), X]  in R^(n+3),

whose drift/input/diffusion fields come from :func:`augmented_dynamics`.
T carries the outlook window (constant for a fixed horizon, decreasing at
unit rate for a receding one) and L the safety margin.

Simulation is Euler-Maruyama with a fixed step.  Noise is drawn from
counter-based Philox streams keyed by (seed, stream) with the 256-bit
counter positioned by step index, so every (trajectory, step) pair owns a
disjoint block of draws and results are bit-reproducible under any
execution order.  phi is recomputed from the state at every step instead of
being integrated through its own SDE row, which keeps the redundant
coordinate exactly consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AugmentedState",
    "BarrierSpec",
    "ControlAffineSystem",
    "HorizonMode",
    "HorizonSpec",
    "IntegrationBlowupError",
    "MarginSpec",
    "Trajectory",
    "affine_barrier",
    "augmented_dynamics",
    "euler_maruyama_step",
    "f_phi",
    "linear_1d",
    "simulate",
    "spawn_seed",
    "step_generator",
    "wiener_increments",
]

_MASK64 = (1 << 64) - 1
# Each step owns 2**128 Philox counter blocks; draws within a step never
# spill into the next step's block.
_STEP_COUNTER_SHIFT = 128


class IntegrationBlowupError(RuntimeError):
    """An integration step produced a non-finite state."""

    def __init__(self, message: str, state: Optional[np.ndarray] = None, step: Optional[int] = None):
        super().__init__(message)
        self.state = state
        self.step = step


def step_generator(seed: int, stream: int, step: int) -> np.random.Generator:
    """Counter-based generator for one (stream, step) pair under a master seed."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=step << _STEP_COUNTER_SHIFT)
    return np.random.Generator(bitgen)


def wiener_increments(seed: int, stream: int, step: int, dt: float, shape) -> np.ndarray:
    """N(0, dt * I) increments for one step of one stream."""
    return step_generator(seed, stream, step).normal(0.0, math.sqrt(dt), size=shape)


def spawn_seed(master_seed: int, index: int) -> int:
    """Derive a stable per-trajectory 64-bit seed from a master seed."""
    ss = np.random.SeedSequence(entropy=master_seed & _MASK64, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ControlAffineSystem:
    """SDE plant dX = (f(X) + g(X) u) dt + sigma(X) dW.

    ``drift`` maps (n,) -> (n,), ``input_matrix`` (n,) -> (n, m) and
    ``diffusion`` (n,) -> (n, omega).  When ``vectorized`` is true the
    callables also accept stacked states of shape (..., n) and return the
    correspondingly stacked outputs, which the ensemble estimators exploit.
    """

    dim_state: int
    dim_input: int
    dim_noise: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    vectorized: bool = False

    def __post_init__(self):
        for name in ("dim_state", "dim_input", "dim_noise"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        probe = np.zeros(self.dim_state)
        f0 = np.asarray(self.drift(probe), dtype=float)
        g0 = np.asarray(self.input_matrix(probe), dtype=float)
        s0 = np.asarray(self.diffusion(probe), dtype=float)
        if f0.shape != (self.dim_state,):
            raise ValueError(f"drift returned shape {f0.shape}, expected ({self.dim_state},)")
        if g0.shape != (self.dim_state, self.dim_input):
            raise ValueError(f"input_matrix returned shape {g0.shape}")
        if s0.shape != (self.dim_state, self.dim_noise):
            raise ValueError(f"diffusion returned shape {s0.shape}")
        if not (np.isfinite(f0).all() and np.isfinite(g0).all() and np.isfinite(s0).all()):
            raise ValueError("system fields must be finite at the probe state")


def linear_1d(a: float, gain: float = 1.0, noise: float = 2.0) -> ControlAffineSystem:
    """Scalar benchmark plant dX = (a X + gain * u) dt + noise dW."""

    a = float(a)
    gain = float(gain)
    noise = float(noise)

    def drift(x):
        return a * np.asarray(x, dtype=float)

    def input_matrix(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), gain)

    def diffusion(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), noise)

    return ControlAffineSystem(1, 1, 1, drift, input_matrix, diffusion, vectorized=True)


@dataclass(frozen=True)
class BarrierSpec:
    """Scalar barrier phi with analytic gradient and Hessian.

    ``validate`` cross-checks the supplied derivatives against central finite
    differences; construction-time validation is the caller's hook (the
    affine constructor below does it implicitly through exactness).
    """

    phi: Callable[[np.ndarray], float]
    grad_phi: Callable[[np.ndarray], np.ndarray]
    hess_phi: Callable[[np.ndarray], np.ndarray]
    vectorized: bool = False
    normal: Optional[np.ndarray] = None  # set for affine barriers; enables margin-shift reconstruction

    def values(self, states: np.ndarray) -> np.ndarray:
        """phi over stacked states of shape (..., n)."""
        states = np.asarray(states, dtype=float)
        if self.vectorized:
            return np.asarray(self.phi(states), dtype=float)
        flat = states.reshape(-1, states.shape[-1])
        out = np.array([float(self.phi(s)) for s in flat])
        return out.reshape(states.shape[:-1])

    def validate(self, points: Sequence[np.ndarray], rtol: float = 1e-5, h: float = 1e-5) -> None:
        """Check grad/hess against central differences of phi at the given states."""
        for x in points:
            x = np.asarray(x, dtype=float)
            n = x.size
            g = np.asarray(self.grad_phi(x), dtype=float)
            H = np.asarray(self.hess_phi(x), dtype=float)
            g_fd = np.zeros(n)
            H_fd = np.zeros((n, n))
            for i in range(n):
                e = np.zeros(n)
                e[i] = h
                g_fd[i] = (float(self.phi(x + e)) - float(self.phi(x - e))) / (2 * h)
                H_fd[:, i] = (np.asarray(self.grad_phi(x + e), dtype=float)
                              - np.asarray(self.grad_phi(x - e), dtype=float)) / (2 * h)
            scale = max(1.0, float(np.abs(g).max(initial=0.0)))
            if np.abs(g - g_fd).max(initial=0.0) > rtol * scale + 1e-7:
                raise ValueError(f"grad_phi disagrees with finite differences at {x}")
            hscale = max(1.0, float(np.abs(H).max(initial=0.0)))
            if np.abs(H - H_fd).max(initial=0.0) > rtol * hscale + 1e-6:
                raise ValueError(f"hess_phi disagrees with finite differences at {x}")


def affine_barrier(normal, offset: float) -> BarrierSpec:
    """phi(x) = normal . x + offset, exact gradient and zero Hessian."""
    w = np.atleast_1d(np.asarray(normal, dtype=float))
    n = w.size
    off = float(offset)

    def phi(x):
        x = np.asarray(x, dtype=float)
        return x @ w + off

    def grad(x):
        return w.copy()

    def hess(x):
        return np.zeros((n, n))

    return BarrierSpec(phi, grad, hess, vectorized=True, normal=w.copy())


class HorizonMode(str, Enum):
    FIXED = "fixed"
    RECEDING = "receding"


@dataclass(frozen=True)
class HorizonSpec:
    """Outlook window: constant H (fixed) or H - t (receding, valid for t <= H)."""

    mode: HorizonMode
    H: float

    def __post_init__(self):
        object.__setattr__(self, "mode", HorizonMode(self.mode))
        if not self.H > 0:
            raise ValueError("horizon H must be positive")

    @property
    def f_T(self) -> float:
        return 0.0 if self.mode is HorizonMode.FIXED else -1.0

    def T_at(self, t: float) -> float:
        if self.mode is HorizonMode.FIXED:
            return self.H
        if t > self.H + 1e-12:
            raise ValueError(f"receding horizon exhausted: t={t} > H={self.H}")
        return max(self.H - t, 0.0)


@dataclass(frozen=True)
class MarginSpec:
    """Safety margin L with optional drift dL = f_ell(L) dt; None means fixed."""

    ell0: float = 0.0
    f_ell: Optional[Callable[[float], float]] = None

    @property
    def is_fixed(self) -> bool:
        return self.f_ell is None

    def rate(self, L: float) -> float:
        return 0.0 if self.f_ell is None else float(self.f_ell(L))

    def advance(self, L: float, dt: float) -> float:
        return L if self.f_ell is None else L + self.rate(L) * dt


@dataclass(frozen=True)
class AugmentedState:
    """The (T, L, phi, x) vector driving safety computations."""

    T: float
    L: float
    phi: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if self.T < -1e-12:
            raise ValueError(f"remaining horizon must be nonnegative, got {self.T}")

    @classmethod
    def at(cls, barrier: BarrierSpec, T: float, L: float, x) -> "AugmentedState":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(float(T), float(L), float(barrier.phi(x)), x)

    def vector(self) -> np.ndarray:
        return np.concatenate(([self.T, self.L, self.phi], self.x))

    def check_consistency(self, barrier: BarrierSpec, tol: float = 1e-12) -> None:
        ref = float(barrier.phi(self.x))
        if abs(self.phi - ref) > tol * max(1.0, abs(ref)):
            raise ValueError(f"phi field {self.phi} inconsistent with barrier value {ref}")


def f_phi(sys: ControlAffineSystem, barrier: BarrierSpec, x) -> float:
    """Drift of phi(X): L_f phi + 1/2 tr(sigma sigma^T Hess phi)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.asarray(barrier.grad_phi(x), dtype=float)
    H = np.asarray(barrier.hess_phi(x), dtype=float)
    s = np.asarray(sys.diffusion(x), dtype=float).reshape(sys.dim_state, sys.dim_noise)
    f = np.asarray(sys.drift(x), dtype=float)
    return float(f @ g + 0.5 * np.einsum("ik,jk,ij->", s, s, H))


def augmented_dynamics(sys: ControlAffineSystem, barrier: BarrierSpec,
                       horizon: HorizonSpec, margin: MarginSpec):
    """Drift/input/diffusion fields of Z = [T, L, phi, x].

    Returns callables (tilde_f, tilde_g, tilde_sigma) on z-vectors of length
    n+3.  The T and L rows of tilde_g and tilde_sigma are zero; the phi row
    carries the Lie derivatives L_g phi and L_sigma phi.
    """
    n, m, w = sys.dim_state, sys.dim_input, sys.dim_noise

    def tilde_f(z):
        z = np.asarray(z, dtype=float)
        x = z[3:]
        return np.concatenate((
            [horizon.f_T, margin.rate(z[1]), f_phi(sys, barrier, x)],
            np.asarray(sys.drift(x), dtype=float),
        ))

    def tilde_g(z):
        z = np.asarray(z, dtype=float)
        x = z[3:]
        grad = np.asarray(barrier.grad_phi(x), dtype=float)
        gmat = np.asarray(sys.input_matrix(x), dtype=float).reshape(n, m)
        out = np.zeros((n + 3, m))
        out[2, :] = grad @ gmat
        out[3:, :] = gmat
        return out

    def tilde_sigma(z):
        z = np.asarray(z, dtype=float)
        x = z[3:]
        grad = np.asarray(barrier.grad_phi(x), dtype=float)
        smat = np.asarray(sys.diffusion(x), dtype=float).reshape(n, w)
        out = np.zeros((n + 3, w))
        out[2, :] = grad @ smat
        out[3:, :] = smat
        return out

    return tilde_f, tilde_g, tilde_sigma


def euler_maruyama_step(sys: ControlAffineSystem, x, u, dt: float, dW) -> np.ndarray:
    """One Euler-Maruyama step x + (f + g u) dt + sigma dW."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    f = np.asarray(sys.drift(x), dtype=float)
    g = np.asarray(sys.input_matrix(x), dtype=float).reshape(sys.dim_state, sys.dim_input)
    s = np.asarray(sys.diffusion(x), dtype=float).reshape(sys.dim_state, sys.dim_noise)
    out = x + (f + g @ u) * dt + s @ dW
    if not np.isfinite(out).all():
        raise IntegrationBlowupError("non-finite state after Euler-Maruyama step", state=out)
    return out


@dataclass(frozen=True)
class Trajectory:
    """A sampled closed-loop path with the per-step controller flags.

    times has one more entry than inputs; states aligns with times.
    """

    dt: float
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    seed: int
    condition_satisfied: Optional[np.ndarray] = None
    fell_back: Optional[np.ndarray] = None
    slack: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        if len(times) != len(states) or len(times) != len(inputs) + 1:
            raise ValueError("times/states/inputs lengths are inconsistent")
        if len(times) > 1:
            gaps = np.diff(times)
            if not np.allclose(gaps, self.dt, rtol=0, atol=1e-9 * max(1.0, self.dt)):
                raise ValueError("times must be equally spaced by dt")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_steps(self) -> int:
        return len(self.inputs)

    def margins(self, barrier: BarrierSpec) -> np.ndarray:
        """phi along the path."""
        return barrier.values(self.states)


def simulate(sys: ControlAffineSystem, policy, barrier: BarrierSpec,
             horizon: HorizonSpec, margin: MarginSpec, x0, dt: float, t_end: float,
             seed: int, stream: int = 0) -> Trajectory:
    """Closed-loop Euler-Maruyama run of ceil(t_end / dt) steps.

    ``policy`` must expose ``step(x, L, T) -> StepOutcome``.  The margin is
    advanced by explicit Euler on f_ell and the horizon argument follows the
    HorizonSpec.  Identical (arguments, seed, stream) give a bit-identical
    trajectory regardless of how many trajectories run concurrently.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < dt - 1e-12:
        raise ValueError("t_end must be at least dt")
    n_steps = max(1, math.ceil(t_end / dt - 1e-9))
    if horizon.mode is HorizonMode.RECEDING and n_steps * dt > horizon.H + 1e-9:
        raise ValueError(
            f"receding horizon H={horizon.H} cannot cover t_end={t_end}; clamp t_end <= H"
        )

    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    states = np.empty((n_steps + 1, sys.dim_state))
    inputs = np.empty((n_steps, sys.dim_input))
    cond = np.empty(n_steps, dtype=bool)
    fell = np.empty(n_steps, dtype=bool)
    slacks = np.empty(n_steps, dtype=float)
    states[0] = x
    L = float(margin.ell0)

    for k in range(n_steps):
        t = k * dt
        T = horizon.T_at(t)
        out = policy.step(x, L, T)
        u = np.atleast_1d(np.asarray(out.u, dtype=float))
        dW = wiener_increments(seed, stream, k, dt, (sys.dim_noise,))
        try:
            x = euler_maruyama_step(sys, x, u, dt, dW)
        except IntegrationBlowupError as err:
            raise IntegrationBlowupError(
                f"integration blew up at step {k} (t={t:.6g})", state=err.state, step=k
            ) from None
        states[k + 1] = x
        inputs[k] = u
        cond[k] = bool(out.condition_satisfied)
        fell[k] = bool(out.fell_back)
        slacks[k] = float(out.slack)
        L = margin.advance(L, dt)

    times = np.arange(n_steps + 1) * dt
    return Trajectory(dt=dt, times=times, states=states, inputs=inputs, seed=int(seed),
                      condition_satisfied=cond, fell_back=fell, slack=slacks)
