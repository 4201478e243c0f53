"""Path statistics and Monte Carlo estimates of the four safe-probability types.

Given a trajectory of the closed loop and a margin L, four scalar statistics
summarise safety over a window [0, T]:

    worst margin     min_t phi(X_t)        -> type I   P(worst >= L)
    first exit time  inf{t : phi(X_t) < L} -> type II  P(exit > T)
    best margin      max_t phi(X_t)        -> type III P(best >= L)
    first entry time inf{t : phi(X_t) >= L}-> type IV  P(entry <= T)

All events are evaluated at sampled times only (no bridge correction between
samples), the tie phi = L counts as safe, and "never" is encoded as +inf so
comparisons against T behave correctly.  With those conventions the type I/II
and type III/IV estimators computed from one ensemble are exactly equal.

The ensemble engine steps all samples (and, for fields, all grid nodes) as one
vectorized state block.  Per-step noise comes from a single counter-based
stream shared by every node at a given sample index (common random numbers),
which keeps finite differences of neighbouring nodes quiet; scalar point
estimates get their own streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .dynamics import (
    BarrierSpec,
    ControlAffineSystem,
    HorizonMode,
    HorizonSpec,
    MarginSpec,
    Trajectory,
    step_generator,
)

__all__ = [
    "MCEstimate",
    "ProbabilityType",
    "SweepStats",
    "best_margin",
    "ensemble_sweep",
    "first_entry_time",
    "first_exit_time",
    "mc_field",
    "mc_probability",
    "worst_margin",
]

NEVER = math.inf


class ProbabilityType(str, Enum):
    """The four probability types; I/II quantify invariance, III/IV convergence."""

    I = "I"
    II = "II"
    III = "III"
    IV = "IV"

    @property
    def invariance(self) -> bool:
        return self in (ProbabilityType.I, ProbabilityType.II)

    @classmethod
    def parse(cls, value) -> "ProbabilityType":
        if isinstance(value, cls):
            return value
        return cls(str(value).upper())


@dataclass(frozen=True)
class MCEstimate:
    """A Bernoulli-mean estimate with its binomial standard error."""

    value: float
    stderr: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"estimate {self.value} outside [0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.stderr > 0.5 / math.sqrt(self.n_samples) + 1e-12:
            raise ValueError("stderr exceeds the Bernoulli bound")


def worst_margin(traj: Trajectory, barrier: BarrierSpec) -> float:
    """Minimum of phi over the sampled path."""
    return float(traj.margins(barrier).min())


def best_margin(traj: Trajectory, barrier: BarrierSpec) -> float:
    """Maximum of phi over the sampled path."""
    return float(traj.margins(barrier).max())


def first_exit_time(traj: Trajectory, barrier: BarrierSpec, L: float) -> float:
    """First sampled time with phi < L, or +inf if the path never exits."""
    below = traj.margins(barrier) < L
    idx = np.argmax(below)
    if not below[idx]:
        return NEVER
    return float(traj.times[idx])


def first_entry_time(traj: Trajectory, barrier: BarrierSpec, L: float) -> float:
    """First sampled time with phi >= L, or +inf if the path never enters."""
    inside = traj.margins(barrier) >= L
    idx = np.argmax(inside)
    if not inside[idx]:
        return NEVER
    return float(traj.times[idx])


@dataclass(frozen=True)
class SweepStats:
    """Per (margin, node, slice) safe and entered fractions from one ensemble."""

    slice_times: np.ndarray       # (nT,)
    margins: np.ndarray           # (nL,) initial margin values
    safe: np.ndarray              # (nL, N, nT)  P(min (phi - L) >= 0 up to slice)
    entered: np.ndarray           # (nL, N, nT)  P(max (phi - L) >= 0 up to slice)
    n_samples: int
    seed: int

    def fraction(self, ptype: ProbabilityType) -> np.ndarray:
        return self.safe if ProbabilityType.parse(ptype).invariance else self.entered


def _batched_control(policy, X2: np.ndarray, L: float, T: float) -> np.ndarray:
    fn = getattr(policy, "control_batch", None)
    if fn is not None:
        return np.asarray(fn(X2, L, T), dtype=float)
    return np.stack([np.atleast_1d(np.asarray(policy.step(x, L, T).u, dtype=float)) for x in X2])


def _system_fields(sys: ControlAffineSystem, X: np.ndarray):
    """(f, g, sigma) over stacked states (..., n)."""
    if sys.vectorized:
        f = np.asarray(sys.drift(X), dtype=float)
        g = np.asarray(sys.input_matrix(X), dtype=float)
        s = np.asarray(sys.diffusion(X), dtype=float)
        return f, g, s
    lead = X.shape[:-1]
    flat = X.reshape(-1, sys.dim_state)
    f = np.stack([np.asarray(sys.drift(x), dtype=float) for x in flat]).reshape(lead + (sys.dim_state,))
    g = np.stack([np.asarray(sys.input_matrix(x), dtype=float) for x in flat]).reshape(
        lead + (sys.dim_state, sys.dim_input))
    s = np.stack([np.asarray(sys.diffusion(x), dtype=float) for x in flat]).reshape(
        lead + (sys.dim_state, sys.dim_noise))
    return f, g, s


def ensemble_sweep(sys: ControlAffineSystem, policy, barrier: BarrierSpec,
                   horizon: HorizonSpec, margin: MarginSpec,
                   x0_nodes: np.ndarray, margins: np.ndarray,
                   dt: float, slice_times: np.ndarray,
                   n_samples: int, seed: int, T_start: Optional[float] = None) -> SweepStats:
    """Evolve one common-noise ensemble from every node and record event stats.

    x0_nodes has shape (N, n); margins is the list of initial margin values the
    events are judged against (each advanced by the margin drift).  The policy
    horizon argument starts at ``T_start`` (default: the horizon H) and follows
    the horizon mode.  Slice times must be multiples of dt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0_nodes = np.atleast_2d(np.asarray(x0_nodes, dtype=float))
    margins = np.atleast_1d(np.asarray(margins, dtype=float))
    slice_times = np.asarray(slice_times, dtype=float)
    if slice_times.ndim != 1 or len(slice_times) == 0:
        raise ValueError("slice_times must be a nonempty vector")
    if len(slice_times) > 1 and np.any(np.diff(slice_times) <= 0):
        raise ValueError("slice_times must be strictly increasing")
    steps_per_slice = slice_times / dt
    if np.abs(steps_per_slice - np.rint(steps_per_slice)).max() > 1e-6:
        raise ValueError("slice times must be multiples of dt")
    slice_steps = np.rint(steps_per_slice).astype(int)

    N, n = x0_nodes.shape
    nL, nT = len(margins), len(slice_times)
    S = int(n_samples)
    if S < 1:
        raise ValueError("n_samples must be positive")

    X = np.repeat(x0_nodes[:, None, :], S, axis=1)  # (N, S, n)
    phi = barrier.values(X)                          # (N, S)
    L_now = margins.copy()
    run_min = phi[None, :, :] - L_now[:, None, None]
    run_max = run_min.copy()

    safe = np.empty((nL, N, nT))
    entered = np.empty((nL, N, nT))

    def record(j):
        safe[:, :, j] = (run_min >= 0.0).mean(axis=2)
        entered[:, :, j] = (run_max >= 0.0).mean(axis=2)

    next_slice = 0
    if slice_steps[next_slice] == 0:
        record(0)
        next_slice += 1

    T0 = horizon.H if T_start is None else float(T_start)
    sqrt_dt = math.sqrt(dt)
    n_steps = int(slice_steps[-1])
    L_policy = float(margins[0]) if nL == 1 else float(margin.ell0)

    for k in range(n_steps):
        t = k * dt
        T = T0 if horizon.mode is HorizonMode.FIXED else max(T0 - t, 0.0)
        u = _batched_control(policy, X.reshape(N * S, n), L_policy, T).reshape(N, S, sys.dim_input)
        f, g, s = _system_fields(sys, X)
        # common random numbers: one (S, omega) block per step, shared by all nodes
        dW = step_generator(seed, 0, k).normal(0.0, sqrt_dt, size=(S, sys.dim_noise))
        X = X + (f + np.einsum("nsij,nsj->nsi", g, u)) * dt + np.einsum("nsiw,sw->nsi", s, dW)
        if not np.isfinite(X).all():
            bad = X[~np.isfinite(X)]
            raise FloatingPointError(f"ensemble produced non-finite states (example {bad.flat[0]})")
        L_now = np.array([margin.advance(L, dt) for L in L_now]) if not margin.is_fixed else L_now
        if nL == 1:
            L_policy = float(L_now[0])
        phi = barrier.values(X)
        adj = phi[None, :, :] - L_now[:, None, None]
        np.minimum(run_min, adj, out=run_min)
        np.maximum(run_max, adj, out=run_max)
        while next_slice < nT and slice_steps[next_slice] == k + 1:
            record(next_slice)
            next_slice += 1

    return SweepStats(slice_times=slice_times, margins=margins, safe=safe,
                      entered=entered, n_samples=S, seed=int(seed))


def mc_probability(sys: ControlAffineSystem, policy, barrier: BarrierSpec,
                   ptype, x, L: float, T: float, dt: float,
                   n_samples: int, seed: int,
                   horizon: Optional[HorizonSpec] = None,
                   margin: Optional[MarginSpec] = None) -> MCEstimate:
    """Monte Carlo estimate of one probability type at a single (x, L, T).

    The window is sampled at times {0, dt, ..., K dt} with K = floor(T / dt);
    exit detection at sampled times biases exit probabilities low by O(sqrt(dt)).
    """
    ptype = ProbabilityType.parse(ptype)
    if T <= 0:
        raise ValueError("window length T must be positive")
    horizon = horizon or HorizonSpec(HorizonMode.FIXED, max(T, dt))
    margin = margin or MarginSpec(ell0=float(L))
    K = int(math.floor(T / dt + 1e-9))
    stats = ensemble_sweep(sys, policy, barrier, horizon, margin,
                           np.atleast_1d(np.asarray(x, dtype=float))[None, :],
                           np.array([float(L)]), dt,
                           np.array([K * dt]), n_samples, seed, T_start=T)
    p = float(stats.fraction(ptype)[0, 0, 0])
    stderr = math.sqrt(p * (1.0 - p) / n_samples)
    return MCEstimate(value=p, stderr=stderr, n_samples=int(n_samples), seed=int(seed))


def mc_field(sys: ControlAffineSystem, policy, barrier: BarrierSpec,
             ptype, grid, dt: float, n_samples: int, seed: int,
             horizon: Optional[HorizonSpec] = None,
             margin: Optional[MarginSpec] = None,
             policy_tag: str = "nominal"):
    """Raw Monte Carlo field on a grid, with common random numbers across nodes.

    Returns a SafeProbabilityField (provenance "mc") whose stderr array is
    populated.  When the policy depends on its horizon argument and the
    horizon is fixed, each window length gets its own sweep so the closed
    loop seen from every node matches that window.
    """
    from .cde_field import SafeProbabilityField  # local import to avoid a cycle

    ptype = ProbabilityType.parse(ptype)
    t_nodes = grid.t_axis.nodes
    horizon = horizon or HorizonSpec(HorizonMode.FIXED, max(float(t_nodes[-1]), dt))
    margins = grid.l_axis.nodes if grid.l_axis is not None else np.array(
        [float(margin.ell0) if margin is not None else 0.0])
    margin = margin or MarginSpec(ell0=float(margins[0]))

    nodes = grid.x_node_matrix()  # (N, n)
    x_shape = grid.x_shape

    t_dependent = bool(getattr(policy, "depends_on_horizon", False))
    if t_dependent and horizon.mode is HorizonMode.FIXED and len(t_nodes) > 1:
        frac = np.empty((len(margins), nodes.shape[0], len(t_nodes)))
        for j, Tj in enumerate(t_nodes):
            if Tj <= 0:
                sweep = ensemble_sweep(sys, policy, barrier, horizon, margin, nodes,
                                       margins, dt, np.array([0.0]), n_samples, seed,
                                       T_start=max(float(Tj), dt))
            else:
                K = int(round(Tj / dt))
                sweep = ensemble_sweep(sys, policy, barrier, horizon, margin, nodes,
                                       margins, dt, np.array([K * dt]), n_samples, seed,
                                       T_start=float(Tj))
            frac[:, :, j] = sweep.fraction(ptype)[:, :, 0]
    else:
        steps = np.rint(t_nodes / dt).astype(int)
        if np.abs(t_nodes - steps * dt).max() > 1e-6:
            raise ValueError("grid T nodes must be multiples of the simulation dt")
        sweep = ensemble_sweep(sys, policy, barrier, horizon, margin, nodes, margins,
                               dt, steps * dt, n_samples, seed)
        frac = sweep.fraction(ptype)

    # (nL, N, nT) -> (*x_shape, [nL], nT)
    values = np.moveaxis(frac, 0, 1).reshape(x_shape + ((len(margins),) if grid.l_axis is not None else ()) + (len(t_nodes),))
    if grid.l_axis is None:
        values = values.reshape(x_shape + (len(t_nodes),))
    stderr = np.sqrt(values * (1.0 - values) / n_samples)
    return SafeProbabilityField(ptype=ptype, grid=grid, values=values,
                                policy_tag=policy_tag, provenance="mc",
                                horizon=horizon, margin=margin,
                                stderr=stderr, barrier_normal=barrier.normal)
