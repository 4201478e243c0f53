"""Gridded safe-probability fields: PDE solve, MC smoothing, and generator queries.

The safe probability F, viewed as a function of the spatial coordinates and
the window length T, satisfies a convection-diffusion equation marched in T:

    dF/dT = rho . grad F + 1/2 tr(S Hess F),      S = sigma sigma^T,

where rho is the closed-loop drift (nominal or overall policy).  This is the
generator form; the equivalent divergence form 1/2 div(S grad F) +
(rho - 1/2 div S) . grad F collapses to it exactly, so no divergence
correction term is ever discretised.

Initial condition at T = 0 is the indicator 1{phi >= L} for every type.
Invariance types (I/II) pin 0 on the slab {phi < L} and solve on the safe
side; convergence types (III/IV) solve the first-entry problem on {phi < L}
with the target value 1 pinned on {phi >= L}.  Far-field edges use a zero
normal derivative.  Spatial discretisation is first-order upwind for
convection and centred second differences for diffusion, explicit with a
CFL guard or backward-Euler implicit (single spatial axis), both of which
satisfy a discrete maximum principle, so solved fields stay inside [0, 1].

Redundant coordinates are never discretised: for a fixed margin the field is
stored over (x, T) only.  Queries return the full augmented-space gradient
and Hessian with the phi entries folded into the x entries (which keeps the
generator assembly exact) and the margin entry reconstructed by the shift
equivalence dF/dL = -(grad_x F . w) / |w|^2 when the barrier is affine with
normal w.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .dynamics import (
    BarrierSpec,
    ControlAffineSystem,
    HorizonMode,
    HorizonSpec,
    MarginSpec,
    augmented_dynamics,
)
from .safety_prob import ProbabilityType, _batched_control

__all__ = [
    "AxisSpec",
    "CflError",
    "FieldSample",
    "GridSpec",
    "SafeProbabilityField",
    "SchemeFailureError",
    "field_gradient",
    "field_hessian",
    "field_value",
    "generator_parts",
    "generator_value",
    "smooth_mc_field",
    "solve_cde",
]

_RANGE_TOL = 1e-9


class CflError(RuntimeError):
    """Explicit time step violates the stability bound."""


class SchemeFailureError(RuntimeError):
    """The marched solution left [0, 1] beyond tolerance, or the operator is unsupported."""


@dataclass(frozen=True)
class AxisSpec:
    """A uniform grid axis."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("axis needs at least 2 nodes")
        if not self.hi > self.lo:
            raise ValueError("axis must have positive extent")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over the state axes, an optional margin axis, and the window axis."""

    x_axes: tuple
    t_axis: AxisSpec
    l_axis: Optional[AxisSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "x_axes", tuple(self.x_axes))
        if len(self.x_axes) == 0:
            raise ValueError("at least one state axis is required")
        for ax in self.x_axes:
            if ax.n < 3:
                raise ValueError("state axes need at least 3 nodes")
        if self.l_axis is not None and self.l_axis.n < 3:
            raise ValueError("margin axis needs at least 3 nodes")
        if abs(self.t_axis.lo) > 1e-12:
            raise ValueError("window axis must start at 0")

    @classmethod
    def for_1d(cls, x_min: float, x_max: float, x_nodes: int,
               t_max: float, t_nodes: int, l_axis: Optional[AxisSpec] = None) -> "GridSpec":
        return cls((AxisSpec(x_min, x_max, x_nodes),), AxisSpec(0.0, t_max, t_nodes), l_axis)

    @property
    def x_shape(self) -> tuple:
        return tuple(ax.n for ax in self.x_axes)

    @property
    def spatial_axes(self) -> tuple:
        return self.x_axes + ((self.l_axis,) if self.l_axis is not None else ())

    @property
    def value_shape(self) -> tuple:
        return tuple(ax.n for ax in self.spatial_axes) + (self.t_axis.n,)

    def x_node_matrix(self) -> np.ndarray:
        """All state nodes as an (N, n) matrix in row-major order."""
        mesh = np.meshgrid(*[ax.nodes for ax in self.x_axes], indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass(frozen=True)
class FieldSample:
    value: float
    gradient: np.ndarray      # length n+3, ordered (T, L, phi, x...)
    hessian: np.ndarray       # (n+3, n+3); spatial block populated
    clamped: bool


class _Interpolator:
    """Shared multilinear interpolation over a list of uniform axes."""

    def __init__(self, axes: Sequence[AxisSpec]):
        self.axes = list(axes)

    def locate(self, pts: np.ndarray):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != len(self.axes):
            raise ValueError(f"query has {pts.shape[1]} coordinates, grid has {len(self.axes)}")
        idx, frac = [], []
        clamped = np.zeros(pts.shape[0], dtype=bool)
        for d, ax in enumerate(self.axes):
            c = pts[:, d]
            clamped |= (c < ax.lo - 1e-12) | (c > ax.hi + 1e-12)
            c = np.clip(c, ax.lo, ax.hi)
            i = np.clip(((c - ax.lo) / ax.spacing).astype(int), 0, ax.n - 2)
            idx.append(i)
            frac.append((c - (ax.lo + i * ax.spacing)) / ax.spacing)
        return idx, frac, clamped

    def apply(self, values: np.ndarray, loc) -> np.ndarray:
        idx, frac, _ = loc
        d = len(self.axes)
        out = np.zeros(len(idx[0]))
        for corner in range(1 << d):
            w = np.ones(len(idx[0]))
            sel = []
            for a in range(d):
                if corner >> a & 1:
                    w = w * frac[a]
                    sel.append(idx[a] + 1)
                else:
                    w = w * (1.0 - frac[a])
                    sel.append(idx[a])
            out += w * values[tuple(sel)]
        return out


def _second_diff(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Centred second derivative along one axis, edges copied from the interior."""
    v = np.moveaxis(values, axis, 0)
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    out[0] = out[1]
    out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


@dataclass
class SafeProbabilityField:
    """Gridded values of one probability type with derivative queries.

    values has shape (*x_shape, [nL], nT).  phi_nodes caches the barrier at
    the state nodes (used for the pinned-slab invariants).  stderr is set for
    Monte Carlo provenance.
    """

    ptype: ProbabilityType
    grid: GridSpec
    values: np.ndarray
    policy_tag: str
    provenance: str
    horizon: HorizonSpec
    margin: MarginSpec
    stderr: Optional[np.ndarray] = None
    barrier_normal: Optional[np.ndarray] = None
    phi_nodes: Optional[np.ndarray] = None
    clamp_count: int = 0
    _cache: dict = dataclass_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ptype = ProbabilityType.parse(self.ptype)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.value_shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.value_shape}")
        if self.policy_tag not in ("nominal", "overall"):
            raise ValueError("policy_tag must be 'nominal' or 'overall'")
        if self.provenance not in ("cde", "mc", "mc_smoothed"):
            raise ValueError("provenance must be cde, mc or mc_smoothed")
        self._interp = _Interpolator(list(self.grid.spatial_axes) + [self.grid.t_axis])

    # -- invariants -----------------------------------------------------

    def validate(self, atol: float = 1e-9) -> None:
        v = self.values
        if v.min() < -atol or v.max() > 1.0 + atol:
            raise SchemeFailureError(
                f"field values leave [0,1]: min={v.min():.3e}, max={v.max():.3e}")
        if self.phi_nodes is not None:
            margins = (self.grid.l_axis.nodes if self.grid.l_axis is not None
                       else np.array([self.margin.ell0]))
            phi = self.phi_nodes.reshape(self.grid.x_shape)
            for li, L in enumerate(margins):
                sl = v[..., li, :] if self.grid.l_axis is not None else v
                indicator = (phi >= L).astype(float)
                if not np.allclose(sl[..., 0], indicator, atol=1e-9):
                    raise SchemeFailureError("T=0 slice differs from the indicator initial condition")
                if self.ptype.invariance:
                    pinned = sl[phi < L]
                    if pinned.size and np.abs(pinned).max() > 1e-9:
                        raise SchemeFailureError("invariance field is nonzero on the unsafe slab")
                else:
                    pinned = sl[phi >= L]
                    if pinned.size and np.abs(pinned - 1.0).max() > 1e-9:
                        raise SchemeFailureError("convergence field is not 1 on the target slab")

    # -- queries ---------------------------------------------------------

    def _point(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        n = len(self.grid.x_axes)
        if z.size != n + 3:
            raise ValueError(f"augmented state must have length {n + 3}")
        coords = list(z[3:3 + n])
        if self.grid.l_axis is not None:
            coords.append(z[1])
        coords.append(z[0])
        return np.array(coords)

    def _grad_array(self, axis: int) -> np.ndarray:
        key = ("g", axis)
        if key not in self._cache:
            spacings = [ax.spacing for ax in self.grid.spatial_axes] + [self.grid.t_axis.spacing]
            self._cache[key] = np.gradient(self.values, spacings[axis], axis=axis)
        return self._cache[key]

    def _hess_array(self, a: int, b: int) -> np.ndarray:
        key = ("h", min(a, b), max(a, b))
        if key not in self._cache:
            spacings = [ax.spacing for ax in self.grid.spatial_axes] + [self.grid.t_axis.spacing]
            if a == b:
                self._cache[key] = _second_diff(self.values, spacings[a], a)
            else:
                self._cache[key] = np.gradient(self._grad_array(min(a, b)), spacings[max(a, b)],
                                               axis=max(a, b))
        return self._cache[key]

    def value(self, z) -> float:
        z = z.vector() if hasattr(z, "vector") else z
        loc = self._interp.locate(self._point(z)[None, :])
        if loc[2][0]:
            self.clamp_count += 1
        return float(self._interp.apply(self.values, loc)[0])

    def value_many(self, X: np.ndarray, L: float, T: float) -> np.ndarray:
        """Values at stacked states (B, n) for one (L, T)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = [X[:, i] for i in range(X.shape[1])]
        if self.grid.l_axis is not None:
            cols.append(np.full(len(X), float(L)))
        cols.append(np.full(len(X), float(T)))
        loc = self._interp.locate(np.stack(cols, axis=1))
        self.clamp_count += int(loc[2].sum())
        return self._interp.apply(self.values, loc)

    def query(self, z) -> FieldSample:
        z = z.vector() if hasattr(z, "vector") else np.asarray(z, dtype=float)
        n = len(self.grid.x_axes)
        pt = self._point(z)[None, :]
        loc = self._interp.locate(pt)
        clamped = bool(loc[2][0])
        if clamped:
            self.clamp_count += 1
        value = float(self._interp.apply(self.values, loc)[0])

        d = len(self._interp.axes)
        t_dim = d - 1
        l_dim = n if self.grid.l_axis is not None else None

        grad = np.zeros(n + 3)
        grad[0] = float(self._interp.apply(self._grad_array(t_dim), loc)[0])
        for i in range(n):
            grad[3 + i] = float(self._interp.apply(self._grad_array(i), loc)[0])
        if l_dim is not None:
            grad[1] = float(self._interp.apply(self._grad_array(l_dim), loc)[0])
        elif self.barrier_normal is not None:
            w = np.asarray(self.barrier_normal, dtype=float)
            # a margin shift is equivalent to a state shift along the barrier normal
            grad[1] = -float(grad[3:3 + n] @ w) / float(w @ w)

        hess = np.zeros((n + 3, n + 3))
        for i in range(n):
            for j in range(i, n):
                hij = float(self._interp.apply(self._hess_array(i, j), loc)[0])
                hess[3 + i, 3 + j] = hij
                hess[3 + j, 3 + i] = hij
        return FieldSample(value=value, gradient=grad, hessian=hess, clamped=clamped)

    # -- serialization ----------------------------------------------------

    def save(self, path) -> None:
        """Self-describing plain-text container; exact float round-trip."""
        if not self.margin.is_fixed:
            raise ValueError("only fixed-margin fields serialize")
        buf = io.StringIO()
        buf.write("# probsafe safe-probability field v1\n")
        buf.write(f"ptype = {self.ptype.value}\n")
        buf.write(f"policy_tag = {self.policy_tag}\n")
        buf.write(f"provenance = {self.provenance}\n")
        buf.write(f"horizon_mode = {self.horizon.mode.value}\n")
        buf.write(f"horizon_H = {self.horizon.H!r}\n")
        buf.write(f"margin = {self.margin.ell0!r}\n")
        for i, ax in enumerate(self.grid.x_axes):
            buf.write(f"axis_x{i} = {ax.lo!r} {ax.hi!r} {ax.n}\n")
        if self.grid.l_axis is not None:
            ax = self.grid.l_axis
            buf.write(f"axis_L = {ax.lo!r} {ax.hi!r} {ax.n}\n")
        ax = self.grid.t_axis
        buf.write(f"axis_T = {ax.lo!r} {ax.hi!r} {ax.n}\n")
        if self.barrier_normal is not None:
            buf.write("barrier_normal = " + " ".join(repr(float(v)) for v in self.barrier_normal) + "\n")
        if self.phi_nodes is not None:
            buf.write("phi_nodes = " + " ".join(repr(float(v)) for v in self.phi_nodes) + "\n")
        buf.write("values =\n")
        for v in self.values.reshape(-1):
            buf.write(f"{float(v)!r}\n")
        with open(path, "w") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "SafeProbabilityField":
        meta = {}
        vals = []
        in_values = False
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if in_values:
                    vals.append(float(line))
                    continue
                key, _, rest = line.partition("=")
                key, rest = key.strip(), rest.strip()
                if key == "values":
                    in_values = True
                else:
                    meta[key] = rest
        x_axes = []
        i = 0
        while f"axis_x{i}" in meta:
            lo, hi, n = meta[f"axis_x{i}"].split()
            x_axes.append(AxisSpec(float(lo), float(hi), int(n)))
            i += 1
        l_axis = None
        if "axis_L" in meta:
            lo, hi, n = meta["axis_L"].split()
            l_axis = AxisSpec(float(lo), float(hi), int(n))
        lo, hi, n = meta["axis_T"].split()
        grid = GridSpec(tuple(x_axes), AxisSpec(float(lo), float(hi), int(n)), l_axis)
        values = np.array(vals).reshape(grid.value_shape)
        normal = (np.array([float(v) for v in meta["barrier_normal"].split()])
                  if "barrier_normal" in meta else None)
        phi_nodes = (np.array([float(v) for v in meta["phi_nodes"].split()])
                     if "phi_nodes" in meta else None)
        return cls(ptype=ProbabilityType.parse(meta["ptype"]), grid=grid, values=values,
                   policy_tag=meta["policy_tag"], provenance=meta["provenance"],
                   horizon=HorizonSpec(HorizonMode(meta["horizon_mode"]), float(meta["horizon_H"])),
                   margin=MarginSpec(ell0=float(meta["margin"])),
                   barrier_normal=normal, phi_nodes=phi_nodes)

    def to_csv(self, path) -> None:
        """Row-per-node CSV (axis coordinates..., value) for plotting and diffing."""
        axes = [ax.nodes for ax in self.grid.spatial_axes] + [self.grid.t_axis.nodes]
        names = [f"x{i}" for i in range(len(self.grid.x_axes))]
        if self.grid.l_axis is not None:
            names.append("L")
        names.append("T")
        with open(path, "w") as fh:
            fh.write(",".join(names + ["value"]) + "\n")
            for index in np.ndindex(*self.values.shape):
                coords = [axes[d][index[d]] for d in range(len(axes))]
                row = ",".join(f"{c:.10g}" for c in coords)
                fh.write(f"{row},{self.values[index]:.10g}\n")


# -- module-level query helpers (thin wrappers over SafeProbabilityField) --

def field_value(field: SafeProbabilityField, z) -> float:
    return field.value(z)


def field_gradient(field: SafeProbabilityField, z) -> np.ndarray:
    return field.query(z).gradient


def field_hessian(field: SafeProbabilityField, z) -> np.ndarray:
    return field.query(z).hessian


def generator_parts(field: SafeProbabilityField, sys: ControlAffineSystem,
                    barrier: BarrierSpec, z):
    """(F, a, c0, clamped) with D_F(z, u) = c0 + a . u."""
    zv = z.vector() if hasattr(z, "vector") else np.asarray(z, dtype=float)
    sample = field.query(zv)
    tf, tg, ts = augmented_dynamics(sys, barrier, field.horizon, field.margin)
    fz = tf(zv)
    gz = tg(zv)
    sz = ts(zv)
    a = sample.gradient @ gz
    c0 = float(fz @ sample.gradient + 0.5 * np.einsum("iw,jw,ij->", sz, sz, sample.hessian))
    return sample.value, np.atleast_1d(a), c0, sample.clamped


def generator_value(field: SafeProbabilityField, sys: ControlAffineSystem,
                    barrier: BarrierSpec, z, u) -> float:
    """D_F(z, u) = L_f F + (L_g F) u + 1/2 tr(sigma sigma^T Hess F) on the augmented state."""
    _, a, c0, _ = generator_parts(field, sys, barrier, z)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(c0 + a @ u)


# -- the T-march ------------------------------------------------------------

class _Marcher:
    """Upwind/centred finite-difference march of the field along the window axis."""

    def __init__(self, sys, policy, barrier, horizon, margin, ptype, grid,
                 method: str = "auto", time_substeps: Optional[int] = None):
        self.sys = sys
        self.policy = policy
        self.barrier = barrier
        self.horizon = horizon
        self.margin = margin
        self.ptype = ProbabilityType.parse(ptype)
        self.grid = grid

        self.spatial = list(grid.spatial_axes)
        self.n_x = len(grid.x_axes)
        self.shape = tuple(ax.n for ax in self.spatial)
        self.h = [ax.spacing for ax in self.spatial]

        nodes = grid.x_node_matrix()                      # (N, n)
        self.nodes = nodes
        phi_flat = barrier.values(nodes)
        self.phi_flat = phi_flat
        phi_x = phi_flat.reshape(grid.x_shape)
        margins = grid.l_axis.nodes if grid.l_axis is not None else np.array([margin.ell0])
        if grid.l_axis is not None:
            phi_grid = phi_x[..., None] - margins
        else:
            phi_grid = phi_x - margins[0]
        # phi_grid >= 0 marks the margin-adjusted safe side
        self.safe_side = phi_grid >= 0.0
        if self.ptype.invariance:
            self.pinned = ~self.safe_side
            self.pinned_value = 0.0
        else:
            self.pinned = self.safe_side
            self.pinned_value = 1.0
        self.indicator = self.safe_side.astype(float)

        # diffusion: diagonal of sigma sigma^T per state axis; axis-aligned scheme only
        _, _, sig = _sys_fields_at(sys, nodes)
        S = np.einsum("niw,njw->nij", sig, sig)
        diag = np.einsum("nii->ni", S)
        offdiag = S - diag[:, :, None] * np.eye(self.n_x)[None, :, :]
        if self.n_x > 1 and np.abs(offdiag).max() > 1e-12 * max(1.0, np.abs(diag).max()):
            raise SchemeFailureError(
                "cross-diffusion terms are not supported by the axis-aligned scheme")
        self.D = []
        for a in range(self.n_x):
            da = 0.5 * diag[:, a].reshape(grid.x_shape)
            self.D.append(self._to_spatial(da))
        if grid.l_axis is not None:
            self.D.append(np.zeros(self.shape))

        self.t_dependent_policy = bool(getattr(policy, "depends_on_horizon", False)) \
            or bool(getattr(policy, "depends_on_margin", False)) \
            or horizon.mode is HorizonMode.RECEDING
        self._rho_cache = None

        if method == "auto":
            method = "implicit" if (len(self.spatial) == 1) else "explicit"
        if method not in ("implicit", "explicit"):
            raise ValueError("method must be auto, implicit or explicit")
        if method == "implicit" and len(self.spatial) != 1:
            raise ValueError("implicit marching supports a single spatial axis")
        self.method = method
        self.time_substeps = time_substeps

    def _to_spatial(self, arr_x: np.ndarray) -> np.ndarray:
        if self.grid.l_axis is not None:
            return np.broadcast_to(arr_x[..., None], self.shape).copy()
        return arr_x

    def _rho(self, T_value: float):
        """Per-axis convection speeds at window position T_value."""
        if self._rho_cache is not None and not self.t_dependent_policy:
            return self._rho_cache
        margins = (self.grid.l_axis.nodes if self.grid.l_axis is not None
                   else np.array([self.margin.ell0]))
        rho = []
        f, g, _ = _sys_fields_at(self.sys, self.nodes)
        drift_per_margin = []
        for L in margins:
            u = _batched_control(self.policy, self.nodes, float(L), float(T_value))
            drift_per_margin.append(f + np.einsum("nij,nj->ni", g, u))
        for a in range(self.n_x):
            if self.grid.l_axis is not None:
                comp = np.stack([d[:, a].reshape(self.grid.x_shape) for d in drift_per_margin], axis=-1)
            else:
                comp = drift_per_margin[0][:, a].reshape(self.grid.x_shape)
            rho.append(comp)
        if self.grid.l_axis is not None:
            lval = np.array([self.margin.rate(L) for L in margins])
            rho.append(np.broadcast_to(lval, self.shape).copy())
        if not self.t_dependent_policy:
            self._rho_cache = rho
        return rho

    def cfl_bound(self, rho) -> float:
        denom = np.zeros(self.shape)
        for a in range(len(self.spatial)):
            denom += np.abs(rho[a]) / self.h[a] + 2.0 * self.D[a] / self.h[a] ** 2
        active = denom[~self.pinned]
        m = float(active.max()) if active.size else 0.0
        return math.inf if m == 0.0 else 1.0 / m

    def initial_slice(self) -> np.ndarray:
        V = self.indicator.copy()
        V[self.pinned] = self.pinned_value
        return V

    def step_slice(self, V: np.ndarray, T_from: float, T_to: float) -> np.ndarray:
        """Advance one stored slice, internally substepping."""
        span = T_to - T_from
        rho = self._rho(T_from)
        if self.method == "explicit":
            bound = self.cfl_bound(rho)
            if self.time_substeps is not None:
                n_sub = self.time_substeps
                if span / n_sub > bound * (1 + 1e-9):
                    need = math.ceil(span / bound)
                    raise CflError(
                        f"explicit step {span / n_sub:.3e} exceeds the stability bound "
                        f"{bound:.3e}; use time_substeps >= {need}")
            else:
                n_sub = max(1, math.ceil(span / (0.9 * bound))) if math.isfinite(bound) else 1
        else:
            n_sub = self.time_substeps or max(1, math.ceil(span / 2e-3))
        dT = span / n_sub
        if self.method == "implicit":
            V = self._implicit_block(V, dT, n_sub, rho)
        else:
            for _ in range(n_sub):
                V = self._explicit_step(V, dT, rho)
        lo, hi = float(V.min()), float(V.max())
        if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
            raise SchemeFailureError(
                f"marched slice left [0,1]: min={lo:.3e}, max={hi:.3e}")
        return np.clip(V, 0.0, 1.0)

    def _explicit_step(self, V, dT, rho):
        total = np.zeros_like(V)
        for a in range(len(self.spatial)):
            up = _shift(V, a, +1)
            dn = _shift(V, a, -1)
            c = rho[a]
            conv = np.where(c > 0, c * (up - V), c * (V - dn)) / self.h[a]
            diff = self.D[a] * (up - 2.0 * V + dn) / self.h[a] ** 2
            total += conv + diff
        out = V + dT * total
        out[self.pinned] = self.pinned_value
        return out

    def _implicit_block(self, V, dT, n_sub, rho):
        c = rho[0].reshape(-1)
        D = self.D[0].reshape(-1)
        h = self.h[0]
        M = len(c)
        coef_up = np.where(c > 0, c, 0.0) / h + D / h ** 2
        coef_dn = np.where(c < 0, -c, 0.0) / h + D / h ** 2
        diag_a = -(coef_up + coef_dn)
        # Neumann edges fold the missing neighbour into the diagonal
        diag_a = diag_a.copy()
        diag_a[0] += coef_dn[0]
        diag_a[-1] += coef_up[-1]
        pin = self.pinned.reshape(-1)

        ab = np.zeros((3, M))
        ab[1, :] = 1.0 - dT * diag_a
        ab[0, 1:] = -dT * coef_up[:-1]     # a[i, i+1]
        ab[2, :-1] = -dT * coef_dn[1:]     # a[i, i-1]
        ab[1, pin] = 1.0
        idx = np.where(pin)[0]
        sup = idx[idx + 1 < M]
        ab[0, sup + 1] = 0.0
        sub = idx[idx - 1 >= 0]
        ab[2, sub - 1] = 0.0

        x = V.reshape(-1).copy()
        for _ in range(n_sub):
            x[pin] = self.pinned_value
            x = solve_banded((1, 1), ab, x)
        x[pin] = self.pinned_value
        return x.reshape(V.shape)


def _shift(V: np.ndarray, axis: int, direction: int) -> np.ndarray:
    """Neighbour values along an axis with replicated (zero-gradient) edges."""
    v = np.moveaxis(V, axis, 0)
    out = np.empty_like(v)
    if direction > 0:
        out[:-1] = v[1:]
        out[-1] = v[-1]
    else:
        out[1:] = v[:-1]
        out[0] = v[0]
    return np.moveaxis(out, 0, axis)


def _sys_fields_at(sys: ControlAffineSystem, nodes: np.ndarray):
    if sys.vectorized:
        f = np.asarray(sys.drift(nodes), dtype=float)
        g = np.asarray(sys.input_matrix(nodes), dtype=float)
        s = np.asarray(sys.diffusion(nodes), dtype=float)
    else:
        f = np.stack([np.asarray(sys.drift(x), dtype=float) for x in nodes])
        g = np.stack([np.asarray(sys.input_matrix(x), dtype=float) for x in nodes])
        s = np.stack([np.asarray(sys.diffusion(x), dtype=float) for x in nodes])
    return f, g.reshape(len(nodes), sys.dim_state, sys.dim_input), \
        s.reshape(len(nodes), sys.dim_state, sys.dim_noise)


def solve_cde(sys: ControlAffineSystem, policy, barrier: BarrierSpec,
              horizon: HorizonSpec, margin: MarginSpec, ptype, grid: GridSpec,
              policy_tag: str = "nominal", method: str = "auto",
              time_substeps: Optional[int] = None) -> SafeProbabilityField:
    """March the safe-probability PDE over the grid's window axis.

    The closed-loop drift uses ``policy`` (pass the nominal policy with
    policy_tag="nominal", or the full safe policy with "overall").  Raises
    CflError when a user-pinned explicit substep count violates stability and
    SchemeFailureError if the solution escapes [0, 1].
    """
    marcher = _Marcher(sys, policy, barrier, horizon, margin, ptype, grid,
                       method=method, time_substeps=time_substeps)
    t_nodes = grid.t_axis.nodes
    shape = grid.value_shape
    values = np.empty(shape)
    V = marcher.initial_slice()
    values[..., 0] = V
    for j in range(1, len(t_nodes)):
        V = marcher.step_slice(V, float(t_nodes[j - 1]), float(t_nodes[j]))
        values[..., j] = V
    out = SafeProbabilityField(ptype=marcher.ptype, grid=grid, values=values,
                               policy_tag=policy_tag, provenance="cde",
                               horizon=horizon, margin=margin,
                               barrier_normal=barrier.normal,
                               phi_nodes=marcher.phi_flat)
    out.validate()
    return out


def smooth_mc_field(raw: SafeProbabilityField, sys: ControlAffineSystem, policy,
                    barrier: BarrierSpec, horizon: Optional[HorizonSpec] = None,
                    margin: Optional[MarginSpec] = None, sweeps: int = 2,
                    blend: float = 0.85, max_dev: float = 0.25,
                    method: str = "auto", time_substeps: Optional[int] = None) -> SafeProbabilityField:
    """Regularise a raw MC field with implicit relaxation sweeps of the PDE march.

    Each sweep rebuilds slice j as a blend of the raw values and the PDE
    prediction stepped from the previous (already smoothed) slice, re-pins the
    boundary and initial slices, clips into [0, 1], and caps the deviation
    from the raw values at ``max_dev``.  A raw field that already solves the
    same discrete scheme is a fixed point.
    """
    if not 0.0 < blend <= 1.0:
        raise ValueError("blend must lie in (0, 1]")
    horizon = horizon or raw.horizon
    margin = margin or raw.margin
    marcher = _Marcher(sys, policy, barrier, horizon, margin, raw.ptype, raw.grid,
                       method=method, time_substeps=time_substeps)
    t_nodes = raw.grid.t_axis.nodes
    R = np.clip(raw.values, 0.0, 1.0)
    W = R.copy()
    pin = marcher.pinned
    W[..., 0] = marcher.initial_slice()
    for sl in range(len(t_nodes)):
        wj = W[..., sl]
        wj[pin] = marcher.pinned_value
        W[..., sl] = wj
    for _ in range(max(1, sweeps)):
        W[..., 0] = marcher.initial_slice()
        for j in range(1, len(t_nodes)):
            pred = marcher.step_slice(W[..., j - 1], float(t_nodes[j - 1]), float(t_nodes[j]))
            blended = (1.0 - blend) * R[..., j] + blend * pred
            blended = np.clip(blended, R[..., j] - max_dev, R[..., j] + max_dev)
            blended[pin] = marcher.pinned_value
            W[..., j] = np.clip(blended, 0.0, 1.0)
    out = SafeProbabilityField(ptype=raw.ptype, grid=raw.grid, values=W,
                               policy_tag=raw.policy_tag, provenance="mc_smoothed",
                               horizon=horizon, margin=margin,
                               barrier_normal=raw.barrier_normal,
                               phi_nodes=raw.phi_nodes if raw.phi_nodes is not None else marcher.phi_flat)
    out.validate()
    return out
