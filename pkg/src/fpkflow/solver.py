"""Forward solves of the FPK Cauchy problem and weak-form residual certificates.

The grid scheme is an explicit conservative finite-volume method for
``d_t rho = 1/2 d^2 (a rho) - d (b rho)`` with zero-flux boundaries.  Face
fluxes use the exponentially fitted (Scharfetter-Gummel) form

    J = (1/dx) [B(-z) D_i rho_i - B(z) D_{i+1} rho_{i+1}],   B(z) = z / (e^z - 1),

with ``D = a/2`` and ``z = b_face dx / D_face``.  It reduces to upwinding where
``D -> 0`` and to central differencing where ``b -> 0``; all off-diagonal
coefficients are nonnegative, so the update is positive whenever ``dt`` is
below :func:`stable_dt`.  Pure transport (``a = 0``) uses plain upwinding.

Atomic initial data with ``a = 0`` is moved along characteristics by RK4.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from .curve import CurveError, SolutionCurve, TimeGrid
from .functions import TestFunction, standard_test_family
from .measure import GridSpec, Measure, to_grid
from .problem import Problem

logger = logging.getLogger(__name__)

MASS_TOL = 1e-6
ADMISSION_TOL = 1e-4
#: default spacing between recorded times
RECORD_STEP = 1e-3


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    def __init__(self, dt: float, stable: float):
        super().__init__(f"dt={dt:.6g} exceeds the stable step {stable:.6g}")
        self.dt = dt
        self.stable = stable


def bernoulli(z: np.ndarray) -> np.ndarray:
    """``B(z) = z / (e^z - 1)`` with ``B(0) = 1``."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-10
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 - 0.5 * z, zs / np.expm1(zs))


def default_grid(p: Problem, spacing: float) -> GridSpec:
    """Grid with cell centres on multiples of ``spacing`` covering the domain box."""
    lo = [b[0] for b in p.domain_box]
    hi = [b[1] for b in p.domain_box]
    return GridSpec.centered(lo, hi, spacing)


class _Operator:
    """Per-axis face transfer rates: ``right[f]`` moves mass from the cell left of
    face ``f`` to the right one, ``left[f]`` the reverse (both per unit time)."""

    def __init__(self, p: Problem, grid: GridSpec, drift: Callable | None = None):
        self.p = p
        self.grid = grid
        self.drift = drift
        self.shape = grid.cells
        self.time_dependent = p.coefficients.time_dependent
        self._fixed = None if self.time_dependent else self._rates(0.0)

    def _b(self, t, x):
        if self.drift is not None:
            return self.drift(t, self.p._clamp(x))
        return self.p.drift(t, x)

    def _rates(self, t: float):
        g, dx = self.grid, self.grid.spacing
        d = g.dimension
        centers = g.centers()
        A = self.p.diffusion(t, centers)
        degenerate = self.p.coefficients.degenerate
        if d == 2 and np.max(np.abs(A[:, 0, 1])) > 0:
            raise SolverError("the 2D grid scheme supports diagonal diffusion only")
        out = []
        for ax in range(d):
            D = (0.5 * A[:, ax, ax]).reshape(self.shape)
            # face midpoints of interior faces along this axis
            fc = [g.axis_centers(k) for k in range(d)]
            fc[ax] = g.axis_faces(ax)[1:-1]
            mesh = np.meshgrid(*fc, indexing="ij")
            faces = np.column_stack([m.ravel() for m in mesh])
            fshape = tuple(len(c) for c in fc)
            bf = self._b(t, faces)[:, ax].reshape(fshape)
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(None, -1)
            hi[ax] = slice(1, None)
            Dl, Dr = D[tuple(lo)], D[tuple(hi)]
            Df = 0.5 * (Dl + Dr)
            if degenerate:
                right = np.maximum(bf, 0.0) / dx
                left = np.maximum(-bf, 0.0) / dx
            else:
                pos = Df > 0
                Dsafe = np.where(pos, Df, 1.0)
                z = bf * dx / Dsafe
                right = np.where(pos, bernoulli(-z) * Dl / dx ** 2, np.maximum(bf, 0.0) / dx)
                left = np.where(pos, bernoulli(z) * Dr / dx ** 2, np.maximum(-bf, 0.0) / dx)
            out.append((right, left))
        return out

    def rates(self, t: float):
        return self._fixed if self._fixed is not None else self._rates(t)

    def outflow(self, t: float) -> np.ndarray:
        tot = np.zeros(self.shape)
        d = self.grid.dimension
        for ax, (right, left) in enumerate(self.rates(t)):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(None, -1)
            hi[ax] = slice(1, None)
            tot[tuple(lo)] += right
            tot[tuple(hi)] += left
        return tot

    def step(self, w: np.ndarray, t: float, dt: float) -> np.ndarray:
        d = self.grid.dimension
        new = w.copy()
        for ax, (right, left) in enumerate(self.rates(t)):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(None, -1)
            hi[ax] = slice(1, None)
            flux = dt * (right * w[tuple(lo)] - left * w[tuple(hi)])
            new[tuple(lo)] -= flux
            new[tuple(hi)] += flux
        return new


def stable_dt(p: Problem, grid: GridSpec, t_samples: Sequence[float] | None = None,
              drift: Callable | None = None) -> float:
    """Largest ``dt`` keeping every cell's outflow fraction at most one.

    With constant coefficients and no drift this is ``dx^2 / sup a``; with
    drift it is about ``dx^2 / (sup a + 2 sup|b| dx)``.
    """
    op = _Operator(p, grid, drift)
    ts = [0.0] if not op.time_dependent else (
        t_samples if t_samples is not None else np.linspace(0, p.T, 11))
    worst = max(float(op.outflow(t).max()) for t in ts)
    return math.inf if worst == 0 else 1.0 / worst


def _record_grid(p: Problem, s: float, dt: float, times: TimeGrid | None) -> tuple[np.ndarray, int]:
    if times is None:
        times = TimeGrid.from_step(p.T, RECORD_STEP) if dt <= RECORD_STEP else \
            TimeGrid.from_step(p.T, dt)
    if abs(times.T - p.T) > 1e-12:
        raise SolverError("time grid horizon differs from the problem horizon")
    rec = times.suffix(s)
    nsub = max(1, int(math.ceil(times.step / dt - 1e-9)))
    return rec, nsub


def solve_forward(p: Problem, s: float, nu: Measure, dt: float, grid: GridSpec | None = None,
                  times: TimeGrid | None = None, drift: Callable | None = None,
                  label: str = "solver") -> SolutionCurve:
    """Explicit solve from ``(s, nu)`` recorded on ``times`` (suffix from ``s``).

    Each record interval is split into equal substeps no longer than ``dt``
    and the substep times are ``t_k + j * dt_eff``, so a restart from any
    recorded marginal reproduces the original continuation bit for bit.

    ``a = 0`` with atomic ``nu`` is integrated along characteristics; any
    other atomic ``nu`` is first moved to the cell centres of ``grid``.
    ``drift`` replaces ``b`` (used by the mollification ladder).
    """
    rec, nsub = _record_grid(p, s, dt, times)
    # per-interval substeps depend only on the two record times, so restarts agree bitwise
    hs = np.diff(rec) / nsub
    h = float(hs.max()) if rec.size > 1 else dt
    if p.coefficients.degenerate and nu.kind == "atoms":
        return characteristics(p, s, nu, rec, nsub, drift, label)
    if grid is None:
        if nu.kind != "grid":
            raise SolverError("a grid is needed for non-degenerate problems with atomic data")
        grid = nu.grid
    if nu.kind == "atoms":
        nu, cost = to_grid(nu, grid)
        if cost > 0:
            logger.info("initial atoms moved to cell centres (W1 cost %.3g)", cost)
    elif nu.grid != grid:
        raise SolverError("initial measure lives on a different grid")
    for ax, (lo, hi) in enumerate(p.domain_box):
        glo, ghi = grid.box[ax]
        if glo > lo + grid.spacing or ghi < hi - grid.spacing:
            logger.warning("grid box %s does not cover the domain on axis %d", grid.box[ax], ax)
    op = _Operator(p, grid, drift)
    st = stable_dt(p, grid, rec, drift)
    if h > st * (1 + 1e-12):
        raise CFLError(h, st)

    shape = grid.cells
    w = np.asarray(nu.weights, dtype=float).reshape(shape).copy()
    out = np.empty((rec.size, grid.size))
    out[0] = w.ravel()
    clipped = 0.0
    for k in range(rec.size - 1):
        t0, hk = rec[k], hs[k]
        for j in range(nsub):
            w = op.step(w, t0 + j * hk, hk)
        neg = w < 0
        if neg.any():
            lost = float(-w[neg].sum())
            if lost > 1e-14:
                logger.info("clipping negative mass %.3g at t=%.6g", lost, rec[k + 1])
            clipped += lost
            w[neg] = 0.0
        mass = math.fsum(w.ravel())
        if abs(mass - 1.0) > MASS_TOL:
            raise SolverError(f"mass drift {mass - 1.0:.3g} at t={rec[k + 1]:.6g}")
        out[k + 1] = w.ravel()
    bmass = boundary_mass(out, grid)
    if bmass > 1e-6:
        logger.warning("boundary cells carry mass %.3g; enlarge the domain box", bmass)
    curve = SolutionCurve(rec, "grid", out, grid=grid, provenance="solver", label=label)
    return curve.with_certificate(dt=h, clipped_mass=clipped, boundary_mass=bmass)


def boundary_mass(weights: np.ndarray, grid: GridSpec) -> float:
    """Largest mass over time held by the outermost cell layer."""
    w = weights.reshape((weights.shape[0],) + grid.cells)
    if grid.dimension == 1:
        edge = w[:, 0] + w[:, -1]
    else:
        inner = w[:, 1:-1, 1:-1].sum(axis=(1, 2))
        edge = w.sum(axis=(1, 2)) - inner
    return float(edge.max())


def rk4_path(b: Callable, x0: np.ndarray, times: np.ndarray, nsub: int = 1) -> np.ndarray:
    """RK4 for ``x' = b(t, x)`` from ``x0`` (shape (n, d)); returns (n_t, n, d)."""
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    out = np.empty((times.size,) + x.shape)
    out[0] = x
    for k in range(times.size - 1):
        h = (times[k + 1] - times[k]) / nsub
        for j in range(nsub):
            t = times[k] + j * h
            k1 = b(t, x)
            k2 = b(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = b(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = b(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


def characteristics(p: Problem, s: float, nu: Measure, rec: np.ndarray, nsub: int = 1,
                    drift: Callable | None = None, label: str = "characteristics"
                    ) -> SolutionCurve:
    """Transport each atom of ``nu`` along ``x' = b(t, x)``."""
    if not p.coefficients.degenerate:
        raise SolverError("characteristics apply to a = 0 only")
    b = (lambda t, x: drift(t, p._clamp(x))) if drift is not None else p.drift
    pts = rk4_path(b, nu.points, rec, nsub)
    if not np.all(np.isfinite(pts)):
        raise SolverError("non-finite characteristic")
    w = np.broadcast_to(nu.weights, (rec.size, nu.size)).copy()
    return SolutionCurve(rec, "atoms", w, pts, provenance="solver", label=label)


# -- weak-form residual -------------------------------------------------------

def generator_values(curve: SolutionCurve, p: Problem, f: TestFunction) -> np.ndarray:
    """``G_k = int L_{t_k} f d mu_{t_k}`` for every curve time."""
    if curve.kind == "grid":
        x = curve.grid.centers()
        if not p.coefficients.time_dependent:
            return curve.weights @ p.apply_generator(f, 0.0, x)
        return np.array([curve.weights[k] @ p.apply_generator(f, t, x)
                         for k, t in enumerate(curve.times)])
    n_t, n, d = curve.points.shape
    tt = np.repeat(curve.times, n)
    vals = p.apply_generator(f, tt, curve.points.reshape(-1, d)).reshape(n_t, n)
    return np.einsum("kn,kn->k", curve.weights, vals)


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def residual_profile(curve: SolutionCurve, p: Problem, f: TestFunction) -> np.ndarray:
    """``R_k = int f d mu_{t_k} - int f d mu_s - int_s^{t_k} int L f d mu du`` (trapezoid)."""
    F = curve.integrals(f)
    C = _cumtrapz(generator_values(curve, p, f), curve.times)
    return (F - F[0]) - C


def weak_residual(curve: SolutionCurve, p: Problem, fs: Sequence[TestFunction] | None = None,
                  pairs: Sequence[tuple[float, float]] | None = None,
                  detail: bool = False):
    """Largest weak-form defect over test functions and time pairs.

    Default pairs are ``(s, t)`` for every curve time ``t``.  Pair endpoints
    off the curve grid are interpolated linearly; endpoints outside
    ``[s, T]`` raise.  With ``detail=True`` returns ``(value, f.id, pair)``.
    """
    fs = standard_test_family(curve.dimension) if fs is None else list(fs)
    if pairs is not None:
        for t1, t2 in pairs:
            for t in (t1, t2):
                if t < curve.s - 1e-12 or t > curve.T + 1e-12:
                    raise CurveError(f"pair time {t} outside [{curve.s}, {curve.T}]")
    best = (0.0, None, None)
    for f in fs:
        R = residual_profile(curve, p, f)
        if pairs is None:
            k = int(np.argmax(np.abs(R)))
            val, pair = float(abs(R[k])), (curve.s, float(curve.times[k]))
        else:
            val, pair = -1.0, None
            for t1, t2 in pairs:
                v = abs(float(np.interp(t2, curve.times, R) - np.interp(t1, curve.times, R)))
                if v > val:
                    val, pair = v, (float(t1), float(t2))
        if val > best[0] or best[1] is None:
            best = (val, f.id, pair)
    return best if detail else best[0]


def narrow_continuity_modulus(curve: SolutionCurve, fs: Sequence[TestFunction]) -> float:
    """``max_f max_k |int f d mu_{k+1} - int f d mu_k|`` over adjacent times."""
    if curve.n_times < 2:
        raise CurveError("the continuity modulus needs at least two times")
    return max(float(np.max(np.abs(np.diff(curve.integrals(f))))) for f in fs)


def certify(curve: SolutionCurve, p: Problem, tol: float = ADMISSION_TOL,
            fs: Sequence[TestFunction] | None = None) -> tuple[SolutionCurve, bool]:
    """Attach a residual certificate; returns the curve and whether it is admitted."""
    fs = standard_test_family(curve.dimension) if fs is None else list(fs)
    val, fid, pair = weak_residual(curve, p, fs, detail=True)
    ok = val <= tol
    c = curve.with_certificate(residual=val, worst_function=fid,
                               worst_pair=list(pair) if pair else None,
                               family=[f.id for f in fs], tolerance=tol, admitted=ok)
    return c, ok
