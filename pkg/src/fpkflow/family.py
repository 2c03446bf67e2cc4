"""Finite candidate sets standing in for the solution set ``FP(s, nu)``.

Strategies
----------
``solver_single``
    One forward solve (grid scheme, or characteristics for ``a = 0``).
``branching_catalog``
    ``a = 0`` in 1D with atomic data: every atom sitting at a zero of ``b``
    from which ``x' = b(x)`` can leave in finite time (Osgood integral
    finite) either stays or departs at a declared branch time.
``mollification_ladder``
    Solves with ``b`` replaced by a smoothed, shifted drift for a ladder of
    widths; distinct limits are kept.
``mixture_hull``
    Convex combinations of the curves admitted by the preceding strategies.

Every curve is certified against the standard test family and excluded
(with a logged reason) if its residual exceeds the admission tolerance.
"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _integrate
from scipy import optimize

from .curve import CurveError, SolutionCurve, TimeGrid, mix, pad_atoms
from .functions import TestFunction, standard_test_family
from .measure import GridSpec, Measure, to_grid, wasserstein1
from .problem import Problem
from .solver import ADMISSION_TOL, certify, rk4_path, solve_forward

logger = logging.getLogger(__name__)

STRATEGIES = ("branching_catalog", "mollification_ladder", "mixture_hull", "solver_single")
START_TOL = 1e-12
GLUE_TOL = 1e-9
#: glued residual may exceed the sum of the parts' residuals by this much
GLUE_SLACK = 1e-6
MAX_CATALOG = 512


class CandidateError(RuntimeError):
    pass


class GlueError(CurveError):
    def __init__(self, gap: float, msg: str | None = None):
        super().__init__(msg or f"endpoint mismatch: W1 gap {gap:.6g}")
        self.gap = gap


@dataclass(frozen=True)
class CandidateParams:
    """Shared settings for candidate generation.

    ``checkpoints`` must lie on ``time_grid``; branch times default to them.
    ``grid`` is required for problems solved on a grid.
    """

    time_grid: TimeGrid
    checkpoints: tuple[float, ...]
    dt: float
    grid: GridSpec | None = None
    admission_tolerance: float = ADMISSION_TOL
    branch_times: tuple[float, ...] | None = None
    ladder_eps: tuple[float, ...] = (1e-7, 1e-8, 1e-9)
    ladder_shifts: tuple[int, ...] = (-1, 0, 1)
    ladder_nodes: int = 8
    mixture_weights: tuple[tuple[float, ...], ...] = ((0.5, 0.5),)
    admission_family: tuple[TestFunction, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        for q in self.checkpoints:
            self.time_grid.index(q)
        if self.branch_times is not None:
            for q in self.branch_times:
                self.time_grid.index(q)

    def family_for(self, dimension: int) -> list[TestFunction]:
        if self.admission_family is not None:
            return list(self.admission_family)
        return standard_test_family(dimension)


@dataclass(frozen=True)
class CandidateSet:
    """Finite, certified, canonically ordered set of curves from ``(s, nu)``."""

    s: float
    nu: Measure
    curves: tuple[SolutionCurve, ...]
    admission_tolerance: float = ADMISSION_TOL
    exclusions: tuple[dict, ...] = field(default=())

    def __post_init__(self):
        if not self.curves:
            raise CandidateError(f"no admissible candidate from s={self.s}")
        ref = self.curves[0].times
        for c in self.curves:
            if c.times.shape != ref.shape or not np.array_equal(c.times, ref):
                raise CandidateError("candidates must share one time grid")
            gap = wasserstein1(c.initial, self.nu)
            if gap > START_TOL:
                raise CandidateError(f"candidate {c.label} starts {gap:.3g} away from nu")
            r = c.certificate.get("residual")
            if r is None or r > self.admission_tolerance:
                raise CandidateError(f"candidate {c.label} is not admitted (residual {r})")
        object.__setattr__(self, "curves", tuple(sorted(self.curves, key=lambda c: c.key())))

    def __len__(self) -> int:
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def subset(self, keep: Callable[[SolutionCurve], bool] | Sequence[int]) -> "CandidateSet":
        """Nonempty sub-family (the closed subsets the selection may run over)."""
        if callable(keep):
            curves = tuple(c for c in self.curves if keep(c))
        else:
            curves = tuple(self.curves[i] for i in keep)
        return dataclasses.replace(self, curves=curves)

    def by_label(self, label: str) -> SolutionCurve:
        for c in self.curves:
            if c.label == label:
                return c
        raise KeyError(label)

    def manifest(self) -> dict:
        return {
            "s": self.s,
            "nu": self.nu.key(),
            "admission_tolerance": self.admission_tolerance,
            "curves": [c.manifest() for c in self.curves],
            "exclusions": list(self.exclusions),
        }


# -- surgery --------------------------------------------------------------------

def glue(front: SolutionCurve, back: SolutionCurve, tol: float = GLUE_TOL) -> SolutionCurve:
    """Follow ``front`` on ``[s, r]`` and ``back`` on ``[r, T]``; the marginal at ``r``
    is taken from ``back``."""
    if abs(front.T - back.s) > 1e-12 * max(1.0, abs(back.s)):
        raise GlueError(math.inf, f"front ends at {front.T} but back starts at {back.s}")
    gap = wasserstein1(front.terminal, back.initial)
    if gap > tol:
        raise GlueError(gap)
    if front.kind != back.kind:
        raise GlueError(gap, "cannot glue grid and atomic curves")
    times = np.concatenate([front.times[:-1], back.times])
    label = f"{front.label}|{back.label}"
    if front.kind == "grid":
        if front.grid != back.grid:
            raise GlueError(gap, "cannot glue curves on different grids")
        w = np.concatenate([front.weights[:-1], back.weights])
        return SolutionCurve(times, "grid", w, grid=back.grid, provenance="glued", label=label)
    n = max(front.points.shape[1], back.points.shape[1])
    fp, fw = pad_atoms(front, n)
    bp, bw = pad_atoms(back, n)
    return SolutionCurve(times, "atoms", np.concatenate([fw[:-1], bw]),
                         np.concatenate([fp[:-1], bp]), provenance="glued", label=label)


def restrict(curve: SolutionCurve, r: float) -> SolutionCurve:
    """Tail of ``curve`` on ``[r, T]``; ``r`` must be a curve time."""
    k = curve.index_of(r)
    return curve.slice(k)


def glue_residual_bound(front: SolutionCurve, back: SolutionCurve) -> float:
    """Admissible residual of ``glue(front, back)`` from the parts' certificates."""
    return front.certificate["residual"] + back.certificate["residual"] + GLUE_SLACK


# -- branching catalog ------------------------------------------------------------

def _travel_time(b1: Callable[[float], float], x0: float, sgn: float, y: float) -> float:
    """``int_0^y dz / |b(x0 + sgn z)|`` with ``z = u^2`` to tame root singularities."""
    if y <= 0:
        return 0.0

    def integrand(u):
        u = max(u, 1e-150)
        v = abs(b1(x0 + sgn * u * u))
        return math.inf if v == 0 else 2.0 * u / v
    val, _ = _integrate.quad(integrand, 0.0, math.sqrt(y), limit=200)
    return val


def departure_directions(b1: Callable[[float], float], x0: float,
                         box: tuple[float, float]) -> list[float]:
    """Directions in which ``x' = b(x)`` leaves the zero ``x0`` in finite time.

    A direction qualifies when ``b`` pushes away from ``x0`` on that side and
    the Osgood integral ``int_0 dz / |b|`` converges (ratio test on dyadic
    lower limits).
    """
    if b1(x0) != 0.0:
        return []
    dirs = []
    for sgn in (1.0, -1.0):
        room = (box[1] - x0) if sgn > 0 else (x0 - box[0])
        if room <= 0:
            continue
        y_top = min(room, 1e-2)
        probe = [y_top * 2.0 ** -k for k in range(4, 40, 4)]
        if any(sgn * b1(x0 + sgn * y) <= 0 for y in probe):
            continue
        # partial integrals over [y_{k+1}, y_k]
        try:
            inc = [_travel_time(b1, x0 + sgn * lo, sgn, hi - lo)
                   for hi, lo in zip(probe[:-1], probe[1:])]
        except (ZeroDivisionError, OverflowError):
            continue
        tail = inc[-4:]
        if all(np.isfinite(tail)) and all(t2 <= 0.9 * t1 for t1, t2 in zip(tail, tail[1:])):
            dirs.append(sgn)
    return dirs


def departure_seed(b1: Callable[[float], float], x0: float, sgn: float, h: float,
                   room: float) -> float:
    """Offset ``y`` with travel time ``h`` from ``x0`` (exact first step of a departure)."""
    hi = min(h * max(1.0, abs(b1(x0 + sgn * min(room, 1e-2)))), room)
    while _travel_time(b1, x0, sgn, hi) < h:
        if hi >= room:
            raise CandidateError(f"departure from {x0} leaves the domain within one step")
        hi = min(4 * hi, room)
    return optimize.brentq(lambda y: _travel_time(b1, x0, sgn, y) - h, 0.0, hi,
                           xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def _atom_paths(p: Problem, x0: float, rec: np.ndarray, nsub: int, h: float,
                branch_times: Sequence[float]) -> list[tuple[str, np.ndarray]]:
    """Candidate paths of one atom on ``rec``: the RK4 path, or stay/depart options."""
    box = p.domain_box[0]

    def b1(x):
        return float(p.drift(0.0, np.array([[x]]))[0, 0])

    dirs = departure_directions(b1, x0, box)
    if not dirs:
        path = rk4_path(p.drift, np.array([[x0]]), rec, nsub)[:, 0, 0]
        return [("path", path)]
    out = [("stay", np.full(rec.size, x0))]
    for tau in branch_times:
        k = int(np.flatnonzero(np.abs(rec - tau) <= 1e-12 * max(1.0, rec[-1]))[0])
        if k >= rec.size - 1:
            continue
        for sgn in dirs:
            room = (box[1] - x0) if sgn > 0 else (x0 - box[0])
            y1 = departure_seed(b1, x0, sgn, h, room)
            path = np.full(rec.size, x0)
            path[k + 1] = x0 + sgn * y1
            if k + 2 <= rec.size - 1:
                path[k + 1:] = rk4_path(p.drift, np.array([[x0 + sgn * y1]]), rec[k + 1:],
                                        nsub)[:, 0, 0]
            tag = f"depart[{_tfmt(tau)}{'' if sgn > 0 else ',-'}]"
            out.append((tag, path))
    return out


def _tfmt(t: float) -> str:
    return f"{t:.12g}"


def branching_catalog(p: Problem, s: float, nu: Measure, params: CandidateParams
                      ) -> list[SolutionCurve]:
    if p.dimension != 1 or not p.coefficients.degenerate:
        raise CandidateError("branching_catalog needs a one-dimensional problem with a = 0")
    if p.coefficients.time_dependent:
        raise CandidateError("branching_catalog needs a time-independent drift")
    if nu.kind != "atoms":
        raise CandidateError("branching_catalog needs atomic initial data")
    rec = params.time_grid.suffix(s)
    nsub = max(1, int(math.ceil(params.time_grid.step / params.dt - 1e-9)))
    bt = params.branch_times if params.branch_times is not None else params.checkpoints
    bt = [t for t in bt if s - 1e-12 <= t < params.time_grid.T - 1e-12]
    c = nu.compact()
    options = [_atom_paths(p, float(x), rec, nsub, params.time_grid.step, bt) for x in c.points[:, 0]]
    total = math.prod(len(o) for o in options)
    if total > MAX_CATALOG:
        raise CandidateError(f"branching catalog would hold {total} curves (limit {MAX_CATALOG})")
    curves = []
    for combo in itertools.product(*options):
        pts = np.stack([path for _, path in combo], axis=1)[:, :, None]
        w = np.broadcast_to(c.weights, (rec.size, c.size)).copy()
        label = ";".join(tag for tag, _ in combo)
        curves.append(SolutionCurve(rec, "atoms", w, pts, provenance="branching-catalog",
                                    label=label))
    return curves


# -- mollification ladder ---------------------------------------------------------------

def mollified_drift(p: Problem, eps: float, shift: int, nodes: int = 8) -> Callable:
    """``b_{eps,shift}(t, x) = sum_i w_i b(t, x + shift*eps + eps*u_i)`` (biweight kernel,
    Gauss-Legendre nodes ``u_i`` on [-1, 1]); the shift is applied on every axis."""
    u, gw = np.polynomial.legendre.leggauss(nodes)
    k = gw * (1 - u ** 2) ** 2
    k = k / k.sum()
    d = p.dimension
    if d == 1:
        offs = (shift + u)[:, None] * eps
        wts = k
    else:
        uu = np.array(list(itertools.product(u, u)))
        offs = (shift + uu) * eps
        wts = np.array([a * b for a, b in itertools.product(k, k)])

    def b_eps(t, x):
        x = np.atleast_2d(x)
        acc = np.zeros((x.shape[0], d))
        for o, wi in zip(offs, wts):
            acc += wi * p.drift(t, x + o)
        return acc

    return b_eps


def _ladder_one(p, s, nu, params, eps, shift):
    drift = mollified_drift(p, eps, shift, params.ladder_nodes)
    return solve_forward(p, s, nu, params.dt, params.grid, params.time_grid, drift=drift,
                         label=f"ladder[{eps:g},{shift:+d}]")


def mollification_ladder(p: Problem, s: float, nu: Measure, params: CandidateParams
                         ) -> list[SolutionCurve]:
    jobs = [(e, sh) for e in params.ladder_eps for sh in params.ladder_shifts]
    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as ex:
            return list(ex.map(lambda j: _ladder_one(p, s, nu, params, *j), jobs))
    return [_ladder_one(p, s, nu, params, *j) for j in jobs]


def solver_single(p: Problem, s: float, nu: Measure, params: CandidateParams
                  ) -> list[SolutionCurve]:
    return [solve_forward(p, s, nu, params.dt, params.grid, params.time_grid, label="solver")]


def mixture_hull(previous: Sequence[SolutionCurve], params: CandidateParams
                 ) -> list[SolutionCurve]:
    if len(previous) < 2:
        raise CandidateError("mixture_hull needs at least two admitted curves before it")
    out = []
    for lam in params.mixture_weights:
        for combo in itertools.combinations(previous, len(lam)):
            lbl = "+".join(f"{l:g}*{c.label}" for l, c in zip(lam, combo))
            out.append(mix(combo, lam, label=f"mix[{lbl}]"))
    return out


_BUILDERS = {
    "branching_catalog": branching_catalog,
    "mollification_ladder": mollification_ladder,
    "solver_single": solver_single,
}


def prepare_initial(p: Problem, nu: Measure, params: CandidateParams) -> Measure:
    """The measure candidates actually start from (atoms are gridded for grid solves)."""
    if p.coefficients.degenerate and nu.kind == "atoms":
        return nu
    if nu.kind == "atoms":
        if params.grid is None:
            raise CandidateError("a grid is required for this problem")
        return to_grid(nu, params.grid)[0]
    return nu


def generate_candidates(p: Problem, s: float, nu: Measure,
                        strategy: str | Sequence[str], params: CandidateParams) -> CandidateSet:
    """Build, certify and filter candidate curves from ``(s, nu)``.

    Strategies run in the given order; a curve is kept only if it is
    admitted and its max-over-time W1 distance to every curve kept so far
    exceeds the admission tolerance.
    """
    strategies = [strategy] if isinstance(strategy, str) else list(strategy)
    for st in strategies:
        if st not in STRATEGIES:
            raise CandidateError(f"unknown strategy {st!r}; valid: {', '.join(STRATEGIES)}")
    s = params.time_grid.snap(s)
    nu = prepare_initial(p, nu, params)
    fam = params.family_for(p.dimension)
    tol = params.admission_tolerance
    kept: list[SolutionCurve] = []
    excluded: list[dict] = []
    for st in strategies:
        raw = mixture_hull(kept, params) if st == "mixture_hull" else _BUILDERS[st](p, s, nu, params)
        for c in raw:
            c, ok = certify(c, p, tol, fam)
            if not ok:
                logger.info("excluded %s: residual %.3g > %.3g", c.label,
                            c.certificate["residual"], tol)
                excluded.append({"strategy": st, "label": c.label, "reason": "residual",
                                 "residual": c.certificate["residual"]})
                continue
            near = [k for k in kept if k.max_w1(c) <= tol]
            if near:
                excluded.append({"strategy": st, "label": c.label, "reason": "duplicate",
                                 "of": near[0].label,
                                 "max_w1": float(near[0].max_w1(c))})
                continue
            kept.append(c)
    if not kept:
        raise CandidateError(f"empty candidate set at s={s}: every curve failed admission")
    return CandidateSet(s, nu, tuple(kept), tol, tuple(excluded))
