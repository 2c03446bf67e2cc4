"""Time grids and measure-valued curves ``t -> mu_t`` on ``[s, T]``.

Every curve lives on a suffix of one global :class:`TimeGrid`, so restricting
to a later start time or projecting onto checkpoint times never interpolates.
Marginals are stored stacked: grid curves share one :class:`GridSpec` and keep
an ``(n_t, n_cells)`` weight array; atomic curves keep ``(n_t, n_atoms, d)``
locations and ``(n_t, n_atoms)`` weights (zero weights pad unused atoms).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .measure import GridSpec, Measure, MeasureError, load_measure, save_measure, wasserstein1

PROVENANCES = ("solver", "analytic", "particle", "glued", "branching-catalog", "mixture")
#: two times closer than this (relative to T) are the same grid time
TIME_TOL = 1e-12


class CurveError(ValueError):
    pass


class OffGridError(CurveError):
    """A requested time is not a node of the curve's time grid."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``k * T / n`` for ``k = 0..n``."""

    T: float
    n: int

    def __post_init__(self):
        if not self.T > 0 or self.n < 1:
            raise CurveError("time grid needs T > 0 and n >= 1")

    @classmethod
    def from_step(cls, T: float, step: float) -> "TimeGrid":
        n = int(round(T / step))
        if n < 1 or abs(n * step - T) > 1e-9 * T:
            raise CurveError(f"step {step} does not divide the horizon {T}")
        return cls(float(T), n)

    @property
    def step(self) -> float:
        return self.T / self.n

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n + 1)

    def index(self, t: float) -> int:
        k = int(round(float(t) / self.step))
        if k < 0 or k > self.n or abs(self.times[k] - t) > TIME_TOL * max(1.0, self.T):
            raise OffGridError(f"time {t} is not on the grid with step {self.step}")
        return k

    def contains(self, t: float) -> bool:
        try:
            self.index(t)
        except OffGridError:
            return False
        return True

    def snap(self, t: float) -> float:
        return float(self.times[self.index(t)])

    def suffix(self, s: float) -> np.ndarray:
        return self.times[self.index(s):]


@dataclass(frozen=True, eq=False)
class SolutionCurve:
    """Measure-valued curve on ``times`` (``times[0] = s``, ``times[-1] = T``).

    Parameters
    ----------
    times : (n_t,) array
        Strictly increasing.
    kind : {"grid", "atoms"}
    weights : (n_t, n) array
    points : (n_t, n, d) array, atomic curves only
    grid : GridSpec, grid curves only
    provenance : str
        One of :data:`PROVENANCES`.
    certificate : dict
        Residual certificate (value, test family ids, tolerance) once admitted.
    """

    times: np.ndarray
    kind: str
    weights: np.ndarray
    points: np.ndarray | None = None
    grid: GridSpec | None = None
    provenance: str = "solver"
    label: str = ""
    certificate: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise CurveError("times must be a nonempty vector")
        if np.any(np.diff(t) <= 0):
            raise CurveError("times must be strictly increasing")
        if self.provenance not in PROVENANCES:
            raise CurveError(f"unknown provenance {self.provenance!r}")
        if w.ndim != 2 or w.shape[0] != t.size:
            raise CurveError("weights must have shape (n_times, n_support)")
        if self.kind == "grid":
            if self.grid is None or w.shape[1] != self.grid.size:
                raise CurveError("grid curve needs a GridSpec matching the weight columns")
        elif self.kind == "atoms":
            p = np.asarray(self.points, dtype=float)
            if p.ndim == 2:
                p = p[:, :, None]
            if p.shape[:2] != w.shape:
                raise CurveError("atom locations and weights disagree in shape")
            p.setflags(write=False)
            object.__setattr__(self, "points", p)
        else:
            raise CurveError(f"unknown curve kind {self.kind!r}")
        if np.any(w < 0):
            raise CurveError("negative weight in curve")
        t.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "weights", w)

    # -- basic views ------------------------------------------------------
    @property
    def s(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def dimension(self) -> int:
        return self.grid.dimension if self.kind == "grid" else self.points.shape[2]

    def index_of(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t - TIME_TOL * max(1.0, abs(self.T))))
        if k >= self.n_times or abs(self.times[k] - t) > TIME_TOL * max(1.0, abs(self.T)):
            raise OffGridError(f"time {t} is not on the curve grid [{self.s}, {self.T}]")
        return k

    def support_points(self, k: int) -> np.ndarray:
        return self.grid.centers() if self.kind == "grid" else self.points[k]

    def marginal(self, k: int) -> Measure:
        if self.kind == "grid":
            return Measure("grid", self.grid.centers(), self.weights[k], self.grid, self.grid.box)
        return Measure("atoms", self.points[k], self.weights[k])

    def at(self, t: float) -> Measure:
        return self.marginal(self.index_of(t))

    @property
    def initial(self) -> Measure:
        return self.marginal(0)

    @property
    def terminal(self) -> Measure:
        return self.marginal(self.n_times - 1)

    def integrals(self, f) -> np.ndarray:
        """``(n_t,)`` array of ``int f d mu_t`` at every grid time."""
        if self.kind == "grid":
            return self.weights @ np.asarray(f(self.grid.centers()), dtype=float)
        n_t, n, d = self.points.shape
        vals = np.asarray(f(self.points.reshape(-1, d)), dtype=float).reshape(n_t, n)
        return np.einsum("kn,kn->k", self.weights, vals)

    def w1_path(self, other: "SolutionCurve") -> np.ndarray:
        """W1 distance between the two curves at each common time."""
        if self.n_times != other.n_times or not np.allclose(self.times, other.times,
                                                            rtol=0, atol=TIME_TOL):
            raise CurveError("curves are on different time grids")
        if self.kind == other.kind == "grid" and self.grid == other.grid and self.dimension == 1:
            diff = np.cumsum(self.weights - other.weights, axis=1)[:, :-1]
            return self.grid.spacing * np.abs(diff).sum(axis=1)
        if self.kind == other.kind == "atoms" and self.dimension == 1:
            if self.points.shape[1] == other.points.shape[1] == 1:
                return np.abs(self.points[:, 0, 0] - other.points[:, 0, 0])
            # CDF gap of the merged supports, row by row
            x = np.concatenate([self.points[:, :, 0], other.points[:, :, 0]], axis=1)
            w = np.concatenate([self.weights / self.weights.sum(axis=1, keepdims=True),
                                -other.weights / other.weights.sum(axis=1, keepdims=True)],
                               axis=1)
            order = np.argsort(x, axis=1, kind="stable")
            x = np.take_along_axis(x, order, axis=1)
            w = np.take_along_axis(w, order, axis=1)
            gap = np.cumsum(w, axis=1)[:, :-1]
            return np.sum(np.abs(gap) * np.diff(x, axis=1), axis=1)
        return np.array([wasserstein1(self.marginal(k), other.marginal(k))
                         for k in range(self.n_times)])

    def max_w1(self, other: "SolutionCurve") -> float:
        return float(self.w1_path(other).max())

    @property
    def continuity_constant(self) -> float:
        """``C = max_k W1(mu_k, mu_{k+1}) / sqrt(t_{k+1} - t_k)`` (0 for one time)."""
        if "C" not in self._cache:
            if self.n_times < 2:
                self._cache["C"] = 0.0
            else:
                steps = np.empty(self.n_times - 1)
                if self.kind == "grid" and self.dimension == 1:
                    d = np.cumsum(np.diff(self.weights, axis=0), axis=1)[:, :-1]
                    steps = self.grid.spacing * np.abs(d).sum(axis=1)
                elif self.kind == "atoms" and self.dimension == 1 and self.points.shape[1] == 1:
                    steps = np.abs(np.diff(self.points[:, 0, 0]))
                else:
                    for k in range(self.n_times - 1):
                        steps[k] = wasserstein1(self.marginal(k), self.marginal(k + 1))
                self._cache["C"] = float(np.max(steps / np.sqrt(np.diff(self.times))))
        return self._cache["C"]

    def key(self) -> str:
        """Canonical content hash of the exact stored data (16 hex digits)."""
        if "key" not in self._cache:
            h = hashlib.sha1()
            h.update(self.kind.encode())
            h.update(np.ascontiguousarray(self.times).tobytes())
            h.update(np.ascontiguousarray(self.weights).tobytes())
            if self.kind == "grid":
                h.update(repr(self.grid.to_dict()).encode())
            else:
                h.update(np.ascontiguousarray(self.points).tobytes())
            self._cache["key"] = h.hexdigest()[:16]
        return self._cache["key"]

    def with_certificate(self, **cert) -> "SolutionCurve":
        c = dict(self.certificate)
        c.update(cert)
        out = dataclasses.replace(self, certificate=c, _cache={})
        return out

    def relabel(self, label: str, provenance: str | None = None) -> "SolutionCurve":
        return dataclasses.replace(self, label=label, provenance=provenance or self.provenance,
                                   _cache={})

    def slice(self, start: int, stop: int | None = None,
              step_indices: Sequence[int] | None = None) -> "SolutionCurve":
        """Sub-curve on ``times[start:stop]`` or on explicit indices; atoms never carry
        columns that are zero at every kept time."""
        idx = np.asarray(step_indices) if step_indices is not None else np.arange(
            start, self.n_times if stop is None else stop)
        w = self.weights[idx]
        pts = None
        if self.kind == "atoms":
            live = np.any(w > 0, axis=0)
            w = w[:, live]
            pts = self.points[idx][:, live]
        return dataclasses.replace(self, times=self.times[idx].copy(), weights=w.copy(),
                                   points=None if pts is None else pts.copy(),
                                   certificate={}, _cache={})

    # -- serialization ----------------------------------------------------
    def manifest(self) -> dict:
        return {
            "s": self.s,
            "T": self.T,
            "times": self.times.tolist(),
            "kind": self.kind,
            "provenance": self.provenance,
            "label": self.label,
            "key": self.key(),
            "grid": None if self.grid is None else self.grid.to_dict(),
            "certificate": self.certificate,
        }

    def __repr__(self) -> str:
        return (f"SolutionCurve({self.label or self.provenance}, [{self.s}, {self.T}], "
                f"n_t={self.n_times}, kind={self.kind}, key={self.key()})")


def from_measures(times, measures: Sequence[Measure], provenance: str = "analytic",
                  label: str = "") -> SolutionCurve:
    """Stack a list of measures (all grid on one GridSpec, or all atomic)."""
    times = np.asarray(times, dtype=float)
    if len(measures) != times.size:
        raise CurveError("one measure per time is required")
    kinds = {m.kind for m in measures}
    if kinds == {"grid"}:
        grids = {m.grid for m in measures}
        if len(grids) != 1:
            raise CurveError("grid marginals must share one GridSpec")
        return SolutionCurve(times, "grid", np.stack([m.weights for m in measures]),
                             grid=measures[0].grid, provenance=provenance, label=label)
    if kinds != {"atoms"}:
        raise CurveError("cannot stack grid and atomic marginals into one curve")
    n = max(m.size for m in measures)
    d = measures[0].dimension
    pts = np.empty((times.size, n, d))
    w = np.zeros((times.size, n))
    for k, m in enumerate(measures):
        pts[k, : m.size] = m.points
        pts[k, m.size:] = m.points[0]
        w[k, : m.size] = m.weights
    return SolutionCurve(times, "atoms", w, pts, provenance=provenance, label=label)


def constant_curve(times, nu: Measure, provenance: str = "analytic",
                   label: str = "constant") -> SolutionCurve:
    times = np.asarray(times, dtype=float)
    n_t = times.size
    if nu.kind == "grid":
        return SolutionCurve(times, "grid", np.broadcast_to(nu.weights, (n_t, nu.size)).copy(),
                             grid=nu.grid, provenance=provenance, label=label)
    return SolutionCurve(times, "atoms", np.broadcast_to(nu.weights, (n_t, nu.size)).copy(),
                         np.broadcast_to(nu.points, (n_t,) + nu.points.shape).copy(),
                         provenance=provenance, label=label)


def pad_atoms(curve: SolutionCurve, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights of an atomic curve widened to ``n`` columns."""
    n_t, m, d = curve.points.shape
    if m == n:
        return curve.points, curve.weights
    pts = np.empty((n_t, n, d))
    pts[:, :m] = curve.points
    pts[:, m:] = curve.points[:, :1]
    w = np.zeros((n_t, n))
    w[:, :m] = curve.weights
    return pts, w


def mix(curves: Sequence[SolutionCurve], lam: Sequence[float], label: str = "") -> SolutionCurve:
    """Convex combination ``sum_i lam_i mu^i_t`` (same time grid, same kind)."""
    lam = np.asarray(lam, dtype=float)
    if len(curves) != lam.size or len(curves) == 0:
        raise CurveError("one weight per curve is required")
    if np.any(lam < 0) or abs(math.fsum(lam) - 1.0) > 1e-12:
        raise CurveError("mixture weights must be nonnegative and sum to 1")
    ref = curves[0]
    for c in curves[1:]:
        if c.n_times != ref.n_times or not np.array_equal(c.times, ref.times):
            raise CurveError("mixture components must share the time grid")
        if c.kind != ref.kind:
            raise CurveError("cannot mix grid and atomic curves")
    if ref.kind == "grid":
        if any(c.grid != ref.grid for c in curves):
            raise CurveError("grid mixture components must share the GridSpec")
        w = sum(l * c.weights for l, c in zip(lam, curves))
        return SolutionCurve(ref.times, "grid", w, grid=ref.grid, provenance="mixture",
                             label=label)
    pts = np.concatenate([c.points for c in curves], axis=1)
    w = np.concatenate([l * c.weights for l, c in zip(lam, curves)], axis=1)
    return SolutionCurve(ref.times, "atoms", w, pts, provenance="mixture", label=label)


def save_curve(curve: SolutionCurve, directory: str | Path,
               times: Sequence[float] | None = None) -> dict:
    """Write per-time measure CSVs plus ``manifest.json``; optionally only at ``times``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    idx = range(curve.n_times) if times is None else [curve.index_of(t) for t in times]
    files = []
    for j, k in enumerate(idx):
        name = f"t{j:05d}.csv"
        save_measure(curve.marginal(k), directory / name)
        files.append(name)
    man = curve.manifest()
    man["saved_times"] = [float(curve.times[k]) for k in idx]
    man["files"] = files
    (directory / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True))
    return man


def load_curve(directory: str | Path) -> SolutionCurve:
    directory = Path(directory)
    try:
        man = json.loads((directory / "manifest.json").read_text())
        measures = [load_measure(directory / f) for f in man["files"]]
    except (OSError, KeyError, json.JSONDecodeError, MeasureError) as exc:
        raise CurveError(f"cannot load curve from {directory}: {exc}") from exc
    c = from_measures(man["saved_times"], measures, man["provenance"], man.get("label", ""))
    c = c.with_certificate(**man.get("certificate", {}))
    # a projected copy keeps the identity of the curve it was saved from
    if "key" in man:
        c._cache["key"] = man["key"]
    return c
