"""Discrete probability measures on R^1 / R^2 and metrics for weak convergence.

A :class:`Measure` is either a cell-averaged grid measure (mass per cell,
located at the cell centre) or a finite set of weighted atoms.  Both share
the same ``points`` / ``weights`` view, so pairing against a test function
is the same finite sum in either case.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: deficit above which an unnormalized measure is reported when rescaled
NORMALIZATION_WARN = 1e-9
#: deficit below which weights are left bit-for-bit untouched
_RESCALE_FLOOR = 1e-13
#: number of projection directions for the sliced 2D distance
SLICED_DIRECTIONS = 64


class MeasureError(ValueError):
    """Raised for invalid measure data or incompatible measure operations."""


class EvaluationError(ValueError):
    """A test function produced a non-finite value on the support of a measure."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid: ``cells[i]`` cells of width ``spacing`` from ``origin``.

    ``origin`` is the lower corner of the box, so cell ``i`` along an axis
    has centre ``origin + (i + 1/2) * spacing``.  2D cells are flattened in
    C order (last axis fastest).
    """

    origin: tuple[float, ...]
    spacing: float
    cells: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        object.__setattr__(self, "spacing", float(self.spacing))
        if len(self.origin) != len(self.cells) or len(self.cells) not in (1, 2):
            raise MeasureError("grid must be 1D or 2D with matching origin/cells")
        if not self.spacing > 0:
            raise MeasureError(f"grid spacing must be positive, got {self.spacing}")
        if min(self.cells) < 1:
            raise MeasureError("grid needs at least one cell per axis")

    @classmethod
    def centered(cls, lower: Sequence[float] | float, upper: Sequence[float] | float,
                 spacing: float) -> "GridSpec":
        """Grid covering ``[lower, upper]`` whose cell centres include ``lower + k*spacing``.

        The box is widened by half a cell on both sides, so integer multiples of
        ``spacing`` (in particular 0 when ``lower`` is a multiple) are centres.
        """
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        n = np.rint((hi - lo) / spacing).astype(int) + 1
        return cls(tuple(lo - 0.5 * spacing), spacing, tuple(int(k) for k in n))

    @property
    def dimension(self) -> int:
        return len(self.cells)

    @property
    def size(self) -> int:
        return int(np.prod(self.cells))

    @property
    def box(self) -> tuple[tuple[float, float], ...]:
        return tuple((o, o + c * self.spacing) for o, c in zip(self.origin, self.cells))

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.cells[axis]) + 0.5) * self.spacing

    def axis_faces(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.cells[axis] + 1) * self.spacing

    def centers(self) -> np.ndarray:
        if self.dimension == 1:
            return self.axis_centers(0)[:, None]
        xs, ys = np.meshgrid(self.axis_centers(0), self.axis_centers(1), indexing="ij")
        return np.column_stack([xs.ravel(), ys.ravel()])

    def nearest_index(self, points: np.ndarray) -> np.ndarray:
        """Flat index of the cell containing each point (clamped to the grid)."""
        points = np.atleast_2d(points)
        idx = np.floor((points - np.asarray(self.origin)) / self.spacing).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.cells) - 1)
        if self.dimension == 1:
            return idx[:, 0]
        return np.ravel_multi_index((idx[:, 0], idx[:, 1]), self.cells)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": self.spacing, "cells": list(self.cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), d["spacing"], tuple(d["cells"]))


@dataclass(frozen=True, eq=False)
class Measure:
    """Discrete Borel probability measure.

    Parameters
    ----------
    kind : {"grid", "atoms"}
    points : (n, d) array
        Atom locations, or cell centres for grid measures.
    weights : (n,) array
        Nonnegative masses.  Rescaled to total 1 on construction; a deficit
        larger than ``NORMALIZATION_WARN`` is logged.
    grid : GridSpec, optional
        Required for ``kind == "grid"``.
    domain : tuple of (lo, hi) per axis, optional
        If given, every atom must lie inside it.
    """

    kind: str
    points: np.ndarray
    weights: np.ndarray
    grid: GridSpec | None = None
    domain: tuple[tuple[float, float], ...] | None = None
    _key: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("grid", "atoms"):
            raise MeasureError(f"unknown measure kind {self.kind!r}")
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0]:
            raise MeasureError(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if pts.shape[1] not in (1, 2):
            raise MeasureError(f"only dimensions 1 and 2 are supported, got {pts.shape[1]}")
        if w.size == 0:
            raise MeasureError("a measure needs at least one support point")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(pts)):
            raise MeasureError("non-finite point or weight")
        if np.any(w < 0):
            raise MeasureError(f"negative weight {w.min():.3e}")
        total = math.fsum(w)
        if total <= 0:
            raise MeasureError("measure has zero total mass")
        deficit = abs(total - 1.0)
        if deficit > _RESCALE_FLOOR:
            if deficit > NORMALIZATION_WARN:
                logger.warning("normalizing measure with total mass %.12g", total)
            w = w / total
        if self.kind == "grid":
            if self.grid is None:
                raise MeasureError("grid measure needs a GridSpec")
            if self.grid.size != w.size:
                raise MeasureError("grid size and weight count differ")
        if self.domain is not None:
            for ax, (lo, hi) in enumerate(self.domain):
                if np.any(pts[:, ax] < lo) or np.any(pts[:, ax] > hi):
                    raise MeasureError(f"support leaves the domain box on axis {ax}")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "weights", _readonly(w))

    # -- constructors -----------------------------------------------------
    @classmethod
    def atoms(cls, locations, weights=None, domain=None) -> "Measure":
        locs = np.asarray(locations, dtype=float)
        if locs.ndim == 0:
            locs = locs[None]
        if locs.ndim == 1:
            locs = locs[:, None]
        if weights is None:
            weights = np.full(locs.shape[0], 1.0 / locs.shape[0])
        return cls("atoms", locs, weights, None, domain)

    @classmethod
    def dirac(cls, x, domain=None) -> "Measure":
        return cls.atoms(np.atleast_1d(np.asarray(x, dtype=float))[None, :], [1.0], domain)

    @classmethod
    def on_grid(cls, grid: GridSpec, weights) -> "Measure":
        return cls("grid", grid.centers(), weights, grid, grid.box)

    @classmethod
    def from_density(cls, grid: GridSpec, density) -> "Measure":
        """Cell-centre discretization of a density (midpoint rule times cell volume)."""
        vals = np.asarray(density(grid.centers()), dtype=float) * grid.spacing ** grid.dimension
        return cls.on_grid(grid, vals)

    @classmethod
    def normal(cls, grid: GridSpec, mean=0.0, var=1.0) -> "Measure":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))

        def dens(x):
            r2 = np.sum((x - mean) ** 2, axis=1)
            return np.exp(-0.5 * r2 / var) / (2 * np.pi * var) ** (0.5 * x.shape[1])

        return cls.from_density(grid, dens)

    # -- views ------------------------------------------------------------
    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def moment(self, order: int, axis: int = 0) -> float:
        return math.fsum(self.weights * self.points[:, axis] ** order)

    def compact(self) -> "Measure":
        """Atomic copy without zero-weight points and with duplicate atoms merged."""
        keep = self.weights > 0
        pts, w = self.points[keep], self.weights[keep]
        uniq, inv = np.unique(pts, axis=0, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inv.ravel(), w)
        return Measure("atoms", uniq, merged, None, self.domain)

    def key(self) -> str:
        """Canonical content hash, stable under atom reordering and zero weights."""
        if self._key:
            return self._key[0]
        h = hashlib.sha1()
        if self.kind == "grid":
            h.update(repr(self.grid.to_dict()).encode())
            h.update((np.round(self.weights, 15) + 0.0).tobytes())
        else:
            c = self.compact()
            h.update(b"atoms")
            h.update((np.round(c.points, 12) + 0.0).tobytes())
            h.update((np.round(c.weights, 15) + 0.0).tobytes())
        k = h.hexdigest()[:16]
        self._key.append(k)
        return k

    def __repr__(self) -> str:
        return f"Measure(kind={self.kind!r}, d={self.dimension}, n={self.size}, mean={self.mean()})"


def normalize(m: Measure) -> Measure:
    """Rescale weights to total mass one; the support is unchanged."""
    total = math.fsum(m.weights)
    if not total > 0:
        raise MeasureError("cannot normalize a measure with nonpositive total mass")
    return Measure(m.kind, m.points, m.weights / total, m.grid, m.domain)


def normalize_weights(weights) -> np.ndarray:
    """Array version of :func:`normalize` for raw weight vectors."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise MeasureError("negative weights")
    total = math.fsum(w)
    if not total > 0:
        raise MeasureError("cannot normalize weights with zero total mass")
    return w / total


def integrate(m: Measure, f) -> float:
    """Pairing ``sum_i w_i f(x_i)``, exactly rounded.

    ``f`` is a :class:`~fpkflow.functions.TestFunction` or any callable
    mapping an ``(n, d)`` array to ``(n,)`` values.
    """
    vals = np.asarray(f(m.points), dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        name = getattr(f, "id", getattr(f, "__name__", "f"))
        raise EvaluationError(f"{name} is not finite at support point {m.points[i].tolist()}")
    return math.fsum(m.weights * vals)


def _w1_1d(x1, w1, x2, w2) -> float:
    x = np.concatenate([x1, x2])
    w = np.concatenate([w1, -w2])
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    cdf_gap = np.cumsum(w)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(x)))


def _directions(n: int = SLICED_DIRECTIONS) -> np.ndarray:
    theta = np.pi * np.arange(n) / n
    return np.column_stack([np.cos(theta), np.sin(theta)])


def wasserstein1(m1: Measure, m2: Measure) -> float:
    """W1 distance; exact in 1D, sliced (64 fixed directions) in 2D."""
    if m1.dimension != m2.dimension:
        raise MeasureError(f"dimension mismatch: {m1.dimension} vs {m2.dimension}")
    if m1.dimension == 1:
        if m1.kind == m2.kind == "grid" and m1.grid == m2.grid:
            return float(m1.grid.spacing * np.sum(np.abs(np.cumsum(m1.weights - m2.weights)[:-1])))
        return _w1_1d(m1.points[:, 0], m1.weights, m2.points[:, 0], m2.weights)
    dirs = _directions()
    p1, p2 = m1.points @ dirs.T, m2.points @ dirs.T
    return float(np.mean([_w1_1d(p1[:, k], m1.weights, p2[:, k], m2.weights)
                          for k in range(dirs.shape[0])]))


# -- CSV round trip -----------------------------------------------------------

def measure_to_csv(m: Measure) -> str:
    """Serialize as ``# kind,dimension`` header followed by ``location...,weight`` rows."""
    buf = io.StringIO()
    buf.write(f"# {m.kind},{m.dimension}\n")
    if m.kind == "grid":
        g = m.grid
        buf.write("# grid," + ",".join(repr(o) for o in g.origin) + f",{g.spacing!r},"
                  + ",".join(str(c) for c in g.cells) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for p, w in zip(m.points, m.weights):
        writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])
    return buf.getvalue()


def measure_from_csv(text: str) -> Measure:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise MeasureError("missing '# kind,dimension' header")
    kind, dim = [s.strip() for s in lines[0][1:].split(",")]
    dim = int(dim)
    grid = None
    body = lines[1:]
    if kind == "grid":
        meta = body[0][1:].split(",")
        if meta[0].strip() != "grid":
            raise MeasureError("grid measure CSV needs a '# grid,...' line")
        vals = meta[1:]
        grid = GridSpec(tuple(float(v) for v in vals[:dim]), float(vals[dim]),
                        tuple(int(v) for v in vals[dim + 1:]))
        body = body[1:]
    rows = np.array([[float(v) for v in r] for r in csv.reader(body) if r], dtype=float)
    pts, w = rows[:, :dim], rows[:, dim]
    if kind == "grid":
        return Measure("grid", grid.centers(), w, grid, grid.box)
    return Measure("atoms", pts, w)


def save_measure(m: Measure, path: str | Path) -> None:
    Path(path).write_text(measure_to_csv(m))


def load_measure(path: str | Path) -> Measure:
    return measure_from_csv(Path(path).read_text())


def to_grid(m: Measure, grid: GridSpec) -> tuple[Measure, float]:
    """Move every atom to the centre of its cell on ``grid``.

    Returns the gridded measure and the W1 cost of the move (0 when the
    atoms already sit on cell centres).
    """
    if m.kind == "grid" and m.grid == grid:
        return m, 0.0
    idx = grid.nearest_index(m.points)
    w = np.zeros(grid.size)
    np.add.at(w, idx, m.weights)
    g = Measure.on_grid(grid, w)
    return g, wasserstein1(m, g)
