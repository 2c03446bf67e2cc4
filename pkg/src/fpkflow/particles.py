"""Particle simulation of the diffusion generated by L and martingale-problem checks.

Paths follow Euler-Maruyama ``X += b dt + sigma sqrt(dt) xi`` with
``sigma sigma^T = a`` from a symmetric eigendecomposition (negative
eigenvalues clipped to zero).  Particles are simulated in fixed-size blocks,
each with its own Philox stream keyed by ``(seed, block)``, so results do not
depend on how blocks are scheduled across workers.
"""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .curve import OffGridError, SolutionCurve
from .functions import TestFunction
from .measure import Measure
from .problem import Problem

BLOCK = 8192


class ParticleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``paths[i, k]`` is particle ``i`` at time ``times[k] = s + k dt``."""

    paths: np.ndarray
    s: float
    T: float
    dt: float
    rng_seed: int
    problem: Problem

    @property
    def N(self) -> int:
        return self.paths.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.s, self.T, self.paths.shape[1])

    def index_of(self, t: float) -> int:
        k = int(round((t - self.s) / self.dt))
        if k < 0 or k >= self.paths.shape[1] or abs(self.times[k] - t) > 1e-9 * max(1.0, self.T):
            raise OffGridError(f"time {t} is not on the particle step grid")
        return k

    def summary(self, checkpoints: Sequence[float]) -> dict:
        out = []
        for q in checkpoints:
            x = self.paths[:, self.index_of(q)]
            out.append({"t": float(q), "mean": x.mean(axis=0).tolist(),
                        "second_moment": (x ** 2).mean(axis=0).tolist(),
                        "variance": x.var(axis=0).tolist()})
        return {"N": self.N, "dt": self.dt, "s": self.s, "T": self.T, "seed": self.rng_seed,
                "checkpoints": out}

    def dump(self, path: str | Path) -> None:
        """Raw paths: header ``N, steps`` (int64) and ``dt, s`` (float64), then
        row-major float64 data of shape ``(N, steps, d)``."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<qqdd", self.N, self.paths.shape[1], self.dt, self.s))
            fh.write(np.ascontiguousarray(self.paths, dtype="<f8").tobytes())


def load_paths(path: str | Path) -> tuple[np.ndarray, float, float]:
    raw = Path(path).read_bytes()
    n, steps, dt, s = struct.unpack("<qqdd", raw[:32])
    data = np.frombuffer(raw[32:], dtype="<f8")
    return data.reshape(n, steps, -1), dt, s


def diffusion_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a batch of nonnegative matrices ``(n, d, d)``."""
    if a.shape[1] == 1:
        return np.sqrt(np.maximum(a, 0.0))
    try:
        lam, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, 1, 2)))
    except np.linalg.LinAlgError as exc:
        raise ParticleError(f"eigendecomposition failed: {exc}") from exc
    return np.einsum("nij,nj,nkj->nik", v, np.sqrt(np.maximum(lam, 0.0)), v)


def sample_initial(nu: Measure, n: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(nu.size, size=n, p=nu.weights / nu.weights.sum())
    return nu.points[idx].copy()


def _simulate_block(p: Problem, nu: Measure, n: int, s: float, steps: int, dt: float,
                    seed: int, block: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))
    d = p.dimension
    x = sample_initial(nu, n, rng)
    out = np.empty((n, steps + 1, d))
    out[:, 0] = x
    degenerate = p.coefficients.degenerate
    sq = math.sqrt(dt)
    for k in range(steps):
        t = s + k * dt
        xi = rng.standard_normal((n, d))
        x = x + p.drift(t, x) * dt
        if not degenerate:
            sig = diffusion_sqrt(p.diffusion(t, out[:, k]))
            x = x + sq * np.einsum("nij,nj->ni", sig, xi)
        if not np.all(np.isfinite(x)):
            raise ParticleError(f"non-finite particle position at step {k + 1}")
        out[:, k + 1] = x
    return out


def simulate_particles(p: Problem, s: float, nu: Measure, N: int, dt: float, seed: int,
                       T: float | None = None, workers: int = 1) -> ParticleEnsemble:
    """Euler-Maruyama ensemble of ``N`` paths from ``nu`` at time ``s``."""
    T = p.T if T is None else T
    steps = int(round((T - s) / dt))
    if steps < 1 or abs(steps * dt - (T - s)) > 1e-9 * max(1.0, T):
        raise ParticleError(f"dt={dt} does not divide [{s}, {T}]")
    sizes = [min(BLOCK, N - b0) for b0 in range(0, N, BLOCK)]
    jobs = [(n, i) for i, n in enumerate(sizes)]

    def run(job):
        n, i = job
        return _simulate_block(p, nu, n, s, steps, dt, seed, i)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            blocks = list(ex.map(run, jobs))
    else:
        blocks = [run(j) for j in jobs]
    return ParticleEnsemble(np.concatenate(blocks, axis=0), float(s), float(T), float(dt),
                            int(seed), p)


def marginals(e: ParticleEnsemble, times: Sequence[float] | None = None) -> SolutionCurve:
    """Empirical marginal curve (equal weights ``1/N``) at the requested step times."""
    idx = list(range(e.paths.shape[1])) if times is None else [e.index_of(t) for t in times]
    pts = np.ascontiguousarray(np.swapaxes(e.paths[:, idx], 0, 1))
    w = np.full(pts.shape[:2], 1.0 / e.N)
    return SolutionCurve(e.times[idx], "atoms", w, pts, provenance="particle", label="particles")


@dataclass
class MartingaleResult:
    statistic: float
    threshold: float
    passed: bool
    worst: dict

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "threshold": self.threshold,
                "passed": self.passed, "worst": self.worst}


def martingale_statistics(e: ParticleEnsemble, phis: Sequence[TestFunction],
                          pairs: Sequence[tuple[float, float]], n_windows: int = 4,
                          problem: Problem | None = None, z: float = 3.0) -> MartingaleResult:
    """Window-tested martingale increments of ``phi(X_t) - int L phi(X_u) du``.

    For each ``phi``, pair ``(r, t)`` and quantile window ``G`` of ``X_r``
    (first coordinate) the cell value is ``|mean((M_t - M_r) 1_G)|`` and its
    threshold ``z * std((M_t - M_r) 1_G) / sqrt(N)``.  The result passes when
    every cell is below its own threshold; ``statistic`` is the largest cell
    value and ``threshold`` the threshold of that cell.
    """
    p = e.problem if problem is None else problem
    for phi in phis:
        if not phi.has_derivatives:
            raise ParticleError(f"{phi.id} has no registered derivatives")
    times = e.times
    N = e.N
    best = None
    all_ok = True
    for phi in phis:
        for r, t in pairs:
            kr, kt = e.index_of(r), e.index_of(t)
            if kt < kr:
                raise ParticleError(f"pair ({r}, {t}) is not ordered")
            integ = np.zeros(N)
            for k in range(kr, kt):
                integ += p.apply_generator(phi, times[k], e.paths[:, k]) * e.dt
            dM = phi(e.paths[:, kt]) - phi(e.paths[:, kr]) - integ
            xr = e.paths[:, kr, 0]
            edges = np.quantile(xr, np.linspace(0, 1, n_windows + 1)[1:-1])
            win = np.searchsorted(edges, xr, side="right")
            for g in range(n_windows):
                y = dM * (win == g)
                val = abs(float(y.mean()))
                thr = z * float(y.std()) / math.sqrt(N)
                ok = val <= thr
                all_ok &= ok
                cell = {"phi": phi.id, "pair": [float(r), float(t)], "window": g,
                        "value": val, "threshold": thr}
                if best is None or val > best[0]:
                    best = (val, thr, cell)
    return MartingaleResult(best[0], best[1], bool(all_ok), best[2])


def martingale_residual(e: ParticleEnsemble, phis: Sequence[TestFunction],
                        pairs: Sequence[tuple[float, float]], n_windows: int = 4,
                        problem: Problem | None = None) -> float:
    """Largest window-tested martingale increment (see :func:`martingale_statistics`)."""
    return martingale_statistics(e, phis, pairs, n_windows, problem).statistic


def write_summary(e: ParticleEnsemble, checkpoints: Sequence[float], path: str | Path,
                  extra: dict | None = None) -> None:
    d = e.summary(checkpoints)
    if extra:
        d.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
