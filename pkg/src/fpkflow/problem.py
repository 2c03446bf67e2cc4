"""Coefficients of the Kolmogorov operator, their validation, and preset problems.

Throughout, the operator acting on test functions is

    L_t f = 1/2 a_ij(t, x) d_i d_j f + b_i(t, x) d_i f,

and curves solve the weak equation ``d/dt <f, mu_t> = <L_t f, mu_t>``.

Coefficient callables are vectorized: ``a(t, x)`` with ``x`` of shape
``(n, d)`` and ``t`` scalar or ``(n,)`` returns ``(n, d, d)``; ``b(t, x)``
returns ``(n, d)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import expr as _expr
from .measure import GridSpec, Measure

logger = logging.getLogger(__name__)

PRESETS = ("heat", "zero", "sqrt_branch", "ou_tanh")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class Coefficients:
    a: Callable[[np.ndarray, np.ndarray], np.ndarray]
    b: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sup_bound_a: float
    sup_bound_b: float
    dimension: int
    horizon: float
    time_dependent: bool = False

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ProblemError("dimension must be 1 or 2")
        if not self.horizon > 0:
            raise ProblemError("horizon T must be positive")

    @property
    def degenerate(self) -> bool:
        """True when the diffusion matrix vanishes identically (pure transport)."""
        return self.sup_bound_a == 0.0


@dataclass(frozen=True)
class AnalyticMarginal:
    """Closed-form marginal: a fixed measure, or a finite mixture of isotropic normals."""

    kind: str  # "measure" | "normal_mixture"
    measure: Measure | None = None
    means: np.ndarray | None = None
    weights: np.ndarray | None = None
    var: float = 0.0

    def to_measure(self, grid: GridSpec | None = None) -> Measure:
        if self.kind == "measure":
            return self.measure
        if self.var == 0.0:
            return Measure.atoms(self.means, self.weights)
        if grid is None:
            raise ProblemError("a grid is needed to discretize a normal mixture")
        c = grid.centers()
        dens = np.zeros(len(c))
        for m, w in zip(self.means, self.weights):
            dens += w * np.exp(-0.5 * np.sum((c - m) ** 2, axis=1) / self.var)
        return Measure.on_grid(grid, dens)

    def second_moment(self, axis: int = 0) -> float:
        if self.kind == "measure":
            return self.measure.moment(2, axis)
        return float(np.sum(self.weights * (self.means[:, axis] ** 2 + self.var)))


@dataclass(frozen=True)
class Problem:
    coefficients: Coefficients
    domain_box: tuple[tuple[float, float], ...]
    preset_id: str = "custom"
    known_solution: Callable[[float, Measure, float], AnalyticMarginal] | None = None
    description: str = ""
    source: dict = field(default_factory=dict, compare=False)

    @property
    def dimension(self) -> int:
        return self.coefficients.dimension

    @property
    def T(self) -> float:
        return self.coefficients.horizon

    def _clamp(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array([b[0] for b in self.domain_box])
        hi = np.array([b[1] for b in self.domain_box])
        return np.clip(x, lo, hi)

    def diffusion(self, t, x) -> np.ndarray:
        """``a(t, x)``, extended constantly outside the domain box."""
        return self.coefficients.a(t, self._clamp(x))

    def drift(self, t, x) -> np.ndarray:
        """``b(t, x)``, extended constantly outside the domain box."""
        return self.coefficients.b(t, self._clamp(x))

    def apply_generator(self, f, t, x) -> np.ndarray:
        """``(L_t f)(x)`` for a test function with gradient and Hessian."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.einsum("ni,ni->n", self.drift(t, x), f.grad(x))
        if not self.coefficients.degenerate:
            out = out + 0.5 * np.einsum("nij,nij->n", self.diffusion(t, x), f.hess(x))
        return out

    def with_drift(self, b: Callable, label: str) -> "Problem":
        """Copy of the problem with the drift replaced (bounds re-estimated)."""
        c = self.coefficients
        coef = Coefficients(c.a, b, c.sup_bound_a, max(c.sup_bound_b, _sample_sup_b(b, self)),
                            c.dimension, c.horizon, c.time_dependent)
        return Problem(coef, self.domain_box, f"{self.preset_id}:{label}", None,
                       self.description, self.source)


def _sample_sup_b(b, problem: Problem, n: int = 401) -> float:
    lo, hi = problem.domain_box[0]
    x = np.linspace(lo, hi, n)[:, None]
    if problem.dimension == 2:
        lo2, hi2 = problem.domain_box[1]
        g = np.meshgrid(np.linspace(lo, hi, 81), np.linspace(lo2, hi2, 81), indexing="ij")
        x = np.column_stack([g[0].ravel(), g[1].ravel()])
    vals = [np.abs(b(t, x)).max() for t in np.linspace(0, problem.T, 5)]
    return float(max(vals))


# -- validation ---------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_value: float
    worst_point: tuple | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "worst_value": self.worst_value,
                "worst_point": self.worst_point, "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


@dataclass(frozen=True)
class SampleSpec:
    """Probe points: every time in ``times`` combined with every row of ``points``."""

    times: np.ndarray
    points: np.ndarray
    continuity_levels: int = 20

    @classmethod
    def grid(cls, box, horizon: float, n: int = 101) -> "SampleSpec":
        times = np.linspace(0.0, horizon, n)
        axes = [np.linspace(lo, hi, n) for lo, hi in box]
        if len(axes) == 1:
            pts = axes[0][:, None]
        else:
            g = np.meshgrid(*axes, indexing="ij")
            pts = np.column_stack([a.ravel() for a in g])
        return cls(times, pts)


def _probe(fn, t, x, name, failures):
    try:
        with np.errstate(all="ignore"):
            v = np.asarray(fn(t, x), dtype=float)
    except Exception as exc:  # evaluator failures are reported, not raised
        failures.append(f"{name} raised {type(exc).__name__}: {exc}")
        return None
    return v


def continuity_modulus(fn, t: float, x, levels: int = 20) -> np.ndarray:
    """Sampled modulus ``max_{|e|=1 axis} |fn(t, x +- h e) - fn(t, x)|`` for ``h = 2^-k``.

    Returns an array of shape ``(levels, n)`` (row ``k-1`` is ``h = 2^-k``).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    with np.errstate(all="ignore"):
        base = np.asarray(fn(t, x), dtype=float).reshape(n, -1)
        out = np.zeros((levels, n))
        for k in range(1, levels + 1):
            h = 2.0 ** -k
            for i in range(d):
                for sgn in (1.0, -1.0):
                    xs = x.copy()
                    xs[:, i] += sgn * h
                    diff = np.abs(np.asarray(fn(t, xs), dtype=float).reshape(n, -1) - base)
                    out[k - 1] = np.maximum(out[k - 1], diff.max(axis=1))
    return out


def validate_coefficients(c: Coefficients, sample_spec: SampleSpec,
                          sym_tol: float = 1e-12, psd_tol: float = 1e-12,
                          continuity_ratio: float = 0.05) -> ValidationReport:
    """Check the standing assumptions on ``a`` and ``b`` at every probe point.

    A continuity check passes at a probe when the sampled modulus at the
    finest level is below ``continuity_ratio`` times the coarsest one (or is
    negligible outright).  Evaluator errors become failed checks.
    """
    if len(sample_spec.times) == 0 or len(sample_spec.points) == 0:
        raise ProblemError("sample_spec must contain at least one probe")
    pts = np.atleast_2d(sample_spec.points)
    d = c.dimension
    failures: list[str] = []
    worst = {k: (0.0, None) for k in ("sym", "psd", "a", "b", "ca", "cb")}
    finite_ok = True

    def upd(key, vals, t):
        i = int(np.argmax(vals))
        if vals[i] > worst[key][0] or worst[key][1] is None:
            worst[key] = (float(vals[i]), (float(t), pts[i].tolist()))

    for t in sample_spec.times:
        A = _probe(c.a, t, pts, "a", failures)
        B = _probe(c.b, t, pts, "b", failures)
        if A is None or B is None:
            finite_ok = False
            break
        A = A.reshape(len(pts), d, d)
        B = B.reshape(len(pts), d)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            finite_ok = False
            bad = ~(np.isfinite(A).all(axis=(1, 2)) & np.isfinite(B).all(axis=1))
            i = int(np.flatnonzero(bad)[0])
            failures.append(f"non-finite coefficient at t={t}, x={pts[i].tolist()}")
            break
        upd("sym", np.abs(A - np.swapaxes(A, 1, 2)).max(axis=(1, 2)), t)
        eig = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))
        upd("psd", -eig.min(axis=1), t)
        upd("a", np.abs(A).max(axis=(1, 2)), t)
        upd("b", np.linalg.norm(B, axis=1), t)

    checks = [CheckResult("finite", finite_ok, 0.0 if finite_ok else np.inf,
                          None, "; ".join(failures))]
    if not finite_ok:
        for name in ("symmetric", "nonneg_definite", "bounded_a", "bounded_b",
                     "continuity_a", "continuity_b"):
            checks.append(CheckResult(name, False, np.inf, None, "skipped: evaluator failure"))
        return ValidationReport(checks)

    checks.append(CheckResult("symmetric", worst["sym"][0] <= sym_tol, *worst["sym"]))
    checks.append(CheckResult("nonneg_definite", worst["psd"][0] <= psd_tol, *worst["psd"],
                              "largest negative eigenvalue magnitude"))
    checks.append(CheckResult("bounded_a", worst["a"][0] <= c.sup_bound_a * (1 + 1e-12) + 1e-15,
                              *worst["a"], f"sup_bound_a={c.sup_bound_a}"))
    checks.append(CheckResult("bounded_b", worst["b"][0] <= c.sup_bound_b * (1 + 1e-12) + 1e-15,
                              *worst["b"], f"sup_bound_b={c.sup_bound_b}"))

    # continuity in x at a subsample of times (time dependence is measurable only)
    times = sample_spec.times
    t_probe = times if not c.time_dependent else times[:: max(1, len(times) // 5)]
    if not c.time_dependent:
        t_probe = times[:1]
    for name, fn in (("continuity_a", c.a), ("continuity_b", c.b)):
        worst_ratio, where = 0.0, None
        for t in t_probe:
            mod = continuity_modulus(fn, t, pts, sample_spec.continuity_levels)
            coarse, fine = mod[0], mod[-1]
            ok = fine <= np.maximum(continuity_ratio * coarse, 1e-9)
            ratio = np.where(coarse > 0, fine / np.where(coarse > 0, coarse, 1.0),
                             np.where(fine > 1e-9, np.inf, 0.0))
            i = int(np.argmax(ratio))
            if where is None or ratio[i] > worst_ratio or not ok.all():
                if where is None or ratio[i] > worst_ratio:
                    worst_ratio, where = float(ratio[i]), (float(t), pts[i].tolist())
        checks.append(CheckResult(name, worst_ratio <= continuity_ratio or worst_ratio == 0.0,
                                  worst_ratio, where,
                                  "fine/coarse sampled modulus ratio"))
    return ValidationReport(checks)


# -- presets ------------------------------------------------------------------

def _const_a(value: float, d: int = 1):
    def a(t, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(value * np.eye(d), (x.shape[0], d, d)).copy()
    return a


def _zero_b(d: int = 1):
    def b(t, x):
        return np.zeros((np.atleast_2d(x).shape[0], d))
    return b


def sqrt_drift(t, x):
    """``min(sqrt(max(x, 0)), 1)``: bounded, continuous, not Lipschitz at 0."""
    x = np.atleast_2d(x)
    return np.minimum(np.sqrt(np.maximum(x, 0.0)), 1.0)


def tanh_drift(t, x):
    return -np.tanh(np.atleast_2d(x))


def _heat_known(s: float, nu: Measure, t: float) -> AnalyticMarginal:
    c = nu.compact()
    return AnalyticMarginal("normal_mixture", means=c.points, weights=c.weights, var=t - s)


def _zero_known(s: float, nu: Measure, t: float) -> AnalyticMarginal:
    return AnalyticMarginal("measure", measure=nu)


def preset(name: str) -> Problem:
    """Catalogue problems; ``sqrt_branch`` is the deliberately non-unique one."""
    T = 1.0
    if name == "heat":
        c = Coefficients(_const_a(1.0), _zero_b(), 1.0, 0.0, 1, T)
        return Problem(c, ((-6.0, 6.0),), "heat", _heat_known,
                       "a = 1, b = 0 (Brownian motion)", {"preset": "heat"})
    if name == "zero":
        c = Coefficients(_const_a(0.0), _zero_b(), 0.0, 0.0, 1, T)
        return Problem(c, ((-2.0, 2.0),), "zero", _zero_known,
                       "a = 0, b = 0 (every curve is constant)", {"preset": "zero"})
    if name == "sqrt_branch":
        c = Coefficients(_const_a(0.0), sqrt_drift, 0.0, 1.0, 1, T)
        return Problem(c, ((-1.0, 2.0),), "sqrt_branch", None,
                       "a = 0, b = min(sqrt(x+), 1): non-unique from delta_0",
                       {"preset": "sqrt_branch"})
    if name == "ou_tanh":
        c = Coefficients(_const_a(1.0), tanh_drift, 1.0, 1.0, 1, T)
        return Problem(c, ((-6.0, 6.0),), "ou_tanh", None,
                       "a = 1, b = -tanh(x) (bounded Lipschitz drift)", {"preset": "ou_tanh"})
    raise ProblemError(f"unknown preset {name!r}; valid names: {', '.join(PRESETS)}")


def custom_problem(a: str, b: str, dimension: int = 1, horizon: float = 1.0,
                   domain=None, probe_n: int = 41) -> Problem:
    """Problem from expression strings (see :mod:`fpkflow.expr`).

    ``a`` may be a scalar expression (isotropic) or a ``d x d`` list;
    ``b`` a scalar (1D only) or a length-``d`` list.  Sup bounds are
    estimated on a probe grid over the domain box and ``[0, T]``.
    """
    d = dimension
    ea, eb = _expr.parse(a, d), _expr.parse(b, d)
    if ea.shape not in ((), (d, d)):
        raise ProblemError(f"a must be a scalar or a {d}x{d} matrix expression")
    if eb.shape not in ((d,),) and not (eb.shape == () and d == 1):
        raise ProblemError(f"b must be a length-{d} vector expression")
    if domain is None:
        domain = tuple((-5.0, 5.0) for _ in range(d))

    def a_fn(t, x):
        x = np.atleast_2d(x)
        v = ea(t, x)
        if ea.shape == ():
            return v[:, None, None] * np.eye(d)[None]
        return v

    def b_fn(t, x):
        x = np.atleast_2d(x)
        v = eb(t, x)
        return v[:, None] if eb.shape == () else v

    time_dep = ea.uses_time or eb.uses_time
    spec = SampleSpec.grid(domain, horizon, probe_n)
    with np.errstate(all="ignore"):
        sa = max(float(np.nanmax(np.abs(a_fn(t, spec.points)))) for t in spec.times[::8])
        sb = max(float(np.nanmax(np.linalg.norm(b_fn(t, spec.points), axis=1)))
                 for t in spec.times[::8])
    coef = Coefficients(a_fn, b_fn, sa, sb, d, horizon, time_dep)
    return Problem(coef, tuple(tuple(map(float, box)) for box in domain), "custom", None,
                   f"a = {a}, b = {b}", {"custom": {"a": a, "b": b}})
