"""Bounded test functions with derivatives, as used for pairings and generators.

Every function maps an ``(n, d)`` array of points to ``(n,)`` values and
exposes ``grad`` ``(n, d)`` and ``hess`` ``(n, d, d)``.  Functions built from
a registered profile carry analytic derivatives; anything else falls back to
central differences with step ``FD_STEP``.

Functions are identified by a string id that can be parsed back
(:func:`from_id`), e.g. ``"tanh[1;0.5]"`` is ``tanh(x + 0.5)`` and
``"-tanh[0.5,0.5;1]"`` is ``-tanh(0.5 x + 0.5 y + 1)`` in 2D.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-5


def _sech2(z):
    return 1.0 / np.cosh(z) ** 2


# profile name -> (g, g', g'', sup|g|, sup|g'|, sup|g''|)
_PROFILES: dict[str, tuple[Callable, Callable, Callable, float, float, float]] = {
    "tanh": (np.tanh,
             _sech2,
             lambda z: -2.0 * np.tanh(z) * _sech2(z),
             1.0, 1.0, 4.0 / (3.0 * np.sqrt(3.0))),
    "sin": (np.sin, np.cos, lambda z: -np.sin(z), 1.0, 1.0, 1.0),
    "cos": (np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z), 1.0, 1.0, 1.0),
    "gauss": (lambda z: np.exp(-0.5 * z * z),
              lambda z: -z * np.exp(-0.5 * z * z),
              lambda z: (z * z - 1.0) * np.exp(-0.5 * z * z),
              1.0, np.exp(-0.5), 1.0),
}


@dataclass(frozen=True)
class TestFunction:
    """Bounded continuous function with sup-norm and derivative bounds.

    ``bound`` bounds ``|f|``, ``lipschitz_bound`` bounds ``|grad f|`` and
    ``second_derivative_bound`` bounds the operator norm of the Hessian.
    """

    __test__ = False  # keep pytest from collecting this class

    id: str
    evaluator: Callable[[np.ndarray], np.ndarray]
    bound: float
    lipschitz_bound: float
    second_derivative_bound: float
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    hessian: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.evaluator(np.atleast_2d(np.asarray(x, dtype=float))), dtype=float)

    @property
    def has_derivatives(self) -> bool:
        return self.gradient is not None and self.hessian is not None

    def grad(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.gradient is not None:
            return self.gradient(x)
        h = FD_STEP
        out = np.empty_like(x)
        for i in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[i] = h
            out[:, i] = (self(x + e) - self(x - e)) / (2 * h)
        return out

    def hess(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.hessian is not None:
            return self.hessian(x)
        h = FD_STEP
        d = x.shape[1]
        out = np.empty((x.shape[0], d, d))
        f0 = self(x)
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            out[:, i, i] = (self(x + ei) - 2 * f0 + self(x - ei)) / h ** 2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = h
                v = (self(x + ei + ej) - self(x + ei - ej) - self(x - ei + ej)
                     + self(x - ei - ej)) / (4 * h * h)
                out[:, i, j] = out[:, j, i] = v
        return out

    def negated(self) -> "TestFunction":
        nid = self.id[1:] if self.id.startswith("-") else "-" + self.id
        g, H = self.gradient, self.hessian
        return TestFunction(
            nid, lambda x: -self.evaluator(x), self.bound, self.lipschitz_bound,
            self.second_derivative_bound,
            None if g is None else (lambda x: -g(x)),
            None if H is None else (lambda x: -H(x)),
        )


def _fmt(v: float) -> str:
    s = repr(float(v) + 0.0)
    return s[:-2] if s.endswith(".0") else s


def ridge(profile: str, direction: Sequence[float], shift: float = 0.0,
          sign: float = 1.0) -> TestFunction:
    """``sign * g(direction . x + shift)`` for a registered profile ``g``."""
    g, dg, d2g, b0, b1, b2 = _PROFILES[profile]
    w = np.asarray(direction, dtype=float)
    wn = float(np.linalg.norm(w))
    sgn = 1.0 if sign >= 0 else -1.0
    fid = ("-" if sgn < 0 else "") + f"{profile}[{','.join(_fmt(v) for v in w)};{_fmt(shift)}]"

    def f(x):
        return sgn * g(x @ w + shift)

    def grad(x):
        return sgn * dg(x @ w + shift)[:, None] * w[None, :]

    def hess(x):
        return sgn * d2g(x @ w + shift)[:, None, None] * np.outer(w, w)[None, :, :]

    return TestFunction(fid, f, b0, b1 * wn, b2 * wn * wn, grad, hess)


_ID_RE = re.compile(r"^(-?)([a-z]+)\[([^;\]]+);([^\]]+)\]$")


def from_id(fid: str) -> TestFunction:
    """Rebuild a ridge test function from its id string."""
    m = _ID_RE.match(fid.strip())
    if m is None or m.group(2) not in _PROFILES:
        raise ValueError(f"unrecognised test function id {fid!r}")
    direction = [float(v) for v in m.group(3).split(",")]
    return ridge(m.group(2), direction, float(m.group(4)), -1.0 if m.group(1) else 1.0)


def standard_test_family(dimension: int = 1) -> list[TestFunction]:
    """Smooth bounded functions used to certify weak-form residuals of curves."""
    if dimension == 1:
        dirs = [[1.0]]
    else:
        dirs = [[1.0, 0.0], [0.0, 1.0], [np.sqrt(0.5), np.sqrt(0.5)]]
    fam = []
    for w in dirs:
        w = np.asarray(w)
        fam += [
            ridge("tanh", w),
            ridge("tanh", 0.5 * w, 1.0),
            ridge("tanh", 0.5 * w, -1.0),
            ridge("sin", w),
            ridge("cos", w),
            ridge("gauss", w),
        ]
    return fam


def from_callable(fid: str, f: Callable, bound: float, lipschitz_bound: float = np.inf,
                  second_derivative_bound: float = np.inf, grad=None, hess=None) -> TestFunction:
    """Wrap an arbitrary vectorized callable; derivatives default to finite differences."""
    return TestFunction(fid, f, bound, lipschitz_bound, second_derivative_bound, grad, hess)
