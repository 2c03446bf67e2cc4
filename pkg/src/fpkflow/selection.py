"""Iterated maximal selection over finite candidate sets, and flow assembly.

Given an ordered family ``f_0, f_1, ...`` and a bijective enumeration of
(function index, checkpoint) pairs, :func:`select` repeatedly keeps the
candidates maximizing ``int f_{n_k} d mu_{q_k}`` (up to ``tie_tol``).
Restricting an enumeration to checkpoints ``>= s`` deletes pairs but keeps
their order, so starts at later times see a subsequence.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .curve import SolutionCurve
from .family import CandidateParams, CandidateSet, generate_candidates, prepare_initial
from .functions import TestFunction, ridge
from .measure import Measure, integrate, wasserstein1
from .problem import Problem

logger = logging.getLogger(__name__)

TIE_TOL_ATOMS = 1e-9
TIE_TOL_GRID = 1e-6
DEFAULT_OMEGAS = (0.5, 1.0, 2.0, 4.0)
DEFAULT_PHASES = (0.0, 1.0, -1.0)


class SelectionError(RuntimeError):
    pass


class MissingEntryError(KeyError):
    pass


def _tkey(t: float) -> float:
    return round(float(t), 12)


# -- family and enumeration ------------------------------------------------------

@dataclass(frozen=True)
class MeasureDeterminingFamily:
    functions: tuple[TestFunction, ...]
    closed_under_negation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        ids = [f.id for f in self.functions]
        if len(set(ids)) != len(ids):
            raise SelectionError("family members must have distinct ids")
        if self.closed_under_negation:
            missing = [i for i in ids if _negated_id(i) not in ids]
            if missing:
                raise SelectionError(f"family not closed under negation: {missing[0]} lacks -f")

    def __len__(self) -> int:
        return len(self.functions)

    def __getitem__(self, i: int) -> TestFunction:
        return self.functions[i]

    @property
    def ids(self) -> list[str]:
        return [f.id for f in self.functions]

    def index(self, fid: str) -> int:
        return self.ids.index(fid)

    def separates(self, corpus: Sequence[Measure], margin: float = 1e-9
                  ) -> list[tuple[int, int]]:
        """Pairs of corpus indices that no member separates by more than ``margin``."""
        vals = np.array([[integrate(m, f) for f in self.functions] for m in corpus])
        bad = []
        for i in range(len(corpus)):
            for j in range(i + 1, len(corpus)):
                if wasserstein1(corpus[i], corpus[j]) > 0 and \
                        np.max(np.abs(vals[i] - vals[j])) <= margin:
                    bad.append((i, j))
        return bad


def _negated_id(fid: str) -> str:
    return fid[1:] if fid.startswith("-") else "-" + fid


def default_family(dimension: int = 1) -> MeasureDeterminingFamily:
    """``tanh(w.x + phi)`` for ``|w|`` in {1/2, 1, 2, 4}, ``phi`` in {0, 1, -1}, each
    followed by its negation.  In 2D the ridges point along both axes and the diagonal."""
    if dimension == 1:
        dirs = [np.array([1.0])]
    else:
        dirs = [np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                np.array([math.sqrt(0.5), math.sqrt(0.5)])]
    fs = []
    for w in dirs:
        for om in DEFAULT_OMEGAS:
            for ph in DEFAULT_PHASES:
                f = ridge("tanh", om * w, ph)
                fs += [f, f.negated()]
    return MeasureDeterminingFamily(tuple(fs), closed_under_negation=True)


@dataclass(frozen=True)
class Enumeration:
    """Bijective ordering of ``{0..N-1} x Q`` as a tuple of ``(function_index, q)``."""

    pairs: tuple[tuple[int, float], ...]
    n_functions: int
    checkpoints: tuple[float, ...]

    def __post_init__(self):
        pairs = tuple((int(i), float(q)) for i, q in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "checkpoints", tuple(sorted(float(q) for q in self.checkpoints)))
        want = {(i, _tkey(q)) for i in range(self.n_functions) for q in self.checkpoints}
        got = [(i, _tkey(q)) for i, q in pairs]
        if len(got) != len(set(got)) or set(got) != want:
            raise SelectionError("enumeration is not a bijection onto functions x checkpoints")

    @classmethod
    def diagonal(cls, n_functions: int, checkpoints: Sequence[float]) -> "Enumeration":
        """Order by (time index + function index, time index)."""
        Q = sorted(float(q) for q in checkpoints)
        idx = [(i, j) for i in range(n_functions) for j in range(len(Q))]
        idx.sort(key=lambda ij: (ij[0] + ij[1], ij[1]))
        return cls(tuple((i, Q[j]) for i, j in idx), n_functions, tuple(Q))

    def restricted(self, s: float) -> list[tuple[int, float]]:
        """Pairs with checkpoint ``>= s`` in the original order."""
        return [(i, q) for i, q in self.pairs if q >= s - 1e-12]

    def with_first(self, pair: tuple[int, float]) -> "Enumeration":
        """Same enumeration with ``pair`` moved to the front."""
        i0, q0 = int(pair[0]), _tkey(pair[1])
        rest = [pq for pq in self.pairs if not (pq[0] == i0 and _tkey(pq[1]) == q0)]
        if len(rest) != len(self.pairs) - 1:
            raise SelectionError(f"pair {pair} is not part of the enumeration")
        first = next(pq for pq in self.pairs if pq[0] == i0 and _tkey(pq[1]) == q0)
        return Enumeration((first,) + tuple(rest), self.n_functions, self.checkpoints)

    def to_list(self) -> list[list]:
        return [[i, q] for i, q in self.pairs]

    @classmethod
    def from_list(cls, pairs, n_functions: int, checkpoints) -> "Enumeration":
        return cls(tuple((int(i), float(q)) for i, q in pairs), n_functions, tuple(checkpoints))


def project_times(curve: SolutionCurve, q_grid: Iterable[float]) -> list[Measure]:
    """Marginals of ``curve`` at exactly the given checkpoint times."""
    return [curve.at(q) for q in q_grid]


# -- selection ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceStep:
    k: int
    function_index: int
    function_id: str
    q: float
    u: float
    survivors: tuple[str, ...]

    @property
    def n_survivors(self) -> int:
        return len(self.survivors)

    def to_dict(self) -> dict:
        return {"k": self.k, "pair": [self.function_index, self.q],
                "function": self.function_id, "u": self.u,
                "n_survivors": self.n_survivors, "survivors": list(self.survivors)}


@dataclass(frozen=True)
class SelectionTrace:
    s: float
    nu_key: str
    tie_tol: float
    candidates: tuple[str, ...]
    steps: tuple[TraceStep, ...]
    selected: str
    family: tuple[str, ...] = ()
    enumeration: tuple[tuple[int, float], ...] = ()

    def to_dict(self) -> dict:
        return {"s": self.s, "nu": self.nu_key, "tie_tol": self.tie_tol,
                "candidates": list(self.candidates), "selected": self.selected,
                "family": list(self.family),
                "enumeration": [[i, q] for i, q in self.enumeration],
                "steps": [st.to_dict() for st in self.steps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        steps = tuple(TraceStep(st["k"], int(st["pair"][0]), st["function"], float(st["pair"][1]),
                                float(st["u"]), tuple(st["survivors"])) for st in d["steps"])
        return cls(float(d["s"]), d["nu"], float(d["tie_tol"]), tuple(d["candidates"]), steps,
                   d["selected"], tuple(d.get("family", ())),
                   tuple((int(i), float(q)) for i, q in d.get("enumeration", ())))


def default_tie_tol(cs: CandidateSet) -> float:
    return TIE_TOL_ATOMS if all(c.kind == "atoms" for c in cs.curves) else TIE_TOL_GRID


def select(cs: CandidateSet, fam: MeasureDeterminingFamily, enum: Enumeration,
           tie_tol: float | None = None) -> tuple[SolutionCurve, SelectionTrace]:
    """Iteratively maximal element of ``cs`` for the enumeration restricted to ``>= s``.

    Raises
    ------
    SelectionError
        If several candidates survive every pair but differ by more than
        ``tie_tol`` in W1 at some checkpoint ("family not separating at this
        tolerance").
    """
    if enum.n_functions != len(fam):
        raise SelectionError("enumeration and family sizes differ")
    tie_tol = default_tie_tol(cs) if tie_tol is None else tie_tol
    pairs = enum.restricted(cs.s)
    if not pairs:
        raise SelectionError(f"no checkpoint at or after s={cs.s}")
    survivors = list(cs.curves)
    steps = []
    for k, (i, q) in enumerate(pairs):
        f = fam[i]
        G = [integrate(c.at(q), f) for c in survivors]
        u = max(G)
        survivors = [c for c, g in zip(survivors, G) if g >= u - tie_tol]
        steps.append(TraceStep(k, i, f.id, q, u, tuple(c.key() for c in survivors)))
        if len(survivors) == 1:
            break
    if len(survivors) > 1:
        qs = [q for q in enum.checkpoints if q >= cs.s - 1e-12]
        for a in range(len(survivors)):
            for b in range(a + 1, len(survivors)):
                for q in qs:
                    d = wasserstein1(survivors[a].at(q), survivors[b].at(q))
                    if d > tie_tol:
                        raise SelectionError(
                            f"family not separating at this tolerance: {survivors[a].label} and "
                            f"{survivors[b].label} differ by W1 {d:.3g} at t={q}")
    chosen = min(survivors, key=lambda c: c.key())
    trace = SelectionTrace(cs.s, cs.nu.key(), tie_tol, tuple(c.key() for c in cs.curves),
                           tuple(steps), chosen.key(), tuple(fam.ids), enum.pairs)
    return chosen, trace


def lexicographic_oracle(cs: CandidateSet, fam: MeasureDeterminingFamily,
                         enum: Enumeration) -> SolutionCurve:
    """Exhaustive lexicographic maximum of ``(G_0(mu), G_1(mu), ...)`` (exact ties)."""
    pairs = enum.restricted(cs.s)
    vecs = {c.key(): tuple(integrate(c.at(q), fam[i]) for i, q in pairs) for c in cs.curves}
    best = max(vecs.values())
    return min((c for c in cs.curves if vecs[c.key()] == best), key=lambda c: c.key())


# -- flows ------------------------------------------------------------------------

@dataclass
class FlowEntry:
    s: float
    nu: Measure
    curve: SolutionCurve
    trace: SelectionTrace
    candidates: CandidateSet


@dataclass
class FlowTable:
    """Selected curves keyed by ``(s, canonical key of nu)``."""

    checkpoints: tuple[float, ...]
    entries: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    @staticmethod
    def key_for(s: float, nu: Measure) -> tuple[float, str]:
        return (_tkey(s), nu.key())

    def entry(self, s: float, nu: Measure) -> FlowEntry:
        k = self.key_for(s, nu)
        if k not in self.entries:
            raise MissingEntryError(f"no flow entry for (r={s}, nu={k[1]})")
        return self.entries[k]

    def get(self, s: float, nu: Measure) -> SolutionCurve:
        return self.entry(s, nu).curve

    def sorted_entries(self) -> list[FlowEntry]:
        return [self.entries[k] for k in sorted(self.entries)]

    def to_dict(self) -> dict:
        return {"checkpoints": list(self.checkpoints),
                "entries": [{"s": e.s, "nu": e.nu.key(), "curve": e.curve.key(),
                             "label": e.curve.label, "n_candidates": len(e.candidates),
                             "trace": e.trace.to_dict()} for e in self.sorted_entries()]}


class FlowAssemblyError(RuntimeError):
    pass


def assemble_flow(p: Problem, starts: Sequence[tuple[float, Measure]], gen_strategy,
                  fam: MeasureDeterminingFamily, enum: Enumeration, tie_tol: float | None,
                  params: CandidateParams, workers: int = 1) -> FlowTable:
    """Select from every start, then close the table under restarts at later checkpoints."""
    Q = sorted(enum.checkpoints)
    table = FlowTable(tuple(Q))
    for s, _ in starts:
        if not any(abs(s - q) <= 1e-12 for q in Q):
            raise FlowAssemblyError(f"start time {s} is not a checkpoint")
    pending = deque((float(s), prepare_initial(p, nu, params)) for s, nu in starts)

    def run(item):
        s, nu = item
        try:
            cs = generate_candidates(p, s, nu, gen_strategy, params)
            curve, trace = select(cs, fam, enum, tie_tol)
        except Exception as exc:
            raise FlowAssemblyError(f"at (s={s}, nu={nu.key()}): {exc}") from exc
        return FlowEntry(s, cs.nu, curve, trace, cs)

    while pending:
        level = []
        seen = set()
        while pending:
            s, nu = pending.popleft()
            k = table.key_for(s, nu)
            if k in table.entries or k in seen:
                continue
            seen.add(k)
            level.append((s, nu))
        if not level:
            break
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                results = list(ex.map(run, level))
        else:
            results = [run(item) for item in level]
        for (s, nu), e in zip(level, results):
            table.entries[table.key_for(s, nu)] = e
            for r in Q:
                if r > s + 1e-12:
                    pending.append((r, e.curve.at(r)))
    return table
