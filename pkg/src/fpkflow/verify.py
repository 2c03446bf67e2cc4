"""Flow-property checks and the two-enumeration well-posedness probe."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .curve import SolutionCurve
from .family import CandidateParams, generate_candidates, prepare_initial
from .measure import Measure, integrate, wasserstein1
from .problem import Problem
from .selection import (Enumeration, FlowTable, MeasureDeterminingFamily, SelectionError,
                        default_tie_tol, select)
from .solver import ADMISSION_TOL

logger = logging.getLogger(__name__)

WELL_POSED = "WellPosedAtScale"
NOT_WELL_POSED = "NotWellPosed"


@dataclass
class FlowCheck:
    s: float
    nu: str
    r: float
    t: float
    distance: float
    passed: bool

    def to_dict(self) -> dict:
        return {"s": self.s, "nu": self.nu, "r": self.r, "t": self.t,
                "w1": self.distance, "passed": self.passed}


@dataclass
class FlowReport:
    tol: float
    checks: list[FlowCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> FlowCheck | None:
        return max(self.checks, key=lambda c: c.distance, default=None)

    def to_dict(self) -> dict:
        w = self.worst
        return {"tol": self.tol, "passed": self.passed, "n_checks": len(self.checks),
                "worst": None if w is None else w.to_dict(),
                "checks": [c.to_dict() for c in self.checks]}


def grid_triples(checkpoints: Sequence[float]) -> list[tuple[float, float, float]]:
    Q = sorted(checkpoints)
    return [(s, r, t) for i, s in enumerate(Q) for j, r in enumerate(Q[i:], i)
            for t in Q[j:]]


def check_flow_property(ft: FlowTable, triples: Sequence[tuple[float, float, float]] | None = None,
                        tol: float = 2 * ADMISSION_TOL) -> FlowReport:
    """``W1(mu^{s,nu}_t, mu^{r, mu^{s,nu}_r}_t)`` for every entry starting at ``s``.

    Raises :class:`~fpkflow.selection.MissingEntryError` naming ``(r, mu_r)``
    if the table is not closed.
    """
    triples = grid_triples(ft.checkpoints) if triples is None else list(triples)
    report = FlowReport(tol)
    entries = ft.sorted_entries()
    for s, r, t in triples:
        if not s <= r <= t:
            raise ValueError(f"triple ({s}, {r}, {t}) is not ordered")
        for e in entries:
            if abs(e.s - s) > 1e-12:
                continue
            mu_r = e.curve.at(r)
            restart = ft.get(r, mu_r)
            d = wasserstein1(e.curve.at(t), restart.at(t))
            report.checks.append(FlowCheck(s, e.nu.key(), r, t, d, d <= tol))
    return report


@dataclass
class Verdict:
    status: str
    s: float
    nu: str
    n_candidates: int
    selected: SolutionCurve
    tie_tol: float
    adversarial: SolutionCurve | None = None
    witness_function: str | None = None
    witness_function_index: int | None = None
    witness_time: float | None = None
    witness_curve: str | None = None
    integral_gap: float = 0.0
    w1_gap: float = 0.0
    adversarial_enum: Enumeration | None = None
    max_candidate_spread: float = 0.0

    @property
    def well_posed(self) -> bool:
        return self.status == WELL_POSED

    def to_dict(self) -> dict:
        return {
            "status": self.status, "s": self.s, "nu": self.nu,
            "n_candidates": self.n_candidates, "tie_tol": self.tie_tol,
            "selected": {"key": self.selected.key(), "label": self.selected.label},
            "adversarial": None if self.adversarial is None else
            {"key": self.adversarial.key(), "label": self.adversarial.label},
            "witness": None if self.witness_function is None else {
                "function": self.witness_function, "function_index": self.witness_function_index,
                "time": self.witness_time, "curve": self.witness_curve,
                "integral_gap": self.integral_gap},
            "w1_gap": self.w1_gap,
            "adversarial_first_pair": None if self.adversarial_enum is None
            else list(self.adversarial_enum.pairs[0]),
            "max_candidate_spread": self.max_candidate_spread,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def wellposedness_probe(p: Problem, s_bar: float, nu_bar: Measure, fam: MeasureDeterminingFamily,
                        base_enum: Enumeration, gen_strategy, params: CandidateParams,
                        tie_tol: float | None = None) -> Verdict:
    """Search for two admitted solutions from ``(s_bar, nu_bar)`` that a second enumeration
    tells apart.

    The witness is the triple (candidate, family member, checkpoint) with the
    largest integral excess over the base selection; ties go to the lower
    function index, then the earlier checkpoint, then the smaller curve key.
    """
    if not fam.closed_under_negation:
        raise SelectionError("the probe needs a family closed under negation")
    cs = generate_candidates(p, s_bar, prepare_initial(p, nu_bar, params), gen_strategy, params)
    tie_tol = default_tie_tol(cs) if tie_tol is None else tie_tol
    mu, _ = select(cs, fam, base_enum, tie_tol)
    Q = [q for q in base_enum.checkpoints if q >= cs.s - 1e-12]
    spread = 0.0
    for a in cs.curves:
        for b in cs.curves:
            if a.key() < b.key():
                spread = max(spread, max(wasserstein1(a.at(q), b.at(q)) for q in Q))
    # near-duplicates dropped by the distinctness filter still count as evidence
    for ex in cs.exclusions:
        if ex.get("reason") == "duplicate":
            spread = max(spread, ex["max_w1"])
    best = None
    for j, q in enumerate(Q):
        mu_q = mu.at(q)
        for i, f in enumerate(fam.functions):
            ref = integrate(mu_q, f)
            for g in cs.curves:
                gap = integrate(g.at(q), f) - ref
                if gap <= tie_tol:
                    continue
                rank = (-gap, i, j, g.key())
                if best is None or rank < best[0]:
                    best = (rank, i, q, g)
    if best is None:
        return Verdict(WELL_POSED, cs.s, cs.nu.key(), len(cs), mu, tie_tol,
                       max_candidate_spread=spread)
    (neg_gap, i, _, _), _, q, g = best
    adv = base_enum.with_first((i, q))
    beta, _ = select(cs, fam, adv, tie_tol)
    w1 = wasserstein1(mu.at(q), beta.at(q))
    return Verdict(NOT_WELL_POSED, cs.s, cs.nu.key(), len(cs), mu, tie_tol, beta,
                   fam[i].id, i, q, g.label, -neg_gap, w1, adv, spread)
