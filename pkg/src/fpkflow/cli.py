"""Command-line experiment runner: ``fpkflow run <cfg>`` and ``fpkflow replay <trace>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, bundled_config, load_config, schema_text
from .curve import CurveError, SolutionCurve, TimeGrid, load_curve, save_curve
from .family import CandidateParams, CandidateSet, generate_candidates, prepare_initial
from .functions import from_id
from .measure import Measure, wasserstein1
from .particles import marginals, martingale_statistics, simulate_particles, write_summary
from .problem import Problem, SampleSpec, custom_problem, preset, validate_coefficients
from .selection import (Enumeration, MeasureDeterminingFamily, SelectionTrace, assemble_flow,
                        default_family, select)
from .solver import default_grid, solve_forward
from .verify import check_flow_property, wellposedness_probe

logger = logging.getLogger("fpkflow")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage} failed: {msg}")
        self.stage = stage


def _dump(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class Context:
    cfg: RunConfig
    out: Path
    seed: int | None
    problem: Problem | None = None
    params: CandidateParams | None = None
    nu: Measure | None = None
    fam: MeasureDeterminingFamily | None = None
    enum: Enumeration | None = None
    candidates: CandidateSet | None = None
    selected: SolutionCurve | None = None
    report: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    durations: dict = field(default_factory=dict)
    flow_ok: bool = True
    verdict: Any = None


# -- setup ------------------------------------------------------------------------

def build_problem(cfg: RunConfig) -> Problem:
    pr = cfg["problem"]
    if pr["preset"] == "custom":
        return custom_problem(pr["a"], pr["b"], pr["dimension"], pr["horizon"], pr["domain"])
    return preset(pr["preset"])


def build_setup(ctx: Context) -> None:
    cfg = ctx.cfg
    p = build_problem(cfg)
    tg = TimeGrid.from_step(p.T, cfg["time"]["step"])
    Q = tuple(sorted(tg.snap(q) for q in cfg["time"]["checkpoints"]))
    grid = default_grid(p, cfg["solver"]["dx"])
    cand = cfg["candidates"]
    params = CandidateParams(
        tg, Q, cfg["solver"]["dt"], grid, cand["admission_tolerance"],
        cand["branch_times"] or None, cand["ladder_eps"], cand["ladder_shifts"],
        mixture_weights=cand["mixture_weights"], workers=cfg["run"]["workers"])
    ini = cfg["initial"]
    if ini["measure"] == "dirac":
        nu = Measure.dirac(ini["location"])
    elif ini["measure"] == "atoms":
        nu = Measure.atoms([a[0] for a in ini["atoms"]], [a[1] for a in ini["atoms"]])
    else:
        nu = Measure.normal(grid, ini["mean"], ini["var"])
    fam = default_family(p.dimension)
    enum = Enumeration.diagonal(len(fam), Q)
    first = cfg["selection"]["first"].strip()
    if first:
        fid, _, t = first.partition("@")
        enum = enum.with_first((fam.index(fid.strip()), tg.snap(float(t))))
    ctx.problem, ctx.params, ctx.fam, ctx.enum = p, params, fam, enum
    ctx.nu = prepare_initial(p, nu, params)
    ctx.report["setup"] = {"problem": p.preset_id, "description": p.description,
                           "checkpoints": list(Q), "time_step": tg.step,
                           "initial": ctx.nu.key(), "family": fam.ids,
                           "enumeration_head": [list(pq) for pq in enum.pairs[:8]]}


# -- stages ------------------------------------------------------------------------

def stage_validate(ctx: Context) -> bool:
    p = ctx.problem
    rep = validate_coefficients(p.coefficients, SampleSpec.grid(p.domain_box, p.T, 101))
    ctx.report["validation"] = rep.to_dict()
    return rep.passed


def stage_generate(ctx: Context) -> bool:
    cs = generate_candidates(ctx.problem, ctx.cfg["initial"]["s"], ctx.nu,
                             ctx.cfg["candidates"]["strategies"], ctx.params)
    ctx.candidates = cs
    Q = [q for q in ctx.params.checkpoints if q >= cs.s - 1e-12]
    dirs = []
    for i, c in enumerate(cs.curves):
        d = f"candidates/{i:03d}_{c.key()}"
        save_curve(c, ctx.out / d, Q)
        dirs.append(d)
    ctx.report["candidates"] = {
        "s": cs.s, "nu": cs.nu.key(), "admission_tolerance": cs.admission_tolerance,
        "curves": [{"key": c.key(), "label": c.label, "provenance": c.provenance,
                    "residual": c.certificate["residual"],
                    "continuity_constant": c.continuity_constant} for c in cs.curves],
        "exclusions": list(cs.exclusions), "dirs": dirs}
    _write_plot_data(ctx, cs, Q)
    return True


def stage_select(ctx: Context) -> bool:
    cs = ctx.candidates
    curve, trace = select(cs, ctx.fam, ctx.enum, ctx.cfg["selection"]["tie_tol"])
    ctx.selected = curve
    doc = {"trace": trace.to_dict(), "candidate_dirs": ["../" + d for d in
                                                        ctx.report["candidates"]["dirs"]],
           "checkpoints": list(ctx.enum.checkpoints)}
    _dump(doc, ctx.out / "selection" / "trace.json")
    ctx.report["selection"] = {"selected": curve.key(), "label": curve.label,
                               "steps": len(trace.steps),
                               "u": [st.u for st in trace.steps],
                               "survivors": [st.n_survivors for st in trace.steps]}
    return True


def _flow(ctx: Context, enum: Enumeration) -> tuple[dict, bool]:
    cfg = ctx.cfg
    ft = assemble_flow(ctx.problem, [(cfg["initial"]["s"], ctx.nu)], cfg["flow"]["strategies"],
                       ctx.fam, enum, cfg["selection"]["tie_tol"], ctx.params,
                       workers=cfg["run"]["workers"])
    tol = cfg["flow"]["tol"]
    if tol is None:
        tol = 2 * ctx.params.admission_tolerance
    rep = check_flow_property(ft, tol=tol)
    return {"table": ft.to_dict(), "report": rep.to_dict()}, rep.passed


def stage_assemble(ctx: Context) -> bool:
    ctx.report["flow"], ctx.flow_ok = _flow(ctx, ctx.enum)
    return True


def stage_flow(ctx: Context) -> bool:
    if "flow" not in ctx.report:
        stage_assemble(ctx)
    return ctx.flow_ok


def stage_probe(ctx: Context) -> bool:
    v = wellposedness_probe(ctx.problem, ctx.cfg["initial"]["s"], ctx.nu, ctx.fam, ctx.enum,
                            ctx.cfg["probe"]["strategies"], ctx.params,
                            ctx.cfg["selection"]["tie_tol"])
    ctx.report["probe"] = v.to_dict()
    ctx.verdict = v
    ok = True
    if not v.well_posed:
        adv, ok = _flow(ctx, v.adversarial_enum)
        ctx.report["adversarial_flow"] = adv
    return ok


def stage_particles(ctx: Context) -> bool:
    cfg, p = ctx.cfg, ctx.problem
    pc = cfg["particles"]
    seed = ctx.seed if ctx.seed is not None else pc["seed"]
    s = cfg["initial"]["s"]
    nu = ctx.nu
    e = simulate_particles(p, s, nu, pc["n"], pc["dt"], seed, workers=cfg["run"]["workers"])
    Q = [q for q in ctx.params.checkpoints if q >= s - 1e-12]
    m = marginals(e, Q)
    ref = solve_forward(p, s, nu, ctx.params.dt, ctx.params.grid, ctx.params.time_grid)
    gaps = [wasserstein1(m.at(q), ref.at(q)) for q in Q]
    phis = [from_id(fid) for fid in pc["phi"]]
    pairs = [(s, q) for q in Q if q > s]
    mart = martingale_statistics(e, phis, pairs, pc["windows"])
    write_summary(e, Q, ctx.out / "particles" / "summary.json",
                  {"martingale": mart.to_dict(), "w1_to_solver": gaps})
    ok = max(gaps) <= pc["w1_tol"] and mart.passed
    ctx.report["particles"] = {"seed": seed, "N": e.N, "dt": e.dt, "w1_to_solver": gaps,
                               "w1_tol": pc["w1_tol"], "martingale": mart.to_dict(),
                               "passed": ok}
    return ok


STAGE_FUNCS: dict[str, Callable[[Context], bool]] = {
    "validate": stage_validate, "generate": stage_generate, "select": stage_select,
    "assemble": stage_assemble, "flow": stage_flow, "probe": stage_probe,
    "particles": stage_particles,
}
_NEEDS = {"select": ("generate",)}


def _write_plot_data(ctx: Context, cs: CandidateSet, Q) -> None:
    plots = ctx.out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    with open(plots / "moments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "t", "mean", "second_moment"])
        for c in cs.curves:
            for k in range(0, c.n_times, max(1, c.n_times // 200)):
                m = c.marginal(k)
                w.writerow([c.label, repr(float(c.times[k])), repr(float(m.mean()[0])),
                            repr(m.moment(2))])
    atomic = [c for c in cs.curves if c.kind == "atoms" and c.points.shape[1] <= 8]
    if atomic:
        with open(plots / "atoms.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["curve", "t", "atom", "x", "weight"])
            for c in atomic:
                for k in range(0, c.n_times, max(1, c.n_times // 200)):
                    for j in range(c.points.shape[1]):
                        w.writerow([c.label, repr(float(c.times[k])), j,
                                    repr(float(c.points[k, j, 0])), repr(float(c.weights[k, j]))])
    with open(plots / "w1_gaps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_a", "curve_b", "t", "w1"])
        for i, a in enumerate(cs.curves):
            for b in cs.curves[i + 1:]:
                for q in Q:
                    w.writerow([a.label, b.label, repr(float(q)),
                                repr(wasserstein1(a.at(q), b.at(q)))])


def run(cfg: RunConfig, out: Path, seed: int | None = None,
        expect_wellposed: bool = False) -> int:
    """Execute the configured stages; returns the process exit code."""
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, seed)
    started = datetime.now(timezone.utc).isoformat()
    ctx.report["config"] = cfg.to_dict()
    stages = list(cfg["run"]["stages"])
    for st, needs in _NEEDS.items():
        if st in stages:
            for n in needs:
                if n not in stages:
                    stages.insert(stages.index(st), n)
    status: dict[str, str] = {}
    code = 0
    try:
        t0 = time.perf_counter()
        build_setup(ctx)
        ctx.durations["setup"] = time.perf_counter() - t0
    except Exception as exc:  # setup errors are configuration problems
        print(f"error: setup failed: {exc}", file=sys.stderr)
        return 2
    for st in stages:
        t0 = time.perf_counter()
        try:
            ok = STAGE_FUNCS[st](ctx)
        except Exception as exc:
            logger.debug("stage %s raised", st, exc_info=True)
            status[st] = "error"
            ctx.report.setdefault("errors", {})[st] = f"{type(exc).__name__}: {exc}"
            print(f"error: stage {st} failed: {exc}", file=sys.stderr)
            code = 1
            break
        finally:
            ctx.durations[st] = time.perf_counter() - t0
        status[st] = "pass" if ok else "fail"
        if not ok:
            print(f"stage {st}: checks failed", file=sys.stderr)
            code = 1
    ctx.report["status"] = status
    verdict = ctx.report.get("probe", {}).get("status")
    if expect_wellposed and verdict == "NotWellPosed":
        print("probe verdict NotWellPosed while --expect-wellposed was given", file=sys.stderr)
        code = 1
    ctx.report["all_pass"] = code == 0
    _dump(ctx.report, out / "report.json")
    _dump({"started": started, "finished": datetime.now(timezone.utc).isoformat(),
           "durations_s": ctx.durations, "argv": sys.argv, "version": __version__,
           "python": platform.python_version(), "numpy": np.__version__,
           "config_source": cfg.source}, out / "metadata.json")
    summary = ", ".join(f"{k}={v}" for k, v in status.items())
    print(f"{summary}; verdict={verdict}; exit {code}")
    return code


# -- replay ---------------------------------------------------------------------------

def replay(trace_path: Path) -> int:
    """Re-run a stored selection and compare every step; returns the exit code."""
    try:
        doc = json.loads(Path(trace_path).read_text())
        trace = SelectionTrace.from_dict(doc["trace"])
        base = Path(trace_path).parent
        curves = tuple(load_curve(base / d) for d in doc["candidate_dirs"])
    except (OSError, KeyError, ValueError, CurveError) as exc:
        print(f"error: cannot load trace or candidates: {exc}", file=sys.stderr)
        return 2
    fam = MeasureDeterminingFamily(tuple(from_id(f) for f in trace.family))
    Q = doc["checkpoints"]
    enum = Enumeration.from_list(trace.enumeration, len(fam), Q)
    nu = curves[0].initial
    cs = CandidateSet(trace.s, nu, curves, max(c.certificate["tolerance"] for c in curves))
    _, fresh = select(cs, fam, enum, trace.tie_tol)
    diffs = []
    for k in range(max(len(trace.steps), len(fresh.steps))):
        a = trace.steps[k] if k < len(trace.steps) else None
        b = fresh.steps[k] if k < len(fresh.steps) else None
        if a is None or b is None:
            diffs.append({"k": k, "stored": a and a.to_dict(), "replayed": b and b.to_dict()})
            continue
        if a.u != b.u or a.survivors != b.survivors or (a.function_index, a.q) != (
                b.function_index, b.q):
            diffs.append({"k": k, "stored": a.to_dict(), "replayed": b.to_dict()})
    if fresh.selected != trace.selected:
        diffs.append({"selected": {"stored": trace.selected, "replayed": fresh.selected}})
    if diffs:
        print(json.dumps({"identical": False, "diff": diffs}, indent=1, sort_keys=True))
        return 1
    print(json.dumps({"identical": True, "steps": len(fresh.steps),
                      "selected": fresh.selected}, sort_keys=True))
    return 0


# -- entry point ------------------------------------------------------------------------

def _resolve_config(arg: str) -> Path:
    path = Path(arg)
    if not path.exists() and bundled_config(arg).exists():
        return bundled_config(arg)
    return path


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpkflow",
                                 description="Flows of FPK solutions by iterated maximal selection")
    ap.add_argument("--print-schema", action="store_true",
                    help="print every config key with its default and exit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run the pipeline of a config file (or bundled config name)")
    r.add_argument("config")
    r.add_argument("--out", type=Path, default=None, help="artifact directory")
    r.add_argument("--seed", type=int, default=None, help="particle seed (unsigned 64-bit)")
    r.add_argument("--expect-wellposed", action="store_true",
                   help="exit 1 when the probe reports NotWellPosed")
    p = sub.add_parser("replay", help="replay a stored selection trace")
    p.add_argument("trace", type=Path)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_schema:
        print(schema_text())
        return 0
    if args.command == "run":
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return 2
        path = _resolve_config(args.config)
        try:
            cfg = load_config(path)
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
        except ConfigError as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            return 2
        out = args.out or Path("fpkflow-out") / path.stem
        return run(cfg, out, args.seed, args.expect_wellposed)
    if args.command == "replay":
        return replay(args.trace)
    ap.print_help()
    return 2


if __name__ == "__main__":
    sys.exit(main())
