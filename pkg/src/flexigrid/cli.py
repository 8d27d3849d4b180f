"""Command line front-end.

Subcommands
-----------
``sizes``      state-space sizes per (m1, n2)
``run``        blocking probabilities for a sweep of loads, models and solvers
``check``      irreducibility / ergodicity reports
``enclosure``  exact, approximate and bounding values side by side

Output is CSV on stdout or ``--out``.  Every flag can also be given through an
environment variable ``FLEXIGRID_<FLAG>`` (``--max-iters`` becomes
``FLEXIGRID_MAX_ITERS``); flags win over the environment.

Exit codes: 0 success, 2 invalid input, 3 state cap exceeded, 4 a solver did
not converge, 5 internal invariant violated.  Failures are also reported as
one JSON object per line on stderr; rows computed before or after a failure
are still written.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import yaml

from . import analysis, generators, solvers, statespace
from .exceptions import (
    CapacityExceeded,
    FlexigridError,
    InvariantViolation,
    ScenarioError,
    ToleranceNotMet,
)
from .operators import LowerOperator
from .scenario import from_load, validate

log = logging.getLogger("flexigrid")

ENV_PREFIX = "FLEXIGRID_"

EXIT_OK, EXIT_INVALID, EXIT_CAPACITY, EXIT_NONCONVERGED, EXIT_INTERNAL = 0, 2, 3, 4, 5

RUN_COLUMNS = [
    "m1", "n2", "rho", "model", "policy", "solver", "event", "value", "lower",
    "upper", "converged", "iterations", "ci_halfwidth", "elapsed_seconds",
]
SIZE_COLUMNS = ["m1", "n2", "det_count", "red_count"]
CHECK_COLUMNS = [
    "m1", "n2", "rho", "model", "states", "irreducible", "top_class_size",
    "witness_from", "witness_to",
]

MODELS = [
    "exact-RA", "exact-LF", "exact-MF", "approx-RA", "approx-LM",
    "imprecise-RA", "imprecise-LM", "imprecise-PI",
]
SOLVERS = ["iterate", "linear", "simulate"]
EVENTS = ["BP1", "BP2"]


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _choice_list(allowed):
    def parse(text):
        items = [v.strip() for v in str(text).split(",") if v.strip()]
        bad = [v for v in items if v not in allowed]
        if bad:
            raise argparse.ArgumentTypeError(
                f"unknown value(s) {', '.join(bad)}; choose from {', '.join(allowed)}"
            )
        return items
    return parse


def _env(dest, default):
    return os.environ.get(ENV_PREFIX + dest.upper(), default)


def _env_flag(dest):
    raw = os.environ.get(ENV_PREFIX + dest.upper(), "")
    return raw.strip().lower() in {"1", "true", "yes", "on"}


class _Failures:
    def __init__(self):
        self.codes = []

    def record(self, code, exc, **context):
        self.codes.append(code)
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if context:
            payload["context"] = context
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")

    @property
    def exit_code(self):
        return max(self.codes, default=EXIT_OK)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(rows, columns, out):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    text = buf.getvalue()
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# --------------------------------------------------------------------------
# scenarios


def _scenarios(args):
    """List of (scenario, rho) pairs in sweep order."""
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if not isinstance(raw, dict):
            raise ScenarioError(f"{args.scenario}: expected a mapping of parameters")
        sc = validate(raw)
        return [(sc, raw.get("rho"))]
    if args.m1 is None or args.n2 is None:
        raise ScenarioError("give --m1 and --n2 (or --scenario)")
    if not args.rho:
        raise ScenarioError("give --rho (or --scenario)")
    out = []
    for m1, n2 in itertools.product(args.m1, args.n2):
        for rho in args.rho:
            out.append((from_load(m1, n2, rho), rho))
    return out


def _iteration_params(args):
    return solvers.IterationParams(delta=args.delta, phi=args.phi, max_iters=args.max_iters)


def _simulation_params(args):
    return solvers.SimulationParams(
        batch_arrivals=args.batch_arrivals,
        min_batches=args.min_batches,
        max_batches=args.max_batches,
        phi=args.phi,
        seed=args.seed,
    )


def _build(scenario, model, cap):
    kind, _, tag = model.partition("-")
    if kind == "exact":
        count = statespace.detailed_count(scenario.m2, scenario.n2)
        if count > cap:
            raise CapacityExceeded(
                f"{model}: detailed space has {count} states, above --state-cap {cap}",
                count=count, limit=cap,
            )
        return generators.build_exact(scenario, tag), statespace.DETAILED
    if kind == "approx":
        return generators.build_reduced_approx(scenario, tag), statespace.REDUCED
    return LowerOperator(generators.build_extremal_family(scenario, tag)), statespace.REDUCED


def _policy_of(model):
    return model.partition("-")[2]


# --------------------------------------------------------------------------
# run


def _run_one(task):
    """Rows and failures for one scenario; top-level so it can be pickled."""
    scenario, rho, models, solver_names, it_params, sim_params, cap, timing = task
    rows, failures = [], []
    base = {"m1": scenario.m1, "n2": scenario.n2, "rho": rho}
    for model in models:
        try:
            built, space_kind = _build(scenario, model, cap)
        except CapacityExceeded as exc:
            failures.append((EXIT_CAPACITY, exc, {**base, "model": model}))
            continue
        except InvariantViolation as exc:
            failures.append((EXIT_INTERNAL, exc, {**base, "model": model}))
            continue
        space = built.space
        masks = {
            ev: analysis.blocking_event(ev, space_kind, scenario).mask(space) for ev in EVENTS
        }
        imprecise = isinstance(built, LowerOperator)
        for solver in solver_names:
            if imprecise and solver != "iterate":
                log.warning("%s supports only the iterate solver; skipping %s", model, solver)
                continue
            ctx = {**base, "model": model, "solver": solver}
            try:
                t0 = time.perf_counter()
                results = _solve(built, scenario, solver, masks, it_params, sim_params)
                elapsed = time.perf_counter() - t0
            except InvariantViolation as exc:
                failures.append((EXIT_INTERNAL, exc, ctx))
                continue
            except FlexigridError as exc:
                failures.append((EXIT_NONCONVERGED, exc, ctx))
                continue
            for ev in EVENTS:
                row = {**base, "model": model, "policy": _policy_of(model), "solver": solver,
                       "event": ev, "elapsed_seconds": elapsed if timing else None}
                row.update(results[ev])
                rows.append(row)
                if row.get("lower") is not None and not analysis.ordered(
                        row["lower"], row["upper"], it_params.phi):
                    failures.append((EXIT_INTERNAL,
                                     InvariantViolation("lower bound above upper bound"),
                                     {**ctx, "event": ev}))
                if row.get("converged") is False:
                    what = "batch" if solver == "simulate" else "iteration"
                    failures.append((EXIT_NONCONVERGED,
                                     ToleranceNotMet(f"{what} cap reached before tolerance"),
                                     {**ctx, "event": ev}))
    return rows, failures


def _solve(built, scenario, solver, masks, it_params, sim_params):
    out = {}
    if isinstance(built, LowerOperator):
        for ev, mask in masks.items():
            lo = solvers.limit_lower_probability(built, mask, it_params)
            hi = solvers.limit_upper_probability(built, mask, it_params)
            out[ev] = {"lower": lo.value, "upper": hi.value,
                       "converged": lo.converged and hi.converged,
                       "iterations": lo.iterations + hi.iterations}
    elif solver == "iterate":
        for ev, mask in masks.items():
            res = solvers.limit_lower_probability(built, mask, it_params)
            out[ev] = {"value": res.value, "converged": res.converged,
                       "iterations": res.iterations}
    elif solver == "linear":
        pi = solvers.stationary_by_linear_solve(built)
        for ev, mask in masks.items():
            out[ev] = {"value": solvers.event_probability(pi, mask), "converged": True}
    else:
        est = solvers.gillespie_blocking_estimate(built, scenario, masks, sim_params)
        for ev in masks:
            e = est[ev]
            out[ev] = {"value": e.mean, "ci_halfwidth": e.ci_halfwidth,
                       "converged": e.relative_error < sim_params.phi,
                       "iterations": e.batches}
    return out


def _execute(tasks, worker, parallel):
    if parallel and len(tasks) > 1:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(worker, tasks))
    return [worker(t) for t in tasks]


def cmd_run(args, failures):
    tasks = [
        (sc, rho, args.models, args.solvers, _iteration_params(args),
         _simulation_params(args), args.state_cap, not args.no_timing)
        for sc, rho in _scenarios(args)
    ]
    rows = []
    for task_rows, task_failures in _execute(tasks, _run_one, args.parallel):
        rows.extend(task_rows)
        for code, exc, ctx in task_failures:
            failures.record(code, exc, **ctx)
    # for simulation rows, converged means the CI width target was met
    _write_csv(rows, RUN_COLUMNS, args.out)


def cmd_sizes(args, failures):
    rows = []
    for m1, n2 in itertools.product(args.m1, args.n2):
        try:
            sc = from_load(m1, n2, 1.0)
        except ScenarioError as exc:
            failures.record(EXIT_INVALID, exc, m1=m1, n2=n2)
            continue
        rows.append({
            "m1": m1, "n2": n2,
            "det_count": statespace.detailed_count(sc.m2, n2),
            "red_count": statespace.reduced_count(m1, n2),
        })
    _write_csv(rows, SIZE_COLUMNS, args.out)


def _check_one(task):
    scenario, rho, models, cap = task
    rows, failures = [], []
    for model in models:
        base = {"m1": scenario.m1, "n2": scenario.n2, "rho": rho, "model": model}
        try:
            built, _ = _build(scenario, model, cap)
        except CapacityExceeded as exc:
            failures.append((EXIT_CAPACITY, exc, base))
            continue
        if isinstance(built, LowerOperator):
            report = analysis.check_lower_operator_ergodic(built)
        else:
            report = analysis.check_irreducible(built)
        w = report.witness or (None, None)
        rows.append({**base, "states": built.n if hasattr(built, "n") else len(built.space),
                     "irreducible": report.irreducible,
                     "top_class_size": len(report.top_class),
                     "witness_from": w[0], "witness_to": w[1]})
        if not report.irreducible:
            failures.append((EXIT_INTERNAL, InvariantViolation(f"{model} is not irreducible"), base))
    return rows, failures


def cmd_check(args, failures):
    tasks = [(sc, rho, args.models, args.state_cap) for sc, rho in _scenarios(args)]
    rows = []
    for task_rows, task_failures in _execute(tasks, _check_one, args.parallel):
        rows.extend(task_rows)
        for code, exc, ctx in task_failures:
            failures.record(code, exc, **ctx)
    _write_csv(rows, CHECK_COLUMNS, args.out)


def _enclosure_one(task):
    scenario, rho, it_params, cap, timing = task
    base = {"m1": scenario.m1, "n2": scenario.n2, "rho": rho}
    t0 = time.perf_counter()
    try:
        report = analysis.enclosure_report(scenario, params=it_params, check=False,
                                           state_cap=cap)
    except CapacityExceeded as exc:
        return [], [(EXIT_CAPACITY, exc, base)]
    elapsed = time.perf_counter() - t0 if timing else None
    rows, failures = [], []
    for r in report:
        model = "RA" if r.policy == "RA" else "LM"
        common = {**base, "policy": r.policy, "event": r.event, "elapsed_seconds": elapsed}
        rows.append({**common, "model": f"exact-{r.policy}", "solver": "linear",
                     "value": r.exact, "converged": True})
        rows.append({**common, "model": f"approx-{model}", "solver": "linear",
                     "value": r.approximate, "converged": True})
        res = r.results
        rows.append({**common, "model": f"imprecise-{model}", "solver": "iterate",
                     "lower": r.policy_lower, "upper": r.policy_upper,
                     "converged": res["policy_lower"].converged and res["policy_upper"].converged,
                     "iterations": res["policy_lower"].iterations + res["policy_upper"].iterations})
        rows.append({**common, "model": "imprecise-PI", "solver": "iterate",
                     "lower": r.pi_lower, "upper": r.pi_upper,
                     "converged": res["pi_lower"].converged and res["pi_upper"].converged,
                     "iterations": res["pi_lower"].iterations + res["pi_upper"].iterations})
        try:
            analysis.check_enclosure(r, it_params.phi)
        except InvariantViolation as exc:
            failures.append((EXIT_INTERNAL, exc, {**base, "policy": r.policy, "event": r.event}))
        if not r.converged:
            failures.append((EXIT_NONCONVERGED, ToleranceNotMet("iteration cap reached"),
                             {**base, "policy": r.policy, "event": r.event}))
    return rows, failures


def cmd_enclosure(args, failures):
    tasks = [(sc, rho, _iteration_params(args), args.state_cap, not args.no_timing)
             for sc, rho in _scenarios(args)]
    rows = []
    for task_rows, task_failures in _execute(tasks, _enclosure_one, args.parallel):
        rows.extend(task_rows)
        for code, exc, ctx in task_failures:
            failures.record(code, exc, **ctx)
    _write_csv(rows, RUN_COLUMNS, args.out)


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p, *, scenario=True, solver_opts=False, models=None, solvers_=False):
    p.add_argument("--m1", type=_int_list, default=_env("m1", None),
                   help="comma list of channel counts")
    p.add_argument("--n2", type=_int_list, default=_env("n2", None),
                   help="comma list of channels per superchannel")
    p.add_argument("--out", default=_env("out", None), help="output CSV path (default stdout)")
    if not scenario:
        return
    p.add_argument("--rho", type=_float_list, default=_env("rho", None),
                   help="comma list of traffic loads")
    p.add_argument("--scenario", default=_env("scenario", None),
                   help="YAML/JSON file with m1, n2 and either rho or the four rates")
    p.add_argument("--state-cap", type=int, default=_env("state_cap", 10**6),
                   help="largest detailed space an exact model may use")
    p.add_argument("--parallel", action="store_true", default=_env_flag("parallel"),
                   help="run scenarios in worker processes")
    if models is not None:
        p.add_argument("--models", type=_choice_list(MODELS),
                       default=_env("models", ",".join(models)),
                       help=f"comma list from {', '.join(MODELS)}")
    if solvers_:
        p.add_argument("--solvers", type=_choice_list(SOLVERS),
                       default=_env("solvers", "iterate,linear"),
                       help=f"comma list from {', '.join(SOLVERS)}")
    if solver_opts:
        p.add_argument("--delta", type=float, default=_env("delta", None))
        p.add_argument("--phi", type=float, default=_env("phi", solvers.DEFAULT_PHI))
        p.add_argument("--max-iters", type=int, default=_env("max_iters", solvers.DEFAULT_MAX_ITERS))
        p.add_argument("--seed", type=int, default=_env("seed", 0))
        p.add_argument("--batch-arrivals", type=int, default=_env("batch_arrivals", 10**6))
        p.add_argument("--min-batches", type=int, default=_env("min_batches", 5))
        p.add_argument("--max-batches", type=int, default=_env("max_batches", 50))
        p.add_argument("--no-timing", action="store_true", default=_env_flag("no_timing"),
                       help="leave elapsed_seconds empty so output is byte-reproducible")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flexigrid",
        description="Blocking probabilities of a two-service flexi-grid link.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sizes", help="detailed and reduced state counts")
    _add_common(p, scenario=False)
    p.set_defaults(func=cmd_sizes)

    p = sub.add_parser("run", help="blocking probabilities")
    _add_common(p, solver_opts=True, models=["approx-RA", "approx-LM"], solvers_=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="irreducibility and ergodicity")
    _add_common(p, models=MODELS)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("enclosure", help="exact, approximate and bounds side by side")
    _add_common(p, solver_opts=True)
    p.set_defaults(func=cmd_enclosure)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    failures = _Failures()
    try:
        if args.command == "sizes" and (args.m1 is None or args.n2 is None):
            raise ScenarioError("give --m1 and --n2")
        args.func(args, failures)
    except ScenarioError as exc:
        failures.record(EXIT_INVALID, exc)
    except (argparse.ArgumentTypeError, ValueError, OSError, yaml.YAMLError) as exc:
        failures.record(EXIT_INVALID, exc)
    except CapacityExceeded as exc:
        failures.record(EXIT_CAPACITY, exc)
    except InvariantViolation as exc:
        failures.record(EXIT_INTERNAL, exc)
    return failures.exit_code


if __name__ == "__main__":
    sys.exit(main())
