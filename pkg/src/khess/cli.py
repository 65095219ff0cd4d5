"""Command-line driver: ``khess <command> [--config file.json] [flags] --out DIR``.

Exit status: 0 all checks passed, 1 a property failed, 2 the solver did not
converge, 64 bad usage or config, 74 output could not be written.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from math import comb
from pathlib import Path

import numpy as np

from .errors import DomainError, KHessError, NonConvergenceError
from .estimates import (
    PogorelovConfig, QuantitySpec, ScanProblem, concavity_suite, field_shift_check,
    growth_suite, refinement_scans, shifted_suite, sin_bump_rhs,
)
from .grid import GridDomain, write_field
from .rigidity import EntireCandidate, rigidity_experiment
from .solver import RhsSpec, solve_dirichlet, solve_radial

EXIT_OK, EXIT_FAIL, EXIT_NOCONV, EXIT_USAGE, EXIT_IO = 0, 1, 2, 64, 74

log = logging.getLogger("khess")

COMMANDS = ("solve", "verify-lemmas", "pogorelov", "rigidity", "oracle-radial")

# defaults per command; every key is also a flag (underscores become dashes)
DEFAULTS = {
    "solve": {"n": 2, "k": 2, "f": "1", "resolution": 65, "low": 0.0, "high": 1.0,
              "tol": 1e-10, "max_iter": 80},
    "verify-lemmas": {"n": 3, "k": 2, "l": 1, "samples": 10_000, "deltas": [0.1, 0.01],
                      "growth_samples": 2_000},
    "pogorelov": {"n": 2, "k": 2, "f": "1", "levels": [33, 65, 129, 257],
                  "beta": [1.0, 2.0, 4.0, 8.0], "eps": 0.03, "a": 0.5, "laplacian": True,
                  "interior_margin": 0.1, "tol": 1e-10},
    "rigidity": {"n": 2, "k": 2, "candidate": "perturbed-quadratic", "amp": 0.1, "coef": None,
                 "schedule": [2.0, 4.0, 8.0, 16.0], "resolution": 129, "beta": 1.0,
                 "osc_tol": 1e-6, "max_exponent": -1.5, "tol": 1e-10},
    "oracle-radial": {"n": 3, "k": 2, "f": "1", "R": 1.0, "mesh": 201, "rel_tol": 1e-10},
}

SCHEMAS = {
    "solve": {"columns": {"resolution": "grid nodes per axis", "iteration": "Newton step",
                          "residual": "max-norm residual after the step",
                          "damping": "accepted step length"}},
    "verify-lemmas": {"columns": {"suite": "inequality name", "config": "suite parameters",
                                  "samples": "sample count", "violations": "failing samples",
                                  "min_normalized_gap": "smallest gap / scale"}},
    "pogorelov": {"columns": {"quantity": "quantity tag", "resolution": "grid nodes per axis",
                              "max": "grid maximum", "argmax": "node coordinates of the max",
                              "flag": "1 when the scan stopped early"}},
    "rigidity": {"columns": {"R": "blow-down radius", "sup_lap": "max |trace D^2 v| on the inner region",
                             "osc": "max over entries of the Hessian oscillation on the inner region",
                             "exponent_so_far": "log-log slope of osc using R values so far",
                             "flag": "1 when the trace stopped early"}},
    "oracle-radial": {"columns": {"r": "radius", "u": "radial solution value"}},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_list(text: str) -> list:
    return [float(t) for t in text.split(",") if t]


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="khess", description="k-Hessian solver and estimate harness")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON file with parameter values")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("--seed", type=int, default=S)

    sp = sub.add_parser("solve", help="solve the Dirichlet problem on a box")
    common(sp)
    for name, typ in (("n", int), ("k", int), ("f", str), ("resolution", int), ("low", float),
                      ("high", float), ("tol", float), ("max-iter", int)):
        sp.add_argument(f"--{name}", type=typ, default=S)

    sp = sub.add_parser("verify-lemmas", help="randomized inequality suites")
    common(sp)
    for name, typ in (("n", int), ("k", int), ("l", int), ("samples", int),
                      ("deltas", _float_list), ("growth-samples", int)):
        sp.add_argument(f"--{name}", type=typ, default=S)

    sp = sub.add_parser("pogorelov", help="refinement scans of the interior estimate quantities")
    common(sp)
    for name, typ in (("n", int), ("k", int), ("f", str), ("levels", _int_list),
                      ("beta", _float_list), ("eps", float), ("a", float),
                      ("interior-margin", float), ("tol", float)):
        sp.add_argument(f"--{name}", type=typ, default=S)
    sp.add_argument("--laplacian", action=argparse.BooleanOptionalAction, default=S)

    sp = sub.add_parser("rigidity", help="blow-down experiment for an entire candidate")
    common(sp)
    for name, typ in (("n", int), ("k", int), ("candidate", str), ("amp", float), ("coef", float),
                      ("schedule", _float_list), ("resolution", int), ("beta", float),
                      ("osc-tol", float), ("max-exponent", float), ("tol", float)):
        sp.add_argument(f"--{name}", type=typ, default=S)

    sp = sub.add_parser("oracle-radial", help="radial solution on a ball")
    common(sp)
    for name, typ in (("n", int), ("k", int), ("f", str), ("R", float), ("mesh", int),
                      ("rel-tol", float)):
        sp.add_argument(f"--{name}", type=typ, default=S)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    cfg.update({"seed": 0, "out": "."})
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        if loaded.pop("command", cmd) != cmd:
            raise UsageError("config command does not match the command line")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    cfg.update(flags)
    try:
        validate(cmd, cfg)
    except (TypeError, ValueError, KeyError) as err:
        raise UsageError(f"malformed parameter: {err}") from err
    return cfg


def _need(cond: bool, msg: str):
    if not cond:
        raise UsageError(msg)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def validate(cmd: str, cfg: dict) -> None:
    _need(_is_int(cfg["seed"]) and 0 <= cfg["seed"] < 2**64, "seed must be a 64-bit unsigned integer")
    n, k = cfg["n"], cfg["k"]
    _need(_is_int(n) and _is_int(k), "n and k must be integers")
    if cmd == "verify-lemmas":
        _need(2 <= n <= 8, "n must lie in 2..8 for the inequality suites")
        _need(_is_int(cfg["l"]) and 0 <= cfg["l"] < k <= n, "need 0 <= l < k <= n")
        _need(_is_int(cfg["samples"]) and cfg["samples"] >= 2, "samples must be >= 2")
        _need(all(0 < d < 1 for d in cfg["deltas"]), "deltas must lie in (0, 1)")
    elif cmd == "oracle-radial":
        _need(2 <= n <= 8 and 1 <= k <= n, "need 1 <= k <= n")
        _need(float(cfg["R"]) > 0 and _is_int(cfg["mesh"]) and cfg["mesh"] >= 2,
              "R must be positive and mesh >= 2")
        _need(cfg["rel_tol"] > 0, "rel_tol must be positive")
        parse_rhs(cfg["f"])
    else:
        _need(n in (2, 3), "n must be 2 or 3")
        _need(1 <= k <= n, "need 1 <= k <= n")
        _need(cfg["tol"] > 0, "tolerances must be positive")
    if cmd in ("solve", "pogorelov"):
        parse_rhs(cfg["f"])
    if cmd == "solve":
        _need(_is_int(cfg["resolution"]) and cfg["resolution"] >= 5, "resolution must be >= 5")
        _need(cfg["high"] > cfg["low"], "need high > low")
    if cmd == "pogorelov":
        levels = cfg["levels"]
        _need(len(levels) >= 2 and all(_is_int(r) and r >= 5 for r in levels), "need >= 2 levels")
        _need(list(levels) == sorted(set(levels)), "levels must increase")
        try:
            for b in cfg["beta"]:
                PogorelovConfig(beta=float(b), eps=float(cfg["eps"]), a=float(cfg["a"]))
        except DomainError as err:
            raise UsageError(str(err)) from err
    if cmd == "rigidity":
        _need(cfg["candidate"] in ("quadratic", "perturbed-quadratic"), "unknown candidate kind")
        sched = cfg["schedule"]
        _need(len(sched) >= 1 and all(float(r) > 0 for r in sched)
              and list(sched) == sorted(set(sched)), "schedule must be positive and increasing")
        _need(_is_int(cfg["resolution"]) and cfg["resolution"] % 2 == 1 and cfg["resolution"] >= 9,
              "resolution must be odd and >= 9")


def parse_rhs(text) -> RhsSpec:
    """A positive constant, or ``sin`` / ``sin:A`` for 1 + A sin(pi x) sin(pi y)."""
    s = str(text).strip()
    if s.startswith("sin"):
        amp = 0.5
        if s.startswith("sin:"):
            try:
                amp = float(s[4:])
            except ValueError:
                raise UsageError(f"bad amplitude in f={text!r}") from None
        _need(abs(amp) < 1, "sin amplitude must be below 1 so that f > 0")
        return sin_bump_rhs(amp)
    try:
        value = float(s)
    except ValueError:
        raise UsageError(f"f must be a positive number or sin[:A], got {text!r}") from None
    _need(value > 0, "f must be positive")
    return RhsSpec.constant(value)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("KHESS_THREADS", "1")))
    except ValueError:
        return 1


# -- commands -----------------------------------------------------------------

def cmd_solve(cfg: dict) -> tuple:
    rhs = parse_rhs(cfg["f"])
    dom = GridDomain.box(cfg["n"], cfg["low"], cfg["high"], cfg["resolution"])
    report = {"domain": dom.describe()}
    try:
        u, rep = solve_dirichlet(dom, rhs, cfg["k"], tol=cfg["tol"], max_iter=cfg["max_iter"])
    except NonConvergenceError as err:
        report["solver"] = err.report.to_json() if err.report else None
        report["error"] = str(err)
        return EXIT_NOCONV, report, _solver_rows(cfg, err.report), None
    report["solver"] = rep.to_json()
    report["min_u"] = float(u.values.min())
    report["shift_check"] = field_shift_check(u, cfg["k"], rhs.sup_f).to_json()
    status = EXIT_OK if report["shift_check"]["passed"] else EXIT_FAIL
    return status, report, _solver_rows(cfg, rep), u


def _solver_rows(cfg, rep) -> list:
    if rep is None:
        return []
    rows = []
    for i, res in enumerate(rep.residual_history):
        damp = rep.damping_history[i - 1] if i else ""
        rows.append({"resolution": cfg["resolution"], "iteration": i, "residual": repr(res),
                     "damping": repr(damp) if damp != "" else ""})
    return rows


def cmd_verify(cfg: dict) -> tuple:
    n, k, l = cfg["n"], cfg["k"], cfg["l"]
    jobs = [("concavity", lambda rng: concavity_suite(rng, n, k, l, cfg["samples"],
                                                     tuple(cfg["deltas"])))]
    if 2 <= k < n:
        jobs.append(("shifted", lambda rng: shifted_suite(rng, n, k, cfg["samples"])))
    for mu in range(2, n - 1):
        jobs.append((f"growth-{mu}", lambda rng, mu=mu: growth_suite(rng, n, mu,
                                                                    cfg["growth_samples"])))
    children = np.random.SeedSequence(cfg["seed"]).spawn(len(jobs))
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        futures = [pool.submit(fn, np.random.default_rng(ss)) for (_, fn), ss in zip(jobs, children)]
        results = []
        for fut in futures:
            out = fut.result()
            results.extend(out if isinstance(out, list) else [out])
    suites = [r.to_json() for r in results]
    report = {"suites": suites, "violations": sum(s["violations"] for s in suites)}
    rows = [{"suite": s["name"], "config": json.dumps(s["config"], sort_keys=True),
             "samples": s["samples"], "violations": s["violations"],
             "min_normalized_gap": repr(s["min_normalized_gap"])} for s in suites]
    return (EXIT_OK if report["violations"] == 0 else EXIT_FAIL), report, rows, None


def cmd_pogorelov(cfg: dict) -> tuple:
    rhs = parse_rhs(cfg["f"])
    problem = ScanProblem(cfg["n"], cfg["k"], rhs, label=rhs.label)
    quantities = [QuantitySpec("laplacian")] if cfg["laplacian"] else []
    quantities += [QuantitySpec("pogorelov", PogorelovConfig(beta=float(b), eps=float(cfg["eps"]),
                                                            a=float(cfg["a"])))
                   for b in cfg["beta"]]
    reports = refinement_scans(problem, quantities, cfg["levels"], tol=cfg["tol"],
                               interior_margin=cfg["interior_margin"] or None)
    out = {"reports": [r.to_json() for r in reports]}
    rows = [row for r in reports for row in r.csv_rows()]
    if any(r.flagged for r in reports):
        return EXIT_NOCONV, out, rows, None
    return (EXIT_OK if all(r.verdict for r in reports) else EXIT_FAIL), out, rows, None


def cmd_rigidity(cfg: dict) -> tuple:
    n, k = cfg["n"], cfg["k"]
    params = {"amp": cfg["amp"]} if cfg["candidate"] == "perturbed-quadratic" else {}
    if cfg["coef"] is not None:
        params["coef"] = cfg["coef"]
    elif cfg["candidate"] == "perturbed-quadratic":
        params["coef"] = (1.0 / comb(n, k)) ** (1.0 / k)
    cand = EntireCandidate.from_config({"kind": cfg["candidate"], "params": params}, n, k)
    trace = rigidity_experiment(cand, k, cfg["schedule"], cfg["resolution"], cfg["beta"],
                                tol=cfg["tol"], seed=cfg["seed"])
    report = {"candidate": cand.to_json(), "trace": trace.to_json()}
    rows = list(csv.DictReader(io.StringIO(trace.to_csv())))
    if trace.flagged:
        return EXIT_NOCONV, report, rows, None
    if cand.kind == "quadratic":
        ok = max(trace.osc) <= cfg["osc_tol"]
    else:
        ok = trace.exponent <= cfg["max_exponent"]
    ok = ok and all(trace.inner_ok)
    report["passed"] = bool(ok)
    return (EXIT_OK if ok else EXIT_FAIL), report, rows, None


def cmd_radial(cfg: dict) -> tuple:
    n, k, R = cfg["n"], cfg["k"], float(cfg["R"])
    rhs = parse_rhs(cfg["f"])
    _need(rhs.kind == "constant", "oracle-radial needs a constant f")
    f = rhs.sup_f
    prof = solve_radial(R, n, k, f, cfg["mesh"])
    r, u = prof[:, 0], prof[:, 1]
    basis = 0.5 * (r**2 - R**2)
    fitted = float(basis @ u / (basis @ basis))
    exact = (f / comb(n, k)) ** (1.0 / k)
    rel = abs(fitted - exact) / exact
    report = {"coefficient": fitted, "expected": exact, "relative_error": rel,
              "mesh": cfg["mesh"], "R": R}
    rows = [{"r": repr(float(a)), "u": repr(float(b))} for a, b in zip(r, u)]
    return (EXIT_OK if rel <= cfg["rel_tol"] else EXIT_FAIL), report, rows, None


HANDLERS = {"solve": cmd_solve, "verify-lemmas": cmd_verify, "pogorelov": cmd_pogorelov,
            "rigidity": cmd_rigidity, "oracle-radial": cmd_radial}


# -- output ----------------------------------------------------------------------

def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def emit(cfg: dict, command: str, status: int, report: dict, rows: list, field) -> list:
    """Write ``{command}-{seed}.json``, ``.csv``, ``.schema.json`` and any field dump."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{command}-{cfg['seed']}"
    public = {k: v for k, v in cfg.items() if k != "out"}
    doc = {"command": command, "seed": cfg["seed"], "config": public, "status": status,
           "report": report}
    paths = [out / f"{stem}.json", out / f"{stem}.csv", out / f"{stem}.schema.json"]
    paths[0].write_text(dumps(doc))
    paths[1].write_text(_csv_text(rows, list(SCHEMAS[command]["columns"])))
    paths[2].write_text(dumps({"file": paths[1].name, **SCHEMAS[command]}))
    if field is not None:
        fp = out / f"{stem}.field"
        write_field(fp, field)
        paths.append(fp)
    return paths


def _csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as err:
        print(f"khess: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status, report, rows, field = HANDLERS[args.command](cfg)
    except UsageError as err:
        print(f"khess: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NonConvergenceError as err:
        print(f"khess: {err}", file=sys.stderr)
        return EXIT_NOCONV
    except KHessError as err:
        print(f"khess: {err}", file=sys.stderr)
        return EXIT_FAIL
    try:
        paths = emit(cfg, args.command, status, report, rows, field)
    except OSError as err:
        print(f"khess: cannot write output: {err}", file=sys.stderr)
        return EXIT_IO
    for p in paths:
        print(p)
    return status


if __name__ == "__main__":
    sys.exit(main())
