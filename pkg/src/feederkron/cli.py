"""Command line: ``feederkron {generate,reduce,validate,info}``.

Exit status is 0 on success, 2 for invalid input and 3 when a solve fails.
The default worker count comes from ``FEEDERKRON_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from feederkron import __version__
from feederkron.errors import FeederKronError, SolverError
from feederkron.generate import GenParams, generate
from feederkron.grid import PHASES, assemble_admittance, load_network, save_network, validate
from feederkron.kron import reduced_topology
from feederkron.model import (ReducedModel, load_model, save_model, validate_model,
                              write_validation_report)
from feederkron.radial import is_tree, radialize
from feederkron.reduce import ReductionConfig, TraceRow, count_explored, run_reduction
from feederkron.scenario import load_library, write_library_csv

WORKERS_ENV = "FEEDERKRON_WORKERS"
EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3
OBJECTIVE_FLAGS = {"mag": "magnitude", "magnitude": "magnitude", "complex": "complex"}

log = logging.getLogger("feederkron")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise CliError(EXIT_INVALID, "ValidationError", f"{WORKERS_ENV}={raw!r} is not an integer")
    if value < 1:
        raise CliError(EXIT_INVALID, "ValidationError", f"{WORKERS_ENV} must be >= 1")
    return value


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_checked_network(path: Path):
    net = load_network(path)
    report = validate(net)
    if not report.ok:
        raise CliError(EXIT_INVALID, "ValidationError", f"{path}: {report}")
    return net


def write_trace(path: Path, trace: list[TraceRow], scenario_ids: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "s", "r", "smice", *[f"max_err_{sid}" for sid in scenario_ids],
                    "supernode_count", "candidate_count", "feasible_count", "wall_time_ms"])
        for row in trace:
            w.writerow([row.iteration, row.s, row.r, repr(float(row.smice)),
                        *[repr(float(e)) for e in row.max_err],
                        row.supernode_count, row.candidate_count, row.feasible_count,
                        f"{row.wall_time_ms:.3f}"])


def read_trace_pairs(path: Path) -> list[tuple[int, int]]:
    try:
        with open(path, newline="") as fh:
            return [(int(row["s"]), int(row["r"])) for row in csv.DictReader(fh)]
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INVALID, "ValidationError", f"{path}: not a reduction trace ({exc})")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    params = GenParams(
        n=args.n, seed=args.seed, branch_prob=args.branch_prob,
        frac_two_phase=args.frac_two_phase, frac_one_phase=args.frac_one_phase,
        n_scenarios=args.scenarios, spread=args.spread,
        target_drop=None if args.target_drop <= 0 else args.target_drop,
    )
    net, lib = generate(params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_network(net, out / "net.json")
    write_library_csv(out / "scenarios.csv", lib, mode="pq")
    print(f"wrote {out / 'net.json'} ({net.n} nodes) and {out / 'scenarios.csv'} "
          f"({len(lib)} scenarios)")
    return EXIT_OK


def cmd_reduce(args) -> int:
    t_start = time.perf_counter()
    net_path, sc_path, out = Path(args.network), Path(args.scenarios), Path(args.out)
    workers = args.workers if args.workers is not None else _default_workers()
    config = ReductionConfig(
        e_bar=args.e_bar, objective=OBJECTIVE_FLAGS[args.objective],
        target_reduction=args.target_reduction, workers=workers, evaluation=args.evaluation,
    )
    net = _load_checked_network(net_path)
    y = assemble_admittance(net)
    lib = load_library(net, sc_path)
    if len(lib) == 0:
        raise CliError(EXIT_INVALID, "ValidationError", f"{sc_path}: no scenarios")
    seed_pairs = read_trace_pairs(Path(args.seed_trace)) if args.seed_trace else []
    t_loaded = time.perf_counter()

    model = run_reduction(net, lib, config, y=y, seed_pairs=seed_pairs)
    t_reduced = time.perf_counter()
    reduction_before = model.reduction
    trace = model.trace
    if args.radialize:
        model = radialize(model, net, y)
        if not is_tree(reduced_topology(model.kron)):
            raise CliError(EXIT_SOLVER, "StructuralError", "radialized topology is not a tree")
    t_radial = time.perf_counter()

    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "reduced.json")
    write_trace(out / "trace.csv", trace, lib.ids)
    t_written = time.perf_counter()
    manifest = {
        "tool": "feederkron",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": "reduce",
        "inputs": {
            "network": {"path": str(net_path), "sha256": _sha256(net_path)},
            "scenarios": {"path": str(sc_path), "sha256": _sha256(sc_path)},
            "seed_trace": None if not args.seed_trace else
            {"path": args.seed_trace, "sha256": _sha256(Path(args.seed_trace)), "pairs": len(seed_pairs)},
        },
        "config": {
            "e_bar": config.e_bar,
            "objective": config.objective,
            "workers": config.workers,
            "target_reduction": config.target_reduction,
            "radialize": bool(args.radialize),
            "evaluation": config.evaluation,
            "tie_break": "lexicographic (s, r)",
        },
        "output_dir": str(out),
        "outputs": ["reduced.json", "trace.csv", "manifest.json"],
        "result": {
            "n_original": model.n_original,
            "kept": len(model.kept),
            "reduction_search": reduction_before,
            "reduction": model.reduction,
            "reinserted": list(model.reinserted),
            "iterations": len(trace),
            "explored_assignments": count_explored([net.n - k for k in range(len(trace))]),
            "train_max_err": model.train_max_err,
        },
        "wall_time_s": {
            "load": t_loaded - t_start,
            "reduce": t_reduced - t_loaded,
            "radialize": t_radial - t_reduced,
            "write": t_written - t_radial,
            "total": time.perf_counter() - t_start,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"kept {len(model.kept)}/{model.n_original} nodes "
          f"({100 * model.reduction:.1f}% reduction) in {len(trace)} iterations; wrote {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    net = _load_checked_network(Path(args.network))
    model = load_model(args.reduced)
    if model.n_original != net.n:
        raise CliError(EXIT_INVALID, "ValidationError",
                       f"reduced model was built for {model.n_original} nodes, network has {net.n}")
    unknown = [int(k) for k in model.kept if not 0 <= int(k) < net.n]
    if unknown:
        raise CliError(EXIT_INVALID, "ValidationError", f"reduced model keeps unknown nodes {unknown}")
    lib = load_library(net, args.scenarios)
    result = validate_model(net, model, lib)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hist = write_validation_report(result, out, bins=args.bins)
    train = result.max_err[result.training]
    other = result.max_err[~result.training]
    print(f"{len(lib)} scenarios: max error {result.max_err.max(initial=0):.3e} "
          f"(training {train.max(initial=0):.3e}, other {other.max(initial=0):.3e}); "
          f"wrote {out} and {hist}")
    return EXIT_OK


def _info_network(path: Path, data: dict) -> None:
    net = load_network(path)
    counts = np.bincount([len(nd.phases) for nd in net.nodes], minlength=4)
    report = validate(net)
    print(f"network {path}: {net.n} nodes, {len(net.branches)} branches, slack {net.slack}")
    print(f"  phases: {counts[3]} three-phase, {counts[2]} two-phase, {counts[1]} one-phase")
    print(f"  depth: {int(net.depth.max())}; {report}")


def _info_model(path: Path, model: ReducedModel) -> None:
    prov = f"e_bar={model.e_bar:g}, objective={model.objective}"
    print(f"reduced model {path}: {len(model.kept)}/{model.n_original} nodes kept "
          f"({100 * model.reduction:.1f}% reduction), {prov}")
    adj = reduced_topology(model.kron)
    print(f"  radial={model.radial}, reinserted={len(model.reinserted)}, "
          f"edges={int(adj.sum()) // 2}, tree={is_tree(adj)}")
    for sid, e in model.train_max_err.items():
        print(f"  training {sid}: max error {e:.3e}")


def cmd_info(args) -> int:
    for p in args.paths:
        path = Path(p)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_INVALID, "ValidationError", f"{path}: invalid JSON ({exc})")
        if isinstance(data, dict) and "format" in data:
            _info_model(path, load_model(path))
        else:
            _info_network(path, data)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _fraction(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feederkron", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"feederkron {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic feeder and scenario table")
    g.add_argument("-n", type=int, default=100, help="node count (default 100)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--branch-prob", type=float, default=GenParams.branch_prob)
    g.add_argument("--frac-two-phase", type=float, default=GenParams.frac_two_phase)
    g.add_argument("--frac-one-phase", type=float, default=GenParams.frac_one_phase)
    g.add_argument("--scenarios", type=int, default=GenParams.n_scenarios,
                   help="scenario count; the first two are the low and high extremes")
    g.add_argument("--spread", type=float, default=GenParams.spread)
    g.add_argument("--target-drop", type=float, default=GenParams.target_drop,
                   help="rescale impedances to this peak voltage drop (<= 0 disables)")
    g.add_argument("-o", "--out", default=".", help="output directory")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reduce", help="run the aggregation search")
    r.add_argument("network")
    r.add_argument("scenarios")
    r.add_argument("--e-bar", type=float, required=True, help="voltage-magnitude error bound (p.u.)")
    r.add_argument("--objective", choices=sorted(OBJECTIVE_FLAGS), default="mag")
    r.add_argument("--workers", type=int, default=None,
                   help=f"evaluation threads (default ${WORKERS_ENV} or 1)")
    r.add_argument("--radialize", action="store_true", help="reinsert critical nodes afterwards")
    r.add_argument("--target-reduction", type=_fraction, default=None,
                   help="stop once this fraction of nodes is eliminated")
    r.add_argument("--seed-trace", metavar="TRACE_CSV", default=None,
                   help="replay the commits of an earlier trace before searching")
    r.add_argument("--evaluation", choices=["delta", "naive"], default="delta")
    r.add_argument("-o", "--out", default=".", help="output directory")
    r.set_defaults(func=cmd_reduce)

    v = sub.add_parser("validate", help="per-scenario errors of a reduced model")
    v.add_argument("network")
    v.add_argument("reduced")
    v.add_argument("scenarios")
    v.add_argument("-o", "--out", default="report.csv")
    v.add_argument("--bins", type=int, default=20)
    v.set_defaults(func=cmd_validate)

    i = sub.add_parser("info", help="summarize network or reduced-model files")
    i.add_argument("paths", nargs="+")
    i.set_defaults(func=cmd_info)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except SolverError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_SOLVER)
    except FeederKronError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INVALID)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INVALID)


if __name__ == "__main__":
    sys.exit(main())
