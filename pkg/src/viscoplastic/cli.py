"""Command line interface: ``run``, ``compare``, ``adapt`` and ``reference``.

Exit codes: 0 converged, 2 iteration cap reached, 3 configuration error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

from . import output
from .adapt import AdaptError, refine_loop
from .optim import SolverConfig, solve
from .scenarios import (DEFAULT_ADAPT, DEFAULT_COMPARE, ConfigError, Scenario, ScenarioKind,
                        apply_override, output_from_dict, scenario_from_dict, section,
                        solver_from_dict, validate)
from .stokes import StokesKernel

EXIT_OK, EXIT_CAP, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4
REFERENCE_ITERATIONS = 5000
LID_CORNERS = "lid corner nodes (0,1) and (1,1) carry the wall velocity (0,0)"

log = logging.getLogger("viscoplastic")


class IOFailure(OSError):
    pass


def load_config(path, overrides=()) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path} is not valid JSON: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "override must look like section.field=value")
        doc = apply_override(doc, key.strip(), value)
    validate(doc)
    return doc


def _outdir(doc, cli_dir) -> Path:
    out = Path(cli_dir or output_from_dict(doc)["directory"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _guard_io(fn, path, *args):
    try:
        fn(path, *args)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror or exc}") from exc


def _summary(scenario: Scenario, config: SolverConfig, result, ops, seconds, extra=None):
    rec = result.record
    data = {
        **scenario.to_dict(),
        "solver": config.to_dict(),
        "converged": bool(result.converged),
        "iterations": result.iterations,
        "final_grad_residual": rec.grad_residual[-1] if len(rec) else None,
        "restarts": rec.n_restarts,
        "seconds": seconds,
        "mesh_checksum": ops.fine.checksum(),
        "n_fine_triangles": ops.fine.n_triangles,
    }
    if scenario.kind is ScenarioKind.LID_DRIVEN or scenario.boundary_values:
        data["corner_treatment"] = LID_CORNERS
    data.update(extra or {})
    return data


def _write_run(out: Path, doc, scenario, config, result, ops, seconds, extra=None):
    win = output_from_dict(doc)["window_fraction"]
    _guard_io(result.record.to_csv, out / "convergence.csv")
    if output_from_dict(doc)["vtk"]:
        _guard_io(lambda p: output.write_fields(p, ops, result, scenario.model.Bi, win),
                  out / "fields_final.vtk")
    _guard_io(output.write_summary, out / "summary.json",
              _summary(scenario, config, result, ops, seconds, extra))


def _reference_velocity(scenario: Scenario, fine):
    if scenario.reference is None:
        return None
    try:
        return output.read_reference(scenario.reference, fine).u
    except OSError as exc:
        raise IOFailure(f"cannot read reference {scenario.reference}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError("scenario.reference", str(exc)) from None


def cmd_run(doc, out: Path) -> int:
    scenario = scenario_from_dict(doc)
    config = solver_from_dict(doc)
    t0 = time.perf_counter()
    coarse, fine = scenario.meshes()
    ops = scenario.operators(coarse, fine)
    kernel = StokesKernel(ops)
    reference = _reference_velocity(scenario, fine)
    result = solve(scenario, ops, kernel, scenario.model, config, reference=reference)
    seconds = time.perf_counter() - t0
    _write_run(out, doc, scenario, config, result, ops, seconds)
    log.info("%s: %s after %d iterations (%.2f s)", config.algorithm.value,
             "converged" if result.converged else "iteration cap", result.iterations, seconds)
    return EXIT_OK if result.converged else EXIT_CAP


def parse_algorithm_entry(entry: str) -> tuple[str, bool]:
    """``"fista_star+restart"`` -> ``("fista_star", True)``."""
    name, _, flag = str(entry).partition("+")
    if flag not in ("", "restart"):
        raise ConfigError("compare.algorithms", f"unknown variant {entry!r}")
    return name, flag == "restart"


def comparison_grid(doc) -> list:
    cdoc = section(doc, "compare", DEFAULT_COMPARE)
    algs = cdoc["algorithms"]
    if not isinstance(algs, list) or len(algs) < 2:
        raise ConfigError("compare.algorithms", "list at least two algorithms")
    parsed = [parse_algorithm_entry(a) for a in algs]
    for name, _ in parsed:
        try:
            SolverConfig(algorithm=name)
        except ValueError as exc:
            raise ConfigError("compare.algorithms", str(exc)) from None
    kinds = cdoc["scenarios"]
    return list(itertools.product(kinds, zip(algs, parsed), cdoc["Bi"], cdoc["n"]))


def cmd_compare(doc, out: Path) -> int:
    rows = []
    for kind, (label, (name, restart)), Bi, n in comparison_grid(doc):
        run_doc = apply_override(doc, "scenario.kind", json.dumps(kind))
        run_doc = apply_override(run_doc, "scenario.n", json.dumps(n))
        run_doc = apply_override(run_doc, "model.Bi", json.dumps(Bi))
        run_doc = apply_override(run_doc, "solver.algorithm", json.dumps(name))
        run_doc = apply_override(run_doc, "solver.restart", json.dumps(restart))
        run_dir = out / f"{kind}_{label.replace('+', '_')}_Bi{Bi:g}_n{n}"
        row = {"scenario": kind, "algorithm": label, "Bi": Bi, "h": 1.0 / n,
               "iterations": "", "seconds": "", "converged": False}
        t0 = time.perf_counter()
        try:
            scenario = scenario_from_dict(run_doc)
            config = solver_from_dict(run_doc)
            coarse, fine = scenario.meshes()
            ops = scenario.operators(coarse, fine)
            result = solve(scenario, ops, StokesKernel(ops), scenario.model, config)
            row.update(iterations=result.iterations, converged=bool(result.converged))
            run_dir.mkdir(parents=True, exist_ok=True)
            _guard_io(result.record.to_csv, run_dir / "convergence.csv")
        except ConfigError:
            raise
        except Exception as exc:  # a failed row is reported, not fatal
            log.warning("%s failed: %s", run_dir.name, exc)
            row["error"] = str(exc)
        row["seconds"] = round(time.perf_counter() - t0, 3)
        log.info("%s: %s iterations, converged=%s", run_dir.name, row["iterations"],
                 row["converged"])
        rows.append(row)
    _guard_io(output.write_comparison, out / "comparison.csv", rows)
    return EXIT_OK


def cmd_adapt(doc, out: Path) -> int:
    scenario = scenario_from_dict(doc)
    config = solver_from_dict(doc)
    adoc = section(doc, "adapt", DEFAULT_ADAPT)
    cycles = adoc["cycles"]
    if isinstance(cycles, bool) or not isinstance(cycles, int) or cycles < 0:
        raise ConfigError("adapt.cycles", f"expected an integer >= 0, got {cycles!r}")
    pct = adoc["percentile"]
    if isinstance(pct, bool) or not isinstance(pct, (int, float)) or not 0 < pct < 100:
        raise ConfigError("adapt.percentile", f"expected a number in (0, 100), got {pct!r}")
    code = EXIT_OK
    try:
        ar = refine_loop(scenario, scenario.model, config, cycles, float(pct))
    except AdaptError as exc:
        ar, code = exc.partial, EXIT_CAP
    timing = [vars(t) for t in ar.timing]
    _write_run(out, doc, scenario, config, ar.result, ar.ops, ar.total_seconds,
               {"cycles": timing, "marks_per_cycle": [len(m) for m in ar.plan.marks]})
    log.info("adapt: %d cycles, %d fine triangles, %.2f s", len(ar.timing) - 1,
             ar.ops.fine.n_triangles, ar.total_seconds)
    return code


def cmd_reference(doc, out: Path, iterations: int) -> int:
    scenario = scenario_from_dict(doc)
    config = solver_from_dict(doc)
    config.algorithm = config.algorithm.FISTA_STAR
    config.max_iterations = iterations
    config.stop_on_tolerance = False
    coarse, fine = scenario.meshes()
    ops = scenario.operators(coarse, fine)
    t0 = time.perf_counter()
    result = solve(scenario, ops, StokesKernel(ops), scenario.model, config)
    path = out / "reference.bin"
    _guard_io(lambda p: output.write_reference(p, fine, scenario.model, result.iterations,
                                               result.u.values, result.tau.values,
                                               result.gamma.values, result.p.values), path)
    _guard_io(result.record.to_csv, out / "convergence.csv")
    log.info("reference: %d iterations in %.1f s -> %s", result.iterations,
             time.perf_counter() - t0, path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viscoplastic",
                                     description="Viscoplastic cavity flow solvers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("run", "solve one scenario"),
                       ("compare", "run an algorithm comparison grid"),
                       ("adapt", "adaptive refinement cycles"),
                       ("reference", "fixed-length FISTA* reference solution")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="PATH=VALUE", help="override a config field, e.g. solver.gradTol=1e-4")
        p.add_argument("-o", "--output", help="output directory (overrides output.directory)")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "reference":
            p.add_argument("--iterations", type=int, default=REFERENCE_ITERATIONS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        doc = load_config(args.config, args.overrides)
        out = _outdir(doc, args.output)
        if args.command == "run":
            return cmd_run(doc, out)
        if args.command == "compare":
            return cmd_compare(doc, out)
        if args.command == "adapt":
            return cmd_adapt(doc, out)
        if args.iterations < 1:
            raise ConfigError("--iterations", "must be >= 1")
        return cmd_reference(doc, out, args.iterations)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
