"""Batch command-line front end.

Subcommands: ``estimate`` (quantile curves from a CSV or a simulated
sample), ``bootstrap`` (adds percentile confidence intervals),
``outer-set`` (partial-identification boxes) and ``simulate`` (the Monte
Carlo replication study).  All randomness flows from ``--seed``; outputs
are deterministic given the flags.  Exit codes: 0 success, 2 data or
configuration errors, 3 solver non-convergence on more than 10% of the
grid.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import read_csv
from .errors import IvdurError
from .estimator import SolverConfig, estimate_phi
from .inference import FunctionalSpec, bootstrap
from .partial_id import outer_set, triangular_outer_set
from .sim import DgpConfig, StudyConfig, dgp_generate, run_replication_study
from .survival import choose_tbar, fit_survival_model

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NONCONVERGENCE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivdur",
        description="IV quantile estimation for right-censored durations",
    )
    parser.add_argument("--version", action="version", version=f"ivdur {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--input", type=Path, help="observation CSV (header y,z,w,delta)")
        p.add_argument(
            "--simulate",
            type=int,
            metavar="N",
            help="instead of --input, draw N rows from the built-in design",
        )
        p.add_argument("--tbar", type=float, help="explicit upper evaluation bound")
        p.add_argument(
            "--tbar-quantile",
            type=float,
            default=0.95,
            metavar="ALPHA",
            help="per-cell follow-up quantile used when no --tbar/--c0 (default 0.95)",
        )
        p.add_argument(
            "--grid",
            default="0.01:0.01:1.2",
            help="u grid as start:step:stop (default 0.01:0.01:1.2)",
        )
        p.add_argument("--smoother", choices=["kernel", "localpoly"], default="kernel")
        p.add_argument("--bandwidth", type=float, help="override the per-cell rule of thumb")
        p.add_argument("--weighting", choices=["identity", "two-step"], default="identity")
        p.add_argument("--bootstrap-B", type=int, default=200, dest="bootstrap_B")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--c0", type=float, help="censoring support bound")
        p.add_argument("--kappa", type=float, default=10.0, help="breakpoint threshold factor")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument(
            "--no-figures",
            action="store_true",
            help="write only delimited outputs, skip PNG rendering",
        )

    p_est = sub.add_parser("estimate", help="estimate the quantile curves")
    add_common(p_est)

    p_boot = sub.add_parser("bootstrap", help="estimate plus percentile intervals")
    add_common(p_boot)

    p_outer = sub.add_parser("outer-set", help="partial-identification boxes")
    add_common(p_outer)
    p_outer.add_argument(
        "--triangular",
        action="store_true",
        help="use the triangular-design refinement (L=K=2, empty off cell)",
    )

    p_sim = sub.add_parser("simulate", help="Monte Carlo replication study")
    add_common(p_sim)
    p_sim.add_argument("--n", type=int, default=10_000, help="sample size per replication")
    p_sim.add_argument("--replications", type=int, default=100)
    p_sim.add_argument(
        "--coverage-u",
        default="0.1,0.3,0.5,0.7,0.9",
        help="comma-separated u values for bootstrap coverage (empty disables)",
    )
    return parser


def parse_grid(spec: str) -> np.ndarray:
    try:
        start, step, stop = (float(v) for v in spec.split(":"))
    except ValueError:
        raise IvdurError(f"bad grid spec {spec!r}; expected start:step:stop") from None
    if start <= 0 or step <= 0 or stop < start:
        raise IvdurError(f"bad grid spec {spec!r}; need 0 < start <= stop, step > 0")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 12)


def _load_dataset(args):
    if args.input is not None and args.simulate is not None:
        raise IvdurError("pass either --input or --simulate, not both")
    if args.input is not None:
        return read_csv(args.input)
    if args.simulate is not None:
        return dgp_generate(DgpConfig(n=args.simulate, seed=args.seed)).dataset
    raise IvdurError("one of --input or --simulate is required")


def _resolve_tbar(args, data) -> float:
    if args.tbar is not None:
        return args.tbar
    return choose_tbar(data, alpha=args.tbar_quantile, c0=args.c0)


def _solver_config(args) -> SolverConfig:
    return SolverConfig(weighting=args.weighting)


def _run_json(args, outdir: Path, extra: dict, started: float) -> None:
    doc = {
        "command": args.command,
        "config": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(args).items())
            if k != "command"
        },
        "versions": {
            "ivdur": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "seed": args.seed,
        "timings": {"wall_seconds": time.time() - started},
    }
    doc.update(extra)
    with open(outdir / "run.json", "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _estimate_pipeline(args):
    data = _load_dataset(args)
    tbar = _resolve_tbar(args, data)
    model = fit_survival_model(data, tbar, args.smoother, args.bandwidth)
    grid = parse_grid(args.grid)
    estimate = estimate_phi(model, grid, _solver_config(args), seed=args.seed)
    return data, model, estimate


def _write_estimate_outputs(args, outdir: Path, estimate) -> int:
    estimate.to_csv(outdir / "phi.csv")
    with open(outdir / "residual.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "residual_norm"])
        for u, r in zip(estimate.u_grid, estimate.residual_norm):
            writer.writerow([repr(float(u)), repr(float(r))])
    if not args.no_figures:
        from . import report

        report.render_phi_figure(estimate, outdir / "phi.png")
        report.render_residual_figure(estimate, outdir / "residual.png")
    unconverged = sum(1 for ok in estimate.converged if not ok)
    if unconverged > 0.1 * len(estimate.converged):
        print(
            f"warning: solver failed to converge at {unconverged} of "
            f"{len(estimate.converged)} grid points",
            file=sys.stderr,
        )
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_estimate(args) -> int:
    started = time.time()
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    data, model, estimate = _estimate_pipeline(args)
    code = _write_estimate_outputs(args, outdir, estimate)
    _run_json(args, outdir, {"n": data.n, "tbar": model.tbar}, started)
    return code


def cmd_bootstrap(args) -> int:
    started = time.time()
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    data, model, estimate = _estimate_pipeline(args)
    code = _write_estimate_outputs(args, outdir, estimate)
    functionals = [FunctionalSpec("phi", z=z) for z in range(data.n_treatments)]
    if data.n_treatments >= 2:
        functionals.append(FunctionalSpec("qte", z0=0, z1=1))
    result = bootstrap(
        data,
        tbar=model.tbar,
        u_grid=estimate.u_grid,
        functionals=functionals,
        B=args.bootstrap_B,
        seed=args.seed,
        solver_config=_solver_config(args),
        smoother=args.smoother,
        bandwidth=args.bandwidth,
    )
    result.to_csv(outdir / "ci.csv")
    result.to_json(outdir / "ci.json")
    if not args.no_figures:
        from . import report

        report.render_ci_figure(result, outdir / "ci.png")
    _run_json(
        args,
        outdir,
        {"n": data.n, "tbar": model.tbar, "bootstrap_redraws": result.redraws},
        started,
    )
    return code


def cmd_outer_set(args) -> int:
    started = time.time()
    if args.c0 is None:
        raise IvdurError("outer-set requires --c0")
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    data = _load_dataset(args)
    tbar = _resolve_tbar(args, data)
    model = fit_survival_model(data, tbar, args.smoother, args.bandwidth)
    grid = parse_grid(args.grid)
    compute = triangular_outer_set if args.triangular else outer_set
    sets = [(float(u), compute(model, float(u), args.c0)) for u in grid]
    docs = [bu.to_json_dict(u=u, c0=args.c0) for u, bu in sets]
    with open(outdir / "outer_set.json", "w") as fh:
        json.dump(docs[0] if len(docs) == 1 else docs, fh, indent=2)
        fh.write("\n")
    from . import report

    report.write_outer_set_corners(sets, outdir / "outer_set_corners.csv", args.c0)
    if not args.no_figures:
        report.render_outer_set_figure(sets, outdir / "outer_set.png", args.c0)
    _run_json(args, outdir, {"n": data.n, "c0": args.c0}, started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    coverage_u = tuple(
        float(v) for v in args.coverage_u.split(",") if v.strip()
    )
    study = StudyConfig(
        u_grid=parse_grid(args.grid),
        tbar=args.tbar if args.tbar is not None else 10.0,
        smoother=args.smoother,
        bandwidth=args.bandwidth,
        solver=_solver_config(args),
        bootstrap_B=args.bootstrap_B if coverage_u else 0,
        bootstrap_u=coverage_u,
        kappa=args.kappa,
    )
    summary = run_replication_study(
        DgpConfig(n=args.n, seed=args.seed),
        replications=args.replications,
        study=study,
        n_jobs=max(args.threads, 1),
    )
    from . import report

    report.write_study_csvs(summary, outdir)
    if not args.no_figures:
        report.render_study_figures(summary, outdir)
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary.to_json_dict(), fh, indent=2)
        fh.write("\n")
    _run_json(args, outdir, {"replications": args.replications, "n": args.n}, started)
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "bootstrap": cmd_bootstrap,
    "outer-set": cmd_outer_set,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except IvdurError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
