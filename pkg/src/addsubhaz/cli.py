"""Command-line front end: fit, gof, simulate, replicate.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure (singular design, vanished censoring survival), 4 replication
quality below the failure budget. Every command is deterministic given
the input digests, flags, and seed; outputs embed their run manifest.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .dataset import CONSTANT, EXP_DECAY, load_dataset, save_dataset
from .errors import InputError, NumericError
from .fitter import fit
from .gof import build_gof_report, export_test_process
from .replicate import (
    CENSORING_RATES,
    default_parallelism,
    run_study,
    table1_cell,
    table2_cell,
    table3_cell,
)
from .report import (
    RunManifest,
    file_digest,
    manifest_comment_header,
    render_fit_report,
    render_gof_report,
    render_replicate_summary,
)
from .simgen import SimConfig, generate
from .variance import sandwich

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_QUALITY = 4

_BASIS_ALIASES = {"constant": CONSTANT, "exp-decay": EXP_DECAY, "exp_decay": EXP_DECAY}


def _write_output(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


_NON_SEMANTIC_FLAGS = ("func", "output", "parallel")


def _manifest(command: str, args: argparse.Namespace, inputs: list[str]) -> RunManifest:
    options = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in _NON_SEMANTIC_FLAGS and v is not None
    }
    return RunManifest(
        command=command,
        options=options,
        seed=getattr(args, "seed", None),
        input_digests={p: file_digest(p) for p in inputs},
        tool_version=__version__,
    )


def _load(args) -> "ClusteredDataset":
    schema = {}
    if args.cluster_var:
        schema["cluster"] = args.cluster_var
    if getattr(args, "time_var", None):
        schema["time"] = args.time_var
    if getattr(args, "status_var", None):
        schema["status"] = args.status_var
    covs = args.covariates.split(",") if getattr(args, "covariates", None) else None
    if covs:
        schema["covariates"] = covs
    basis = _BASIS_ALIASES[args.basis] if getattr(args, "basis", None) else None
    return load_dataset(
        args.input,
        schema=schema or None,
        tau=getattr(args, "tau", None),
        bases=basis,
        delimiter=args.delimiter,
    )


def _cmd_fit(args) -> int:
    ds = _load(args)
    res = fit(ds, cause=args.cause, mode=args.mode, Q=args.quadrature)
    sw = sandwich(ds, res, clustering="by_" + args.variance)
    manifest = _manifest("fit", args, [args.input])
    _write_output(render_fit_report(res, sw, manifest), args.output)
    return EXIT_OK


def _cmd_gof(args) -> int:
    if args.draws < 100:
        raise InputError("need --draws >= 100 for Monte Carlo p-values")
    ds = _load(args)
    res = fit(ds, cause=args.cause, mode=args.mode, Q=args.quadrature)
    covariate = None if args.covariate in (None, "all") else args.covariate
    report = build_gof_report(
        ds,
        res,
        tests=args.test,
        covariate=covariate,
        B=args.draws,
        seed=args.seed,
        add_one=args.pvalue_add_one,
        keep_processes=args.export_processes is not None,
    )
    manifest = _manifest("gof", args, [args.input])
    _write_output(render_gof_report(report, manifest), args.output)
    if args.export_processes is not None:
        frames = []
        for e in report.entries:
            if e.process is None:
                continue
            df = export_test_process(e.process, args.plot_draws)
            df.insert(0, "test", e.kind)
            df.insert(1, "target", e.name)
            frames.append(df)
        import pandas as pd

        pd.concat(frames, ignore_index=True).to_csv(args.export_processes, index=False)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    beta1 = [float(v) for v in args.beta1.split(",")]
    beta2 = [float(v) for v in args.beta2.split(",")]
    config = SimConfig(
        n_clusters=args.n,
        cluster_size=args.m,
        rho=args.rho,
        theta=args.theta,
        beta1=beta1,
        beta2=beta2,
        gamma=args.gamma,
        admin_horizon=args.admin_horizon,
        model=args.model,
        covariates=args.covariates,
        covariate_cluster_corr=args.cluster_corr,
        clamp_probabilities=args.clamp_probabilities,
        seed=args.seed,
    )
    sim = generate(config, replicate=args.replicate)
    manifest = _manifest("simulate", args, [])
    with open(args.output, "w") as fh:
        fh.write(manifest_comment_header(manifest))
        sim.dataset.to_frame(sim.truth_columns() if args.truth else None).to_csv(
            fh, index=False
        )
    return EXIT_OK


def _cmd_replicate(args) -> int:
    if args.study == "table1":
        cell = table1_cell(args.n or 100, args.m or 10, args.theta or 0.7, args.gamma or 0.35)
    elif args.study == "table2":
        cell = table2_cell(args.n or 250, args.m or 20, args.theta or 1.0, args.gamma or 0.95)
    else:
        cell = table3_cell(
            model=args.model,
            n_clusters=args.n or 100,
            censoring_pct=args.censoring,
            theta=args.theta or 0.7,
            cluster_size=args.m or 10,
        )
    t0 = time.time()
    summary = run_study(cell, reps=args.reps, seed=args.seed, parallel=args.parallel)
    manifest = _manifest("replicate", args, [])
    _write_output(render_replicate_summary(summary, manifest), args.output)
    print(
        f"replicate: {summary.reps_completed}/{summary.reps_requested} replicates "
        f"in {time.time() - t0:.1f}s",
        file=sys.stderr,
    )
    if summary.failure_fraction > 0.05:
        print(
            f"error: {len(summary.failures)} of {summary.reps_requested} "
            "replicates failed (budget 5%)",
            file=sys.stderr,
        )
        return EXIT_QUALITY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="addsubhaz",
        description=(
            "Marginal additive subdistribution hazards regression for "
            "clustered competing-risks data"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="delimited data file")
        p.add_argument("--output", default=None, help="output file (default stdout)")
        p.add_argument("--delimiter", default=",")

    def add_model(p):
        p.add_argument("--cause", type=int, default=1)
        p.add_argument("--mode", choices=["ipcw", "cc"], default="ipcw")
        p.add_argument("--cluster-var", default=None, help="cluster id column")
        p.add_argument("--time-var", default=None)
        p.add_argument("--status-var", default=None)
        p.add_argument("--covariates", default=None, help="comma-separated columns")
        p.add_argument("--basis", choices=sorted(_BASIS_ALIASES), default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--quadrature", type=int, default=None, metavar="Q")

    p_fit = sub.add_parser("fit", help="fit the model and report coefficients")
    add_io(p_fit)
    add_model(p_fit)
    p_fit.add_argument("--variance", choices=["cluster", "individual"], default="cluster")
    p_fit.set_defaults(func=_cmd_fit)

    p_gof = sub.add_parser("gof", help="goodness-of-fit tests")
    add_io(p_gof)
    add_model(p_gof)
    p_gof.add_argument("--test", choices=["additivity", "functional-form", "all"],
                       default="additivity")
    p_gof.add_argument("--covariate", default="all", help="covariate name or 'all'")
    p_gof.add_argument("--draws", type=int, default=1000)
    p_gof.add_argument("--seed", type=int, default=0)
    p_gof.add_argument("--pvalue-add-one", action="store_true",
                       help="use (1 + exceedances)/(B + 1) p-values")
    p_gof.add_argument("--export-processes", default=None, metavar="PATH")
    p_gof.add_argument("--plot-draws", type=int, default=20)
    p_gof.set_defaults(func=_cmd_gof)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    p_sim.add_argument("--model", choices=["m1", "m2"], default="m1")
    p_sim.add_argument("--n", type=int, required=True, help="number of clusters")
    p_sim.add_argument("--m", type=int, required=True, help="cluster size")
    p_sim.add_argument("--rho", type=float, default=0.5)
    p_sim.add_argument("--theta", type=float, default=0.7)
    p_sim.add_argument("--beta1", default="1.0", help="comma-separated coefficients")
    p_sim.add_argument("--beta2", default="0.2")
    p_sim.add_argument("--gamma", type=float, default=None, help="exponential censoring rate")
    p_sim.add_argument("--admin-horizon", type=float, default=None)
    p_sim.add_argument("--covariates", choices=["uniform01", "normal_bernoulli"],
                       default="uniform01")
    p_sim.add_argument("--cluster-corr", type=float, default=0.925,
                       help="within-cluster covariate copula correlation")
    p_sim.add_argument("--clamp-probabilities", action="store_true")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--replicate", type=int, default=0)
    p_sim.add_argument("--truth", action="store_true", help="include ground-truth columns")
    p_sim.add_argument("--output", required=True)
    p_sim.set_defaults(func=_cmd_simulate)

    p_rep = sub.add_parser("replicate", help="run a named simulation study cell")
    p_rep.add_argument("--study", choices=["table1", "table2", "table3"], required=True)
    p_rep.add_argument("--reps", type=int, required=True)
    p_rep.add_argument("--parallel", type=int, default=None,
                       help=f"worker count (default {default_parallelism()})")
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.add_argument("--n", type=int, default=None)
    p_rep.add_argument("--m", type=int, default=None)
    p_rep.add_argument("--theta", type=float, default=None)
    p_rep.add_argument("--gamma", type=float, default=None)
    p_rep.add_argument("--model", choices=["m1", "m2"], default="m1")
    p_rep.add_argument("--censoring", type=int, choices=sorted(CENSORING_RATES),
                       default=20, help="censoring percent (table3)")
    p_rep.add_argument("--output", default=None)
    p_rep.set_defaults(func=_cmd_replicate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
