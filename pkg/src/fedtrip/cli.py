"""Command-line entry point: ``fedtrip <subcommand> ...``.

Output directories default to ``$FEDTRIP_OUT_DIR`` when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import costs
from .harness import ExperimentPlan, PlanRunner, load_plan, mu_sweep, run_plan, summary_csv, sweep_csv
from .nn import MlpSpec
from .objectives import MethodTag
from .partition import partition_stats_csv

log = logging.getLogger("fedtrip")

OUT_ENV = "FEDTRIP_OUT_DIR"


def _out_dir(args, required: bool = True) -> Path | None:
    out = args.out or os.environ.get(OUT_ENV)
    if out is None and required:
        raise SystemExit(f"error: pass --out or set {OUT_ENV}")
    return Path(out) if out else None


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def cmd_run(args) -> int:
    plan = load_plan(args.plan)
    out = _out_dir(args)
    rows = run_plan(plan, out, base_dir=Path(args.plan).resolve().parent)
    sys.stdout.write(summary_csv(rows, plan.base.rounds))
    log.info("wrote %s", out)
    return 0


def cmd_partition_stats(args) -> int:
    plan = load_plan(args.plan)
    runner = PlanRunner(plan, Path(args.plan).resolve().parent)
    seed = plan.seeds[0] if args.seed is None else args.seed
    _emit(partition_stats_csv(runner.partition(seed)), Path(args.out) if args.out else None)
    return 0


def cost_report_csv(plan: ExperimentPlan, profile_name: str, input_dim: int, num_classes: int) -> str:
    cfg = plan.base
    if profile_name == "custom":
        profile = costs.custom_profile(MlpSpec(input_dim, plan.hidden_dims, num_classes))
    else:
        profile = costs.PRESETS[profile_name]
    n = plan.partition.samples_per_client
    K = costs.local_iterations(n, cfg.batch_size, cfg.local_epochs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "profile", "local_iterations", "attach_flops", "round_comm_bytes",
                "total_flops", "total_comm_bytes"])
    for method in costs.FORMULAS:
        attach = costs.attach_flops(method, K, cfg.batch_size, n, profile)
        comm = costs.round_comm_bytes(method, cfg.clients_per_round, profile)
        total = costs.training_flops(method, cfg.rounds, cfg.clients_per_round, n,
                                     cfg.batch_size, cfg.local_epochs, profile)
        w.writerow([method, profile.name, K, repr(float(attach)), repr(float(comm)),
                    repr(float(total)), repr(float(comm * cfg.rounds))])
    return buf.getvalue()


def cmd_cost_report(args) -> int:
    plan = load_plan(args.plan)
    ds = plan.dataset
    if args.profile == "custom" and ds.kind != "synthetic_blobs":
        input_dim, num_classes = 784, 10
    else:
        input_dim, num_classes = ds.dim, ds.n_classes
    _emit(cost_report_csv(plan, args.profile, input_dim, num_classes), Path(args.out) if args.out else None)
    return 0


def cmd_verify_theory(args) -> int:
    from .theory import descent_check, random_problem, xi_expectation_check

    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    lines = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem", "round", "f", "bound", "margin", "satisfied", "max_gamma"])
    all_ok = True
    for i in range(args.problems):
        prob = random_problem(rng)
        w0 = prob.minimizer() + 3.0 * rng.normal(size=prob.dim)
        rep = descent_check(prob, w0, rounds=args.rounds, xi=args.xi, rng=np.random.default_rng([args.seed, i]))
        all_ok &= rep.passed
        lines.append(f"problem {i}: d={prob.dim} clients={prob.n_clients} L={rep.L:.4g} "
                     f"B={rep.B:.4g} mu={rep.mu:.4g} rho={rep.rho:.4g} "
                     f"{'PASS' if rep.passed else 'FAIL'}")
        for r in rep.rows:
            w.writerow([i, r.round, repr(r.f), repr(r.bound), repr(r.margin), r.satisfied, repr(r.max_gamma)])
    for p in (0.08, 0.4, 0.8):
        x = xi_expectation_check(p, seed=args.seed)
        ok = x.rel_error < 0.02
        all_ok &= ok
        lines.append(f"xi expectation p={p}: empirical={x.empirical:.5f} closed_form={x.closed_form:.5f} "
                     f"rel_error={x.rel_error:.4%} {'PASS' if ok else 'FAIL'}")
    lines.append("OVERALL " + ("PASS" if all_ok else "FAIL"))
    report = "\n".join(lines) + "\n"
    _emit(report, out / "theory_report.txt")
    _emit(buf.getvalue(), out / "descent.csv")
    sys.stdout.write(report)
    return 0 if all_ok else 1


def cmd_mu_sweep(args) -> int:
    plan = load_plan(args.plan)
    if MethodTag.FEDTRIP not in plan.methods:
        plan = replace(plan, methods=(*plan.methods, MethodTag.FEDTRIP))
    mus = [float(m) for m in args.mu.split(",") if m.strip()]
    rows = mu_sweep(plan, mus, _out_dir(args), base_dir=Path(args.plan).resolve().parent)
    sys.stdout.write(sweep_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtrip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every method and seed of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition-stats", help="per-client label histogram and entropy CSV")
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_partition_stats)

    p = sub.add_parser("cost-report", help="per-method FLOPs and communication CSV")
    p.add_argument("--plan", required=True)
    p.add_argument("--profile", choices=["custom", *costs.PRESETS], default="custom")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("verify-theory", help="descent inequality and xi expectation checks")
    p.add_argument("--out")
    p.add_argument("--problems", type=int, default=20)
    p.add_argument("--rounds", type=int, default=50)
    p.add_argument("--xi", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("mu-sweep", help="FedTrip sensitivity to mu")
    p.add_argument("--plan", required=True)
    p.add_argument("--mu", required=True, help="comma-separated values, e.g. 0.1,0.4,1.0,2.5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mu_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
