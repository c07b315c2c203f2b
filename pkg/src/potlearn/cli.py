"""Command-line harness: generate data, train, evaluate and check gradients.

Exit codes: 0 success, 1 usage or input error, 2 solver failure,
3 verification failure. ``POTLEARN_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...)
sets the log verbosity; the default is WARNING.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from potlearn import fileio
from potlearn.diffgrad import SingularSystem, grad_theta
from potlearn.games import CongestionSpec, CournotSpec, congestion_form, cournot_form, generate_dataset
from potlearn.learner import CSV_COLUMNS, SCHEDULES, TrainConfig, evaluate_test_error, summary_dict, train
from potlearn.model import project_theta, assemble
from potlearn.qp import IllConditioned, Infeasible, solve_potential
from potlearn.verify import finite_diff_grad

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
GRADCHECK_FLOOR = 1e-6  # below this a gradient counts as zero; error is then absolute

log = logging.getLogger("potlearn")

FORMATS_HELP = f"""
file formats (JSON, each with "format_version": {fileio.FORMAT_VERSION}):
  form.json     {{"kind": "form", "game": "cournot", "n": N}}, or for congestion
                {{"kind": "form", "game": "congestion", "n_nodes": V,
                 "edges": [[u, v, L_e1, ..., L_ep], ...], "commodities": [[s, t], ...]}};
                other games store the affine maps R0, Ri, c0, C, A, b
                ({{"const": .., "coef": ..}}), eq_rows, row_agent and box.
  dataset.json  header {{"kind": "dataset", "game", "n", "m", "p", "sigma", "seed",
                "theta_true", "form"}} plus "points": [{{"mu": [..], "x": [..],
                "split": "train"|"test"}}, ...]; "form" is relative to the dataset.
  metrics.csv   columns {",".join(CSV_COLUMNS)}; one row every --eval-every
                iterations and at the last one. degenerate and clip count events
                since the previous row. wall_ms is blank unless --wall-ms.
  summary.json  final theta, config echo, seed, event counts, final test error.
  timings.json  per-phase and total wall-clock milliseconds.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _theta_arg(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="potlearn", description="Learn potential-game parameters from observed equilibria.",
                     epilog=FORMATS_HELP, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a game and a noisy equilibrium dataset",
                       epilog=FORMATS_HELP, formatter_class=fmt)
    g.add_argument("--game", choices=("cournot", "congestion"), required=True)
    g.add_argument("--n", type=int, default=10, help="Cournot agent count (default 10)")
    g.add_argument("--K", type=int, default=100, help="number of datapoints (default 100)")
    g.add_argument("--sigma", type=float, default=0.1, help="observation noise std (default 0.1)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", type=float, default=0.1)
    g.add_argument("--nodes", type=int, default=8, help="congestion graph size (default 8)")
    g.add_argument("--p-edge", type=float, default=0.3, help="edge probability (default 0.3)")
    g.add_argument("--agents", type=int, default=3, help="congestion agent count (default 3)")
    g.add_argument("--p", type=int, default=3, help="congestion parameter count (default 3)")
    g.add_argument("--out", default=".", help="output directory for form.json and dataset.json")

    t = sub.add_parser("train", help="run the stochastic active-set learner",
                       epilog=FORMATS_HELP, formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--form", help="form file (default: the one named in the dataset)")
    t.add_argument("--T", type=int, default=2000, help="iterations (default 2000)")
    t.add_argument("--eta0", type=float, default=0.1, help="initial step size (default 0.1)")
    t.add_argument("--schedule", choices=SCHEDULES, default="sqrt")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--rule", choices=("rule1", "rule2"), default="rule1",
                   help="degeneracy handling: random partition or parameter perturbation")
    t.add_argument("--epsilon", type=float, help="perturbation radius for rule2 (default 1e-3 (1 + |theta|))")
    t.add_argument("--eval-every", type=int, default=10)
    t.add_argument("--theta-init", type=_theta_arg, help="comma-separated start (default: normal draw)")
    t.add_argument("--check-nash", action="store_true", help="record the best-response gap every iteration")
    t.add_argument("--wall-ms", action="store_true", help="fill the wall_ms CSV column (breaks byte-reproducibility)")
    t.add_argument("--out-dir", default="run", help="directory for metrics.csv, summary.json, timings.json")

    e = sub.add_parser("eval", help="test error of a parameter vector",
                       epilog=FORMATS_HELP, formatter_class=fmt)
    e.add_argument("--data", required=True)
    e.add_argument("--form")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--summary", help="summary.json from train (uses theta_final)")
    src.add_argument("--theta", type=_theta_arg, help="comma-separated parameters")
    src.add_argument("--true", action="store_true", help="use theta_true from the dataset header")
    e.add_argument("--out", help="also write the result as JSON here")

    c = sub.add_parser("gradcheck", help="compare implicit gradients with finite differences",
                       epilog=FORMATS_HELP, formatter_class=fmt)
    c.add_argument("--data", required=True)
    c.add_argument("--form")
    c.add_argument("--N", type=int, default=20, help="random (theta, datapoint) pairs (default 20)")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="also write the report as JSON here")
    return parser


def _load_inputs(args):
    dataset = fileio.load_dataset(args.data)
    form_path = Path(args.form) if args.form else fileio.resolve_form_path(args.data, dataset)
    return fileio.load_form(form_path), dataset


def cmd_generate(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.game == "cournot":
        spec = CournotSpec.random(args.n, rng)
        form = cournot_form(args.n)
    else:
        spec = CongestionSpec.random(args.nodes, args.p_edge, args.agents, args.p, rng)
        form = congestion_form(spec)
    dataset = generate_dataset(form, spec.theta_true, spec.sample_context, args.K, args.sigma, rng,
                               test_fraction=args.test_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_form(form, out / "form.json")
    fileio.save_dataset(dataset, out / "dataset.json", form_file="form.json", seed=args.seed)
    print(f"seed {args.seed}: wrote {out / 'form.json'} and {out / 'dataset.json'} "
          f"({dataset.train_idx.size} train, {dataset.test_idx.size} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    form, dataset = _load_inputs(args)
    config = TrainConfig(T=args.T, eta0=args.eta0, schedule=args.schedule, seed=args.seed, rule=args.rule,
                         epsilon=args.epsilon, eval_every=args.eval_every, theta_init=args.theta_init,
                         check_nash=args.check_nash)
    t0 = time.perf_counter()
    theta, runlog = train(form, dataset, config)
    total_ms = 1e3 * (time.perf_counter() - t0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(runlog.to_csv(wall_time=args.wall_ms))
    extra = {"data": str(args.data)}
    if runlog.nash_gaps:
        extra["max_nash_gap"] = max(runlog.nash_gaps)
    fileio.save_json(summary_dict(theta, runlog, config, extra), out / "summary.json")
    fileio.save_json({"phase_ms": runlog.phase_ms, "total_ms": total_ms}, out / "timings.json")
    print(f"theta_final = {np.array2string(theta, precision=6)}; final test error {runlog.final_test_error:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    form, dataset = _load_inputs(args)
    if not dataset.test:
        raise ValueError("the dataset has an empty test split")
    if args.summary:
        theta = fileio.load_json(args.summary)["theta_final"]
    elif args.theta is not None:
        theta = args.theta
    elif args.true:
        theta = dataset.meta.get("theta_true")
        if theta is None:
            raise ValueError("the dataset header has no theta_true")
    else:
        raise ValueError("give one of --summary, --theta or --true")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (form.p,):
        raise ValueError(f"theta must have {form.p} entries")
    err = evaluate_test_error(form, theta, dataset.test)
    print(f"{err:.12g}")
    if args.out:
        fileio.save_json({"theta": theta.tolist(), "test_error": err, "n_test": len(dataset.test)}, args.out)
    return EXIT_OK


def run_gradcheck(form, points, n_pairs: int, rng: np.random.Generator, h: float = 1e-5,
                  tol: float = GRADCHECK_TOL, theta_center=None) -> dict:
    """Implicit gradient against central differences at random ``(theta, datapoint)`` pairs.

    Components flagged by the finite-difference oracle (tight set changes
    within ``h``) are skipped and counted. The error of a pair is
    ``max|g - fd| / max(max|fd|, floor)`` over the compared components.
    """
    pairs = []
    for _ in range(n_pairs):
        if theta_center is None:
            theta = np.abs(rng.standard_normal(form.p))
        else:
            theta = np.asarray(theta_center, dtype=float) * np.exp(0.2 * rng.standard_normal(form.p))
        theta = project_theta(theta, form.box)
        k = int(rng.integers(len(points)))
        dp = points[k]
        fd = finite_diff_grad(form, theta, dp, h)
        sol = solve_potential(assemble(form, theta, dp.mu))
        g = grad_theta(form, theta, sol.Z, dp, lam_hint=sol.lam)
        ok = np.isfinite(fd)
        if ok.any():
            err = float(np.max(np.abs(g[ok] - fd[ok])) / max(float(np.max(np.abs(fd[ok]))), GRADCHECK_FLOOR))
        else:
            err = float("nan")
        pairs.append({"datapoint": k, "theta": theta.tolist(), "adjoint": g.tolist(),
                      "finite_diff": [None if not np.isfinite(v) else float(v) for v in fd],
                      "skipped": int((~ok).sum()), "rel_error": err})
    errs = [p["rel_error"] for p in pairs if np.isfinite(p["rel_error"])]
    return {
        "pairs": pairs,
        "compared": len(errs),
        "skipped_components": sum(p["skipped"] for p in pairs),
        "max_rel_error": max(errs) if errs else float("nan"),
        "tol": tol,
        "passed": bool(errs) and max(errs) <= tol,
    }


def cmd_gradcheck(args) -> int:
    form, dataset = _load_inputs(args)
    points = dataset.train or dataset.points
    report = run_gradcheck(form, points, args.N, np.random.default_rng(args.seed), h=args.h, tol=args.tol)
    for i, p in enumerate(report["pairs"]):
        note = f" ({p['skipped']} component(s) at a kink, skipped)" if p["skipped"] else ""
        print(f"pair {i:3d} datapoint {p['datapoint']:3d} rel error {p['rel_error']:.3e}{note}")
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{status}: max rel error {report['max_rel_error']:.3e} over {report['compared']} pairs (tol {args.tol:g})")
    if args.out:
        fileio.save_json(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("POTLEARN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (Infeasible, IllConditioned, SingularSystem) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
