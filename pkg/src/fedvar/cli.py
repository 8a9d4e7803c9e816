"""Command-line entry point: ``fedvar run | check-grads | barycenter-demo``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .harness import EXIT_CONFIG, EXIT_OK


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _cmd_run(args) -> int:
    from .harness import run_from_path

    res = run_from_path(args.config, args.seed, args.out)
    if res.exit_code == EXIT_CONFIG:
        print(f"config error: {res.message}", file=sys.stderr)
    elif res.exit_code != EXIT_OK:
        print(f"run diverged: {res.message}", file=sys.stderr)
    else:
        last = res.metrics[-1] if res.metrics else {}
        extra = ", ".join(f"{k}={v:.6g}" for k, v in last.items() if k not in ("round", "elbo") and v is not None)
        print(f"wrote {res.out_dir} (round {last.get('round')}, elbo {last.get('elbo', float('nan')):.6f})")
        if extra:
            print(f"  {extra}")
    return res.exit_code


def _cmd_check_grads(args) -> int:
    from .gradcheck import check_model_gradients, summarize
    from .models import MODEL_IDS

    if args.model_id not in MODEL_IDS:
        print(f"unknown model id {args.model_id!r}; expected one of {MODEL_IDS}", file=sys.stderr)
        return EXIT_CONFIG
    results = check_model_gradients(args.model_id, args.trials, args.seed)
    ok = True
    for name, n, worst, passed in summarize(results):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:28s} n={n:3d}  worst rel err {worst:.2e}")
    return EXIT_OK if ok else 1


def _cmd_barycenter_demo(args) -> int:
    from .averaging import (
        GaussianSummary,
        barycenter_cov_diagonal,
        barycenter_cov_fixed_point,
        barycenter_mean,
    )
    from .rng import RngKey, std_normal

    two = [GaussianSummary([1.0], [1.0]), GaussianSummary([3.0], [9.0])]
    print("variances {1, 9}:")
    print(f"  barycenter mean {barycenter_mean(two)[0]:g}, variance {barycenter_cov_diagonal(two)[0]:g}")
    print("  naive parameter averaging would give variance 5")

    key = RngKey(args.seed).derive("demo")
    n, J = 3, 4
    if args.mode == "diagonal":
        sums = [GaussianSummary(std_normal(key.derive(j, "m"), n), np.exp(std_normal(key.derive(j, "v"), n))) for j in range(J)]
        var = barycenter_cov_diagonal(sums)
        print(f"{J} random diagonal Gaussians in {n}-D:")
        print(f"  mean      {np.array2string(barycenter_mean(sums), precision=4)}")
        print(f"  variances {np.array2string(var, precision=4)}")
        print(f"  naive     {np.array2string(np.mean([s.cov for s in sums], axis=0), precision=4)}")
        return EXIT_OK
    sums = []
    for j in range(J):
        A = std_normal(key.derive(j, "A"), n * n).reshape(n, n)
        sums.append(GaussianSummary(std_normal(key.derive(j, "m"), n), A @ A.T + 0.5 * np.eye(n)))
    S, iters, res = barycenter_cov_fixed_point(sums, args.tol, args.max_iter)
    print(f"{J} random full-covariance Gaussians in {n}-D:")
    print(f"  mean {np.array2string(barycenter_mean(sums), precision=4)}")
    print("  covariance")
    print("    " + np.array2string(S, precision=4).replace("\n", "\n    "))
    print(f"  fixed point: {iters} iterations, residual {res:.2e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedvar", description="Structured federated variational inference simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--seed", type=_u64, default=None, help="override the config seed")
    r.add_argument("--out", default=None, help="output directory")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("check-grads", help="finite-difference audit of a model's gradients")
    g.add_argument("model_id")
    g.add_argument("--trials", type=int, default=25)
    g.add_argument("--seed", type=_u64, default=0)
    g.set_defaults(func=_cmd_check_grads)

    b = sub.add_parser("barycenter-demo", help="Wasserstein barycenters of Gaussians")
    b.add_argument("--mode", choices=("diagonal", "full"), default="diagonal")
    b.add_argument("--seed", type=_u64, default=0)
    b.add_argument("--tol", type=float, default=1e-9)
    b.add_argument("--max-iter", type=int, default=200)
    b.set_defaults(func=_cmd_barycenter_demo)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "trials", 1) < 1:
        print("--trials must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
