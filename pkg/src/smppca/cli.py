"""
Command-line harness: instance generation, the individual pipeline stages,
evaluation and the experiment sweeps.

Every command writes into ``--out``: result rows as CSV, a ``manifest.json``
holding the full argument set (enough to re-run it), and wall-clock times
in a separate ``timings.csv`` so the result files stay bit-reproducible.

Exit codes: 2 for I/O failures, 3 for invalid arguments or inputs, 4 for
numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .estimate import estimate_dense
from .generators import GeneratorSpec, generate
from .io import read_matrix, read_stream, write_matrix, write_stream
from .matrix_core import ConvergenceError, exact_product, truncated_svd
from .pipeline import (PipelineConfig, default_sample_budget, derive_seeds, evaluate, lela_two_pass,
                       load_factors, save_factors, sketch_svd_baseline, smp_pca, smp_pca_from_summary)
from .sketch import SketchOperator, ingest, ingest_dense, load_summary, save_summary
from .waltmin import FactorPair, WaltminConfig

EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 2, 3, 4

SWEEP_DEFAULT_KIND = {"sweep-m": "exactrank", "sweep-k": "gd", "sweep-theta": "cone"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# -- argument plumbing -------------------------------------------------------

def _add_dims(p):
    p.add_argument("--d", type=int, default=1000, help="rows of A and B")
    p.add_argument("--n", type=int, help="set both --n1 and --n2")
    p.add_argument("--n1", type=int, default=None)
    p.add_argument("--n2", type=int, default=None)


def _add_instance(p, default_kind="gd"):
    _add_dims(p)
    p.add_argument("--kind", default=default_kind, choices=["gd", "cone", "orthotop", "exactrank"])
    p.add_argument("--theta", type=float, default=None, help="cone angle in degrees")
    p.add_argument("--independent", action="store_true",
                   help="GD only: draw A and B from independent Gaussian matrices")


def _add_algo(p):
    p.add_argument("--r", type=int, default=5)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--m", type=int, default=None, help="sample budget (default 4 n r log n)")
    p.add_argument("--t", type=int, default=10, help="WAltMin iterations T")
    p.add_argument("--sketch", default="gaussian", choices=["gaussian", "srht"])
    p.add_argument("--estimator", default="rescaled", choices=["plain", "rescaled"])
    p.add_argument("--sampler", default="fast", choices=["fast", "binomial"])
    p.add_argument("--partition", default="reuse", choices=["fresh", "reuse"])
    p.add_argument("--trim", type=float, default=8.0, help="trim constant")
    p.add_argument("--reg", type=float, default=1e-10, help="least-squares ridge (relative)")


def _add_inputs(p, stream=True):
    p.add_argument("--a", help="matrix A (.mtx, .csv or .npy)")
    p.add_argument("--b", help="matrix B (.mtx, .csv or .npy)")
    if stream:
        p.add_argument("--stream", help="binary entry stream (instead of --a/--b)")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")


def build_parser():
    parser = _Parser(prog="smppca", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic instance")
    _add_instance(p)
    p.add_argument("--r", type=int, default=5)
    p.add_argument("--format", default="npy", choices=["npy", "csv", "mtx", "stream"])
    p.add_argument("--order", default="row", choices=["row", "col", "shuffled"],
                   help="entry order for --format stream")
    _common(p)

    p = sub.add_parser("sketch", help="single pass: sketches and column norms")
    _add_inputs(p)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--sketch", default="gaussian", choices=["gaussian", "srht"])
    _common(p)

    p = sub.add_parser("approx", help="full one-pass approximation")
    _add_inputs(p)
    p.add_argument("--summary", help="sketch summary from the 'sketch' command")
    _add_algo(p)
    p.add_argument("--factor-format", default="csv", choices=["csv", "npy"])
    _common(p)

    p = sub.add_parser("lela", help="two-pass baseline with exact sampled entries")
    _add_inputs(p, stream=False)
    _add_algo(p)
    p.add_argument("--factor-format", default="csv", choices=["csv", "npy"])
    _common(p)

    p = sub.add_parser("sketch-svd", help="SVD of the sketched product")
    _add_inputs(p)
    p.add_argument("--summary")
    p.add_argument("--r", type=int, default=5)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--sketch", default="gaussian", choices=["gaussian", "srht"])
    p.add_argument("--factor-format", default="csv", choices=["csv", "npy"])
    _common(p)

    p = sub.add_parser("exact", help="truncated SVD of the exact product")
    _add_inputs(p, stream=False)
    p.add_argument("--r", type=int, default=5)
    p.add_argument("--factor-format", default="csv", choices=["csv", "npy"])
    _common(p)

    p = sub.add_parser("eval", help="error report of stored factors")
    _add_inputs(p, stream=False)
    p.add_argument("--factors", required=True, help="factor prefix (PREFIX.json, PREFIX_U.*, PREFIX_V.*)")
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--allow-large", action="store_true")
    _common(p)

    for name, help_ in (("sweep-m", "error against the sample budget"),
                        ("sweep-k", "error against the sketch size"),
                        ("sweep-theta", "cone-angle sweep of both baselines")):
        p = sub.add_parser(name, help=help_)
        _add_instance(p, SWEEP_DEFAULT_KIND[name])
        _add_algo(p)
        p.add_argument("--seeds", type=int, default=5, help="seeds per point (median reported)")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        p.add_argument("--manifest", help="re-run from a previous manifest.json")
        if name == "sweep-m":
            p.add_argument("--m-factors", type=float, nargs="+", default=[0.5, 1, 2, 4, 6],
                           help="m = factor * n r log n")
        elif name == "sweep-k":
            p.add_argument("--ks", type=int, nargs="+", default=[50, 100, 200, 400])
        else:
            p.add_argument("--thetas", type=float, nargs="+", default=[10, 30, 60, 90, 150])
        _common(p)
    return parser


def _dims(args):
    n1 = args.n1 if args.n1 is not None else (args.n if args.n is not None else 1000)
    n2 = args.n2 if args.n2 is not None else (args.n if args.n is not None else n1)
    return args.d, n1, n2


def _spec(args, seed, theta=None):
    d, n1, n2 = _dims(args)
    theta = args.theta if theta is None else theta
    if args.kind == "cone" and theta is None:
        theta = 30.0
    return GeneratorSpec(args.kind, d, n1, n2, r=args.r, theta_deg=theta, seed=seed,
                         shared_gaussian=not args.independent)


def _config(args, n, seed):
    m = args.m if args.m is not None else default_sample_budget(n, args.r)
    wm = WaltminConfig(args.r, args.t, args.partition, args.trim, args.reg)
    return PipelineConfig(r=args.r, k=args.k, m=m, T=args.t, sketch_kind=args.sketch,
                          estimator_kind=args.estimator, sampler=args.sampler, seed=seed,
                          partition=args.partition, waltmin=wm)


def _sketch_op(args, d):
    # same sub-seed as PipelineConfig.operator, so `sketch` then `approx --summary`
    # reproduces a direct `approx`
    return SketchOperator(args.sketch, args.k, d, derive_seeds(args.seed)[0])


def _load_pair(args):
    if not (args.a and args.b):
        raise ValueError("need both --a and --b")
    return read_matrix(args.a), read_matrix(args.b)


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _manifest(out, args, extra=None):
    body = {"command": args.command, "version": __version__,
            "args": {k: v for k, v in vars(args).items() if k not in ("command", "manifest", "out")}}
    body.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _timings(out, timings):
    _write_csv(out / "timings.csv", [{"stage": k, "seconds": v} for k, v in timings.items()])


# -- commands ---------------------------------------------------------------

def cmd_gen(args):
    out = _outdir(args)
    spec = _spec(args, args.seed)
    A, B = generate(spec)
    if args.format == "stream":
        write_stream(out / "stream.smps", A, B, order=args.order, seed=args.seed)
        files = ["stream.smps"]
    else:
        files = [f"A.{args.format}", f"B.{args.format}"]
        write_matrix(out / files[0], A)
        write_matrix(out / files[1], B)
    _manifest(out, args, {"files": files})


def _summary_from_inputs(args, op_factory):
    """Sketch summary from --summary, --stream or --a/--b (each read once)."""
    if getattr(args, "summary", None):
        return load_summary(args.summary)
    if getattr(args, "stream", None):
        stream = read_stream(args.stream)
        return ingest(stream, op_factory(stream.dims[0]))
    A, B = _load_pair(args)
    return ingest_dense(A, B, op_factory(A.shape[0]))


def cmd_sketch(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    s = _summary_from_inputs(args, lambda d: _sketch_op(args, d))
    save_summary(s, out / "summary.smpk")
    d, n1, n2 = s.dims
    _write_csv(out / "results.csv", [{"d": d, "n1": n1, "n2": n2, "k": args.k, "sketch": args.sketch,
                                      "a_frob_sq": s.a_frob_sq, "b_frob_sq": s.b_frob_sq}])
    _timings(out, {"sketch": time.perf_counter() - t0})
    _manifest(out, args, {"fingerprint": s.operator_fingerprint})


def _factor_row(args, factors, extra=None):
    row = {"r": factors.rank, "n1": factors.U.shape[0], "n2": factors.V.shape[0]}
    cfg = factors.meta.get("config")
    if cfg:
        row.update({k: cfg[k] for k in ("k", "m", "T", "sketch_kind", "estimator_kind", "sampler",
                                        "partition", "seed")})
    if "num_samples" in factors.meta:
        row["num_samples"] = factors.meta["num_samples"]
    row.update(extra or {})
    return row


def cmd_approx(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    if args.summary:
        s = load_summary(args.summary)
        factors = smp_pca_from_summary(s, _config(args, max(s.dims[1:]), args.seed))
    elif args.stream:
        stream = read_stream(args.stream)
        factors = smp_pca(stream, _config(args, max(stream.dims[1:]), args.seed))
    else:
        A, B = _load_pair(args)
        cfg = _config(args, max(A.shape[1], B.shape[1]), args.seed)
        s = ingest_dense(A, B, cfg.operator(A.shape[0]))
        factors = smp_pca_from_summary(s, cfg, {"sketch": time.perf_counter() - t0})
    _finish_factors(out, args, factors, t0)


def _finish_factors(out, args, factors, t0):
    timings = dict(factors.meta.get("timings", {}), total=time.perf_counter() - t0)
    meta = {k: v for k, v in factors.meta.items() if k != "timings"}
    save_factors(FactorPair(factors.U, factors.V, meta), out / "factors", args.factor_format)
    _write_csv(out / "results.csv", [_factor_row(args, factors)])
    _timings(out, timings)
    _manifest(out, args)


def cmd_lela(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    A, B = _load_pair(args)
    factors = lela_two_pass(A, B, _config(args, max(A.shape[1], B.shape[1]), args.seed))
    _finish_factors(out, args, factors, t0)


def cmd_sketch_svd(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    s = _summary_from_inputs(args, lambda d: _sketch_op(args, d))
    factors = sketch_svd_baseline(s, args.r, seed=args.seed)
    if not factors.meta["converged"]:
        raise ConvergenceError("power iteration on the sketched product did not converge")
    _finish_factors(out, args, factors, t0)


def cmd_exact(args):
    out = _outdir(args)
    t0 = time.perf_counter()
    A, B = _load_pair(args)
    U, S, V = truncated_svd(exact_product(A, B), args.r)
    factors = FactorPair(U, V * S[None, :], {"method": "exact", "r": args.r})
    _finish_factors(out, args, factors, t0)


def cmd_eval(args):
    out = _outdir(args)
    A, B = _load_pair(args)
    factors = load_factors(args.factors)
    r = args.r if args.r is not None else factors.rank
    report = evaluate(A, B, factors, r, allow_large=args.allow_large)
    report.to_json(out / "report.json")
    _write_csv(out / "results.csv", [{"r": r, "spectral_err_rel": report.spectral_err_rel,
                                      "frob_err_rel": report.frob_err_rel,
                                      "optimal_spectral_err_rel": report.optimal_spectral_err_rel,
                                      "condition_number_rho": report.condition_number_rho}])
    _manifest(out, args)


# -- sweeps -----------------------------------------------------------------

def _rel_spec(M, X, nm):
    return float(np.linalg.norm(M - X, 2) / nm)


def _point(task):
    """One (parameter value, seed) evaluation; runs in a worker process."""
    command, args_dict, value, s = task
    args = argparse.Namespace(**args_dict)
    seed = args.seed + s
    t0 = time.perf_counter()
    if command == "sweep-theta":
        A, B = generate(_spec(args, seed, theta=value))
    else:
        A, B = generate(_spec(args, seed))
    M = exact_product(A, B)
    nm = float(np.linalg.norm(M, 2))
    n = max(A.shape[1], B.shape[1])
    if command == "sweep-m":
        args.m = int(math.ceil(value * n * args.r * math.log(n)))
    elif command == "sweep-k":
        args.k = int(value)
    cfg = _config(args, n, seed)
    s = ingest_dense(A, B, cfg.operator(A.shape[0]))
    smp = smp_pca_from_summary(s, cfg)
    sig = np.linalg.svd(M, compute_uv=False)
    row = {"param": value, "seed": seed, "k": cfg.k, "m": cfg.m, "num_samples": smp.meta["num_samples"],
           "optimal_err": float(sig[args.r] / sig[0]) if sig.size > args.r else 0.0,
           "smp_err": _rel_spec(M, smp.product(), nm)}
    if command == "sweep-m":
        row["lela_err"] = _rel_spec(M, lela_two_pass(A, B, cfg).product(), nm)
    else:
        row["sketch_svd_err"] = _rel_spec(M, sketch_svd_baseline(s, args.r, seed=seed).product(), nm)
        row["ratio"] = row["sketch_svd_err"] / row["smp_err"] if row["smp_err"] > 0 else math.inf
    if command == "sweep-theta":
        row["plain_est_err"] = _rel_spec(M, estimate_dense(s, "plain"), nm)
        row["rescaled_est_err"] = _rel_spec(M, estimate_dense(s, "rescaled"), nm)
        row["est_ratio"] = row["plain_est_err"] / row["rescaled_est_err"]
    return row, time.perf_counter() - t0


def cmd_sweep(args):
    if args.manifest:
        saved = json.loads(Path(args.manifest).read_text())
        if saved.get("command") != args.command:
            raise ValueError(f"manifest is for {saved.get('command')!r}, not {args.command!r}")
        out = args.out
        args = argparse.Namespace(command=args.command, manifest=None, out=out, **saved["args"])
    out = _outdir(args)
    values = {"sweep-m": "m_factors", "sweep-k": "ks", "sweep-theta": "thetas"}[args.command]
    params = list(getattr(args, values))
    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    plain = {k: v for k, v in vars(args).items() if k not in ("command", "manifest", "out")}
    tasks = [(args.command, plain, v, s) for v in params for s in range(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_point, tasks))
    else:
        results = [_point(t) for t in tasks]
    points = [row for row, _ in results]
    name = {"sweep-m": "m_factor", "sweep-k": "k", "sweep-theta": "theta_deg"}[args.command]
    for row in points:
        row[name] = row.pop("param")
    _write_csv(out / "points.csv", points)
    summary = []
    for v in params:
        group = [row for row in points if row[name] == v]
        agg = {name: v, "seeds": len(group)}
        for key in group[0]:
            if key.endswith("err") or key.endswith("ratio"):
                agg[f"median_{key}"] = float(np.median([row[key] for row in group]))
        summary.append(agg)
    _write_csv(out / "results.csv", summary)
    _timings(out, {f"{name}={row[name]}/seed={row['seed']}": t for row, (_, t) in zip(points, results)})
    _manifest(out, args, {"point_seeds": [args.seed + s for s in range(args.seeds)]})


COMMANDS = {"gen": cmd_gen, "sketch": cmd_sketch, "approx": cmd_approx, "lela": cmd_lela,
            "sketch-svd": cmd_sketch_svd, "exact": cmd_exact, "eval": cmd_eval,
            "sweep-m": cmd_sweep, "sweep-k": cmd_sweep, "sweep-theta": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except OSError as exc:
        print(f"smppca: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"smppca: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, IndexError, KeyError) as exc:
        print(f"smppca: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
