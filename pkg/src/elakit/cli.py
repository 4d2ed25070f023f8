"""Command-line entry point: audit, gradcheck, bench, train-toy, gradcam.

Exit codes: 0 success, 1 check failure, 2 usage/parse error, 3 numeric
divergence. All file outputs are written atomically (temp file + rename).
ELA_THREADS caps the worker threads used by the numeric backend.
"""

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _apply_thread_cap():
    cap = os.environ.get("ELA_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _parse_shape(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("shape must be N,C,H,W")
    try:
        shape = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("shape entries must be integers") from None
    if min(shape) < 1:
        raise argparse.ArgumentTypeError("shape entries must be >= 1")
    return shape


def build_parser():
    from elakit.modules import MODULE_CHOICES

    parser = argparse.ArgumentParser(
        prog="elakit",
        description="Directional attention kernels: audits, gradient checks, "
        "benchmarks, toy training, and Grad-CAM heatmaps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_audit = sub.add_parser("audit", help="parameter/FLOP audit of a placement file")
    p_audit.add_argument("--config", required=True, help="placement JSON file")
    p_audit.add_argument("--out", required=True, help="output CSV path")
    p_audit.add_argument("--json-out", help="optional JSON report path")

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of one module")
    p_gc.add_argument("--module", required=True, choices=MODULE_CHOICES)
    p_gc.add_argument("--shape", type=_parse_shape, default=(2, 16, 5, 7), metavar="N,C,H,W")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--tol", type=float, default=1e-5)

    p_bench = sub.add_parser("bench", help="forward/backward wall-time statistics")
    p_bench.add_argument("--module", required=True, choices=MODULE_CHOICES)
    p_bench.add_argument("--shape", type=_parse_shape, default=(1, 256, 14, 14), metavar="N,C,H,W")
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p_bench.add_argument("--out", required=True, help="output CSV path")

    p_train = sub.add_parser("train-toy", help="train the mini CNN on the quadrant task")
    p_train.add_argument("--attention", default="ela-b", help="module kind or 'none'")
    p_train.add_argument("--steps", type=int, default=500)
    p_train.add_argument("--seed", type=int, default=7)
    p_train.add_argument("--lr", type=float, default=0.05)
    p_train.add_argument("--batch-size", type=int, default=32)
    p_train.add_argument("--out", required=True, help="output directory")

    p_cam = sub.add_parser("gradcam", help="emit PGM heatmaps from a trained model")
    p_cam.add_argument("--model", required=True, help="model file from train-toy")
    p_cam.add_argument("--samples", type=int, default=8)
    p_cam.add_argument("--seed", type=int, default=3)
    p_cam.add_argument("--out", required=True, help="output directory")
    return parser


def cmd_audit(args):
    from elakit.accounting import PlacementSpec, audit_network
    from elakit.params import atomic_write_text

    try:
        spec = PlacementSpec.from_json_file(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"error: {args.config}: line {exc.lineno}: {exc.msg}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as exc:
        print(f"error: invalid placement config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = audit_network(spec)
    except ValueError as exc:
        print(f"error: invalid placement: {exc}", file=sys.stderr)
        return EXIT_USAGE
    atomic_write_text(args.out, report.to_csv())
    if args.json_out:
        atomic_write_text(args.json_out, report.to_json())
    print(f"{report.network} + {report.module}: delta {report.total_params} params, "
          f"{report.total_flops} MACs/sample over {len(report.rows)} sites")
    if report.reconciliation:
        rec = report.reconciliation
        print(
            f"reconciliation: audit {rec['audit_delta_params_m']}M vs published "
            f"{rec['published_delta_params_m']}M (ratio {rec['ratio']}, "
            f"within_2x={rec['within_2x']})"
        )
    if not report.enumeration_ok:
        print("error: closed-form count disagrees with parameter enumeration",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args):
    import numpy as np

    from elakit.gradcheck import check_module_gradients
    from elakit.modules import build_attention

    n, c, h, w = args.shape
    try:
        module = build_attention(args.module, c, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed + 1)
    x = rng.standard_normal((n, c, h, w))
    errors = check_module_gradients(module, x, direction_seed=args.seed + 2)
    if os.environ.get("ELAKIT_CORRUPT_BACKWARD"):
        # negative-control hook for exit-code testing
        first = next(iter(errors))
        errors[first] = errors[first] + 1.0
    width = max(len(k) for k in errors)
    ok = True
    for name, err in errors.items():
        status = "ok" if err < args.tol else "FAIL"
        ok &= err < args.tol
        print(f"{name:<{width}}  max rel err {err:.3e}  {status}")
    print(f"gradcheck {args.module} shape={args.shape}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_bench(args):
    import time

    import numpy as np

    from elakit.modules import build_attention
    from elakit.params import atomic_write_text

    if args.reps < 10:
        print("error: --reps must be >= 10", file=sys.stderr)
        return EXIT_USAGE
    n, c, h, w = args.shape
    module = build_attention(args.module, c, seed=args.seed)
    dtype = np.float32 if args.precision == "f32" else np.float64
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((n, c, h, w)).astype(dtype)
    y, _ = module.forward(x, keep_intermediates=True)
    dy = rng.standard_normal(y.shape).astype(dtype)

    def timed(fn):
        for _ in range(3):  # warm-up, excluded
            fn()
        samples = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        return np.percentile(samples, [50, 10, 90])

    fwd = timed(lambda: module.forward(x, keep_intermediates=True))
    bwd = timed(lambda: module.backward(dy))
    lines = ["module,pass,reps,median_s,p10_s,p90_s"]
    for label, stats in (("forward", fwd), ("backward", bwd)):
        lines.append(
            f"{args.module},{label},{args.reps},{stats[0]:.6e},{stats[1]:.6e},{stats[2]:.6e}"
        )
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train_toy(args):
    import os.path

    from elakit.params import atomic_write_text
    from elakit.toy import DivergenceError, evaluate, history_csv, train_toy

    os.makedirs(args.out, exist_ok=True)
    try:
        model, state, data = train_toy(
            args.attention, args.steps, args.seed,
            batch_size=args.batch_size, lr=args.lr,
        )
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    atomic_write_text(os.path.join(args.out, "loss.csv"), history_csv(state.history))
    model.save(os.path.join(args.out, "model.elak"))
    if args.steps == 0:
        print("no training steps requested; wrote header-only loss.csv")
        return EXIT_OK
    acc = evaluate(model, data.images, data.labels)
    atomic_write_text(
        os.path.join(args.out, "final.json"),
        json.dumps({"steps": args.steps, "train_accuracy": acc}, indent=2) + "\n",
    )
    print(f"final train accuracy {acc:.4f} after {args.steps} steps")
    return EXIT_OK


def cmd_gradcam(args):
    import os.path

    from elakit.toy import MiniCnn, gradcam, make_toy_batch, write_pgm

    try:
        model = MiniCnn.load(args.model)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    batch = make_toy_batch(args.samples, seed=args.seed)
    maps = gradcam(model, batch.images, batch.labels)
    for i in range(args.samples):
        write_pgm(os.path.join(args.out, f"heatmap_{i:03d}.pgm"), maps[i])
    print(f"wrote {args.samples} heatmaps to {args.out}")
    return EXIT_OK


COMMANDS = {
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "train-toy": cmd_train_toy,
    "gradcam": cmd_gradcam,
}


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
