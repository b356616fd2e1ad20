"""Command-line entry point: ``train``, ``infer``, ``gradcheck``, ``bench``.

Exit status: 0 success, 1 invalid input (config, files, shapes), 2 numeric
failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .errors import HistoformerError, NumericError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    run = load_config(args.config)
    if args.out_dir:
        run.out_dir = args.out_dir
    quiet = args.quiet
    train(run, resume=args.resume, echo=lambda s: None if quiet and s.startswith("iter=") else print(s, flush=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .inference import restore
    from .losses import psnr, ssim
    from .ppm import read_ppm, write_ppm

    if args.gt and len(args.gt) != len(args.inputs):
        print(f"error: {len(args.gt)} ground-truth files for {len(args.inputs)} inputs", file=sys.stderr)
        return EXIT_INPUT
    config, store = load_checkpoint(args.ckpt)
    images = [read_ppm(p) for p in args.inputs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    restored = restore(images, config, store)
    rows = ["index\tinput\toutput" + ("\tpsnr\tssim\tinput_psnr" if args.gt else "")]
    for i, (src, img) in enumerate(zip(args.inputs, restored)):
        dest = out_dir / f"{i:04d}_{Path(src).stem}.ppm"
        write_ppm(img, dest)
        row = f"{i}\t{src}\t{dest}"
        if args.gt:
            gt = read_ppm(args.gt[i])
            if gt.shape != img.shape:
                print(f"error: ground truth {args.gt[i]} has shape {gt.shape}, restored {img.shape}", file=sys.stderr)
                return EXIT_INPUT
            row += f"\t{psnr(img, gt):.4f}\t{ssim(img, gt):.6f}\t{psnr(images[i], gt):.4f}"
        rows.append(row)
    table = "\n".join(rows) + "\n"
    (out_dir / "metrics.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    t0 = time.perf_counter()
    results = run_gradcheck(args.scope, f64=args.f64, seed=args.seed)
    for r in results:
        print(r.line(), flush=True)
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results)
    print(f"gradcheck scope={args.scope} dtype={'float64' if args.f64 else 'float32'} cases={len(results)} "
          f"max_rel_err={worst:.3e} result={'PASS' if ok else 'FAIL'} time_s={time.perf_counter() - t0:.1f}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args) -> int:
    from .bench import format_table, parse_grid, run_bench, scaling_slope
    from .plotting import bench_scaling

    grid = parse_grid(args.grid)
    rows = run_bench(grid, channels=args.channels, bins=args.bins, repeats=args.repeats,
                     only=args.only.split(",") if args.only else None)
    table = format_table(rows)
    sys.stdout.write(table)
    slope = scaling_slope(rows, "histogram_attention")
    if not np.isnan(slope):
        print(f"slope histogram_attention time~pixels^{slope:.3f} subquadratic={'yes' if slope < 2 else 'no'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(table)
        bench_scaling([r.as_dict() for r in rows], out / "bench.png")
        print(f"wrote {out / 'bench.tsv'} and {out / 'bench.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.add_argument("--quiet", action="store_true", help="print only validation and summary lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="restore PPM images with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gt", nargs="+", help="ground-truth PPMs, one per input, in order")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", required=True, choices=("ops", "dhsa", "dgff", "model"))
    p.add_argument("--f64", action="store_true", help="64-bit analytic pass and tight thresholds")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time every primitive and block over a size grid")
    p.add_argument("--grid", required=True, help="sizes, e.g. 16,32,64 or 16x24,32x48")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--only", help="comma-separated subset of case names")
    p.add_argument("--out", help="directory for bench.tsv and bench.png")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HistoformerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
