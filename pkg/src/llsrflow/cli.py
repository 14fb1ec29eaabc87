"""Command-line entry point: ``llsrflow <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, __version__
from .ndtensor.kernels import BACKEND

log = logging.getLogger("llsrflow")


def _write_config(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _globals(args) -> dict:
    return {"seed": args.seed, "precision": args.precision, "threads": args.threads}


def _limit_threads(n: int):
    from .train import _threads
    return _threads(n)


# -- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .degrade import DegradeConfig, generate_dataset, synthetic_image
    from .imageio import write_png
    from .params import rng_for

    out = Path(args.out)
    src = args.in_dir
    if src is None:
        # procedural sources, themselves a deterministic function of the seed
        src = out / "sources"
        for i in range(args.synthetic):
            write_png(src / f"src{i:04d}.png", synthetic_image(rng_for(args.seed, "source", i), args.size, args.size))
    template = DegradeConfig(scale=args.scale, seed=args.seed, mosaic=not args.no_mosaic)
    manifest = generate_dataset(src, out, template, args.count, args.seed)
    _write_config(out / "run_config.json", {
        "command": "gen-data", **_globals(args), "in": str(src), "out": str(out), "scale": args.scale,
        "count": args.count, "mosaic": not args.no_mosaic, "synthetic": args.synthetic if args.in_dir is None else 0,
        "size": args.size})
    print(f"wrote {manifest['count']} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, train_loop

    cfg_dict = json.loads(Path(args.config).read_text()) if args.config else {}
    # global flags override the file when given explicitly
    for key in ("seed", "precision", "threads"):
        if getattr(args, key) is not None:
            cfg_dict[key] = getattr(args, key)
    if args.steps is not None:
        cfg_dict["total_steps"] = args.steps
    cfg = TrainConfig.from_dict(cfg_dict)
    _, state, rows = train_loop(cfg, args.data, args.out, resume=args.resume)
    last = rows[-1] if rows else None
    if last:
        print(f"step {last[0]}: nll {last[2]:.4f} l1 {last[3]:.4f} total {last[4]:.4f}")
    print(f"checkpoint {args.out} at step {state.step}")
    return 0


def _infer_one(model, src: Path, dst: Path) -> None:
    from .imageio import read_png, write_png
    from .train import infer

    write_png(dst, infer(model, read_png(src)[None])[0])


def cmd_infer(args) -> int:
    from .train import load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    if args.precision is not None:
        model.store.astype(np.float64 if args.precision == "f64" else np.float32)
    src, dst = Path(args.in_path), Path(args.out)
    with _limit_threads(args.threads or 1):
        if src.is_dir():
            files = sorted(src.glob("*_lr.png")) or sorted(src.glob("*.png"))
            for f in files:
                _infer_one(model, f, dst / f.name.replace("_lr.png", "_pred.png"))
            cfg_path = dst / "run_config.json"
        else:
            _infer_one(model, src, dst)
            files = [src]
            cfg_path = dst.with_suffix(".config.json")
    _write_config(cfg_path, {"command": "infer", **_globals(args), "ckpt": str(args.ckpt),
                             "in": str(src), "out": str(dst), "count": len(files)})
    print(f"wrote {len(files)} image(s) to {dst}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_dirs

    report = evaluate_dirs(args.pred, args.gt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    _write_config(out.with_suffix(".config.json"), {"command": "eval", **_globals(args),
                                                     "pred": str(args.pred), "gt": str(args.gt)})
    print(f"PSNR {report.psnr_db:.3f} dB  SSIM {report.ssim:.4f}  ({len(report.per_image)} images)")
    return 0


def cmd_crmap_demo(args) -> int:
    """Show that the CR map of an image survives darkening and downsampling."""
    from .crmap import cr_map
    from .degrade import bicubic_down, darken
    from .encoder import maxgrad
    from .imageio import read_png, write_png

    img = read_png(args.in_path)[None]
    out = Path(args.out)
    dark = darken(img, 1.0, args.beta, args.gamma)
    # bicubic ringing can dip below zero
    small = np.clip(bicubic_down(dark[:, :, : dark.shape[2] // 2 * 2, : dark.shape[3] // 2 * 2], 2), 0.0, None)
    maps = {"input": img, "dark": dark, "cr_input": cr_map(img), "cr_dark": cr_map(dark),
            "cr_dark_small": cr_map(small)}
    for name, arr in maps.items():
        write_png(out / f"{name}.png", arr[0])
    g = maxgrad(maps["cr_input"])
    write_png(out / "cr_maxgrad.png", g[0] / max(float(g.max()), 1e-12))
    sums = maps["cr_input"].sum(axis=1)
    lit = sums > 0
    summary = {
        "cr_channel_sum_min": float(sums[lit].min()) if lit.any() else 0.0,
        "cr_channel_sum_max": float(sums[lit].max()) if lit.any() else 0.0,
        "black_pixels": int((~lit).sum()),
        "mean_abs_cr_change_after_darkening": float(np.abs(maps["cr_dark"] - maps["cr_input"]).mean()),
        "mean_abs_brightness_change": float(np.abs(dark - img).mean()),
    }
    _write_config(out / "run_config.json", {"command": "crmap-demo", **_globals(args), "in": str(args.in_path),
                                            "beta": args.beta, "gamma": args.gamma, "summary": summary})
    print(json.dumps(summary, indent=2))
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import selfcheck

    report = args.report
    if report is not None:
        Path(report).parent.mkdir(parents=True, exist_ok=True)
    with _limit_threads(args.threads or 1):
        return selfcheck(report, quick=args.quick)


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--precision", choices=["f32", "f64"], default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit (default 1)")

    p = argparse.ArgumentParser(prog="llsrflow", description="Low-light image super-resolution with a conditional flow.")
    p.add_argument("--version", action="version",
                   version=f"llsrflow {__version__} (checkpoint format {CHECKPOINT_FORMAT_VERSION}, kernels {BACKEND})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="synthesize low-light LR / HR pairs")
    g.add_argument("--in", dest="in_dir", help="directory of source PNGs (default: procedural scenes)")
    g.add_argument("--out", required=True)
    g.add_argument("--scale", type=int, choices=[2, 4], default=2)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--synthetic", type=int, default=16, help="procedural sources when --in is absent")
    g.add_argument("--size", type=int, default=64, help="procedural source size")
    g.add_argument("--no-mosaic", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train encoder and flow")
    t.add_argument("--config", help="JSON file with training config keys")
    t.add_argument("--data", help="dataset directory (default: in-memory synthetic pairs)")
    t.add_argument("--out", required=True, help="checkpoint path (.llsf)")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="super-resolve images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="in_path", required=True, help="PNG file or directory")
    i.add_argument("--out", required=True, help="PNG file or directory")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="PSNR / SSIM of predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("crmap-demo", parents=[common], help="write CR maps of an image before/after darkening")
    c.add_argument("--in", dest="in_path", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--beta", type=float, default=0.7)
    c.add_argument("--gamma", type=float, default=3.0)
    c.set_defaults(func=cmd_crmap_demo)

    s = sub.add_parser("selfcheck", parents=[common], help="run the numerical invariant suites")
    s.add_argument("--report", help="write a JSON report here")
    s.add_argument("--quick", action="store_true", help="smaller sample counts")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "train":
        args.seed = 0 if args.seed is None else args.seed
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
