"""Command-line entry point: ``ygan {gen-data,train,eval,infer,warp}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ygan", description="Trinocular self-supervised depth GAN on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic trinocular dataset", formatter_class=_fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--scenes", type=int, default=32, help="number of scenes")
    p.add_argument("--width", type=int, default=96, help="image width (multiple of 16)")
    p.add_argument("--height", type=int, default=64, help="image height (multiple of 16)")
    p.add_argument("--focal", type=float, default=100.0, help="focal length in pixels")
    p.add_argument("--baseline", type=float, default=0.5, help="center-to-side camera distance")
    p.add_argument("--min-depth", type=float, default=5.0, help="nearest surface depth")
    p.add_argument("--max-depth", type=float, default=50.0, help="farthest surface depth")
    p.add_argument("--objects", type=int, default=4, help="maximum floating rectangles per scene")
    p.add_argument("--cell-size", type=float, default=3.0, help="texture checker cell size in world units")
    p.add_argument("--seed", type=int, default=0, help="global dataset seed")
    p.add_argument("--workers", type=int, default=1, help="render threads (output is identical for any value)")

    p = sub.add_parser("train", help="train G, D_L and D_R", formatter_class=_fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--steps", type=int, default=500, help="training steps")
    p.add_argument("--batch", type=int, default=2, help="batch size")
    p.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="initialisation and batch-order seed")
    p.add_argument("--gan-loss", choices=["paper", "nonsaturating"], default="nonsaturating", help="generator adversarial term")
    p.add_argument("--ssim-mode", choices=["dssim", "paper"], default="dssim", help="SSIM term of the reconstruction loss")
    p.add_argument("--lambda-gan", type=float, default=1.0, help="weight of the adversarial terms")
    p.add_argument("--d-max-frac", type=float, default=0.2, help="maximum disparity as a fraction of width")
    p.add_argument("--checkpoint-every", type=int, default=100, help="checkpoint period in steps (0 disables)")
    p.add_argument("--log-every", type=int, default=10, help="console log period in steps")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")

    p = sub.add_parser("eval", help="depth metrics of a checkpoint on a dataset", formatter_class=_fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--occlusion-masked", action="store_true", help="score only pixels visible in both side views")

    p = sub.add_parser("infer", help="predict a depth map for one center image", formatter_class=_fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="center image (PNG)")
    p.add_argument("--out", required=True, help="output depth PFM")
    p.add_argument("--viz", default=None, help="output 8-bit grayscale visualisation PNG")
    p.add_argument("--focal", type=float, default=100.0, help="focal length in pixels")
    p.add_argument("--baseline", type=float, default=0.5, help="center-to-side camera distance")

    p = sub.add_parser("warp", help="synthesize a side view from a center image and depth", formatter_class=_fmt)
    p.add_argument("--center", required=True, help="center image (PNG)")
    p.add_argument("--depth", required=True, help="center depth (PFM)")
    p.add_argument("--direction", choices=["left", "right"], required=True, help="view to synthesize")
    p.add_argument("--focal", type=float, default=100.0, help="focal length in pixels")
    p.add_argument("--baseline", type=float, default=0.5, help="center-to-side camera distance")
    p.add_argument("--out", required=True, help="output warped PNG")
    p.add_argument("--mask", default=None, help="output valid-mask PNG (0/255)")
    return parser


def _print_config(args) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())}
    print(json.dumps(resolved, sort_keys=True), flush=True)


def _check_dims(width: int, height: int, what: str) -> None:
    if width <= 0 or height <= 0 or width % 16 or height % 16:
        raise UsageError(f"{what} must be positive multiples of 16, got {width}x{height}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> None:
    from .synthgen import SceneConfig, generate_records, write_dataset
    from .warp import CameraRig

    if args.scenes < 0 or args.objects < 0 or args.workers < 1:
        raise UsageError("--scenes and --objects must be non-negative, --workers positive")
    _check_dims(args.width, args.height, "--width/--height")
    if not 0 < args.min_depth < args.max_depth:
        raise UsageError("need 0 < --min-depth < --max-depth")
    if args.focal <= 0 or args.baseline <= 0 or args.cell_size <= 0:
        raise UsageError("--focal, --baseline and --cell-size must be positive")
    rig = CameraRig.centered(args.width, args.height, args.focal, args.baseline)
    cfg = SceneConfig(min_depth=args.min_depth, max_depth=args.max_depth, max_objects=args.objects, cell_size=args.cell_size)
    records = generate_records(args.scenes, rig, cfg, args.seed, workers=args.workers)
    write_dataset(records, args.out, cfg, args.seed, rig=rig)
    print(f"wrote {len(records)} scenes to {args.out}")


def cmd_train(args) -> None:
    from .losses import LossConfig
    from .synthgen import read_dataset
    from .trainer import TrainConfig, train

    if args.steps < 0 or args.batch < 1 or args.lr <= 0 or args.lambda_gan < 0 or not 0 < args.d_max_frac <= 1:
        raise UsageError("invalid training hyperparameters")
    loss = LossConfig(
        ssim_mode="dssim" if args.ssim_mode == "dssim" else "paper_literal",
        gan_mode=args.gan_loss,
        lambda_gan=args.lambda_gan,
    )
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        d_max_frac=args.d_max_frac,
        loss=loss,
        data_dir=args.data,
        out_dir=args.out,
        checkpoint_every=args.checkpoint_every,
        log_every=args.log_every,
    )
    records = read_dataset(args.data)
    ck, rows = train(cfg, records, resume_from=args.resume)
    print(f"finished at step {ck.step}; checkpoint in {os.path.join(args.out, 'final')}")


def cmd_eval(args) -> None:
    from .synthgen import read_dataset
    from .trainer import evaluate, load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    records = read_dataset(args.data)
    report = evaluate(ck.models, records, ck.config.d_max_frac, occlusion_masked=args.occlusion_masked, rig=ck.rig)
    with open(args.report, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    print(f"abs_rel {report['abs_rel']:.4f}  rmse {report['rmse']:.4f}  delta1 {report['delta1']:.4f}  n_pixels {report['n_pixels']}")


def depth_visualisation(depth: np.ndarray) -> np.ndarray:
    """8-bit grayscale, near = bright, stretched between the 5th and 95th percentiles."""
    lo, hi = np.percentile(depth, [5, 95])
    scaled = (hi - depth) / (hi - lo) if hi > lo else np.full(depth.shape, 0.5)
    return np.rint(np.clip(scaled, 0, 1) * 255).astype(np.uint8)


def cmd_infer(args) -> None:
    from .fileio import read_png, write_pfm, write_png
    from .trainer import load_checkpoint, predict_depth
    from .warp import CameraRig

    image = read_png(args.image)
    if image.ndim != 3:
        raise UsageError(f"{args.image}: expected an RGB image")
    h, w = image.shape[:2]
    _check_dims(w, h, "image dimensions")
    if args.focal <= 0 or args.baseline <= 0:
        raise UsageError("--focal and --baseline must be positive")
    ck = load_checkpoint(args.checkpoint)
    rig = CameraRig.centered(w, h, args.focal, args.baseline)
    depth = predict_depth(ck.models, image, rig, ck.config.d_max_frac * w)
    write_pfm(args.out, depth)
    if args.viz:
        write_png(args.viz, depth_visualisation(depth))
    print(f"depth range [{depth.min():.3f}, {depth.max():.3f}] written to {args.out}")


def cmd_warp(args) -> None:
    from .fileio import read_pfm, read_png, write_png
    from .warp import CameraRig, warp_image

    image = read_png(args.center)
    depth = read_pfm(args.depth)
    if image.ndim != 3 or image.shape[:2] != depth.shape:
        raise UsageError(f"image {image.shape[:2]} and depth {depth.shape} dimensions differ")
    h, w = depth.shape
    _check_dims(w, h, "image dimensions")
    if args.focal <= 0 or args.baseline <= 0:
        raise UsageError("--focal and --baseline must be positive")
    if not np.all(depth > 0):
        raise UsageError("depth map must be positive everywhere")
    rig = CameraRig.centered(w, h, args.focal, args.baseline)
    warped, mask = warp_image(image, depth, rig, args.direction)
    write_png(args.out, warped)
    if args.mask:
        write_png(args.mask, (mask > 0).astype(np.uint8) * 255)
    print(f"valid pixels {int(mask.sum())}/{mask.size}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "warp": cmd_warp}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    _print_config(args)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ygan {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"ygan {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        diag = getattr(e, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
