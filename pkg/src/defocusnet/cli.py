"""Command-line entry point: ``gen``, ``train``, ``eval``, ``predict``, ``deblur``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from .deconv import build_stack, cg_deblur, wiener_deblur
from .errors import ConfigError, DataError, DefocusError, ShapeError
from .evaluate import render_blur_map
from .net3d import init_params
from .optics import SAMPLE_MASKS, build_kernel_bank, sample_mask
from .pipeline import (DEFAULT_ALGO_PARAMS, DatasetManifest, LensSweep, TrainConfig,
                       evaluate_split, generate_dataset, load_checkpoint, predict_labels, train)

log = logging.getLogger("defocusnet")


def _mask(value):
    if value in SAMPLE_MASKS:
        return sample_mask(value)
    path = Path(value)
    if not path.exists():
        raise DataError(f"mask {value!r} is neither a bundled mask {SAMPLE_MASKS} nor a file")
    return formats.read_mask(path)


def _manifest_path(value):
    path = Path(value)
    return path / "manifest.tsv" if path.is_dir() else path


def cmd_gen(args):
    pixel_scale = args.pixel_scale if args.pixel_scale else 2000.0 * args.max_blur
    sweep = LensSweep(count=args.focals, depth_range=(args.near, args.far),
                      pixel_scale=pixel_scale)
    manifest = generate_dataset(args.scenes, sweep, _mask(args.mask), args.max_blur, args.out,
                                seed=args.seed, algo=args.algo, size=(args.size, args.size),
                                noise_sigma=args.noise)
    counts = {s: len(manifest.select(s)) for s in ("train", "val", "eval")}
    print(f"wrote {len(manifest.entries)} samples to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, eval {counts['eval']})")


def cmd_train(args):
    manifest = DatasetManifest.read(_manifest_path(args.manifest))
    config = TrainConfig(lr=args.lr, smooth_weight=args.smooth_weight,
                         temperature=args.temperature, steps=args.steps, seed=args.seed,
                         algo=args.algo, val_every=args.val_every)
    result = train(config, manifest, args.out)
    best = "n/a" if result.best_val_n3 is None else f"{result.best_val_n3:.2f}% at step {result.best_step}"
    print(f"checkpoint {result.checkpoint} (best val N-3 {best})")


def cmd_eval(args):
    manifest = DatasetManifest.read(_manifest_path(args.manifest))
    params = load_checkpoint(args.checkpoint, init_params(0))
    report = evaluate_split(params, manifest, args.split, args.algo, args.border)
    print(report.as_text())
    out = Path(args.metrics_out) if args.metrics_out else Path(args.checkpoint).with_name(
        f"metrics_{args.split}_{args.algo or manifest.algo}.txt")
    out.write_text(report.as_keyvalue())


def _load_gray(path):
    image = formats.read_image(path)
    h, w = image.shape
    if h < 8 or w < 8:
        raise ShapeError(f"{path}: image is {h}x{w}, the network needs at least 8x8")
    return image[:h - h % 8, :w - w % 8]


def cmd_predict(args):
    params = load_checkpoint(args.checkpoint, init_params(0))
    bank = build_kernel_bank(_mask(args.mask), args.max_blur)
    image = _load_gray(args.image)
    stack = build_stack(image, bank, args.algo, **DEFAULT_ALGO_PARAMS[args.algo])
    stack = type(stack)(stack.data.astype(np.float32), stack.slice_labels, stack.n)
    labels = predict_labels(params, stack).labels
    out = Path(args.out)
    formats.write_labels(out.with_suffix(".lbls"), labels, args.max_blur)
    Image.fromarray(render_blur_map(labels, args.max_blur)).save(out.with_suffix(".png"))
    print(f"wrote {out.with_suffix('.lbls')} and {out.with_suffix('.png')}")


def cmd_deblur(args):
    m = args.max_blur or max(abs(args.label), 2)
    if abs(args.label) > m:
        raise ConfigError(f"label {args.label} exceeds max blur {m}")
    bank = build_kernel_bank(_mask(args.mask), m)
    image = formats.read_image(args.image)
    psf = bank.kernel(args.label)
    if args.algo == "wiener":
        out = wiener_deblur(image, psf, **DEFAULT_ALGO_PARAMS["wiener"])
    else:
        out = cg_deblur(image, psf, **DEFAULT_ALGO_PARAMS["cg"])
    formats.write_image(args.out, out, bits=16)
    print(f"wrote {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="defocusnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic defocus dataset")
    p.add_argument("--scenes", type=int, default=12)
    p.add_argument("--focals", type=int, default=4)
    p.add_argument("--max-blur", type=int, default=4)
    p.add_argument("--mask", default="asym_a", help="mask PNG/PGM or a bundled mask name")
    p.add_argument("--algo", choices=("wiener", "cg"), default="cg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--near", type=float, default=1.0)
    p.add_argument("--far", type=float, default=4.0)
    p.add_argument("--pixel-scale", type=float, default=None)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the network on a generated dataset")
    p.add_argument("--manifest", required=True, help="manifest file or dataset directory")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--algo", choices=("wiener", "cg"), default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--smooth-weight", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--val-every", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="N-1 / N-3 accuracy of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "eval"), default="eval")
    p.add_argument("--algo", choices=("wiener", "cg"), default=None)
    p.add_argument("--border", type=int, default=None)
    p.add_argument("--metrics-out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-pixel blur labels for one defocused image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--max-blur", type=int, required=True)
    p.add_argument("--algo", choices=("wiener", "cg"), default="cg")
    p.add_argument("--out", required=True, help="output prefix for .lbls and .png")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("deblur", help="deconvolve an image under one blur hypothesis")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--max-blur", type=int, default=None)
    p.add_argument("--algo", choices=("wiener", "cg"), default="cg")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deblur)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DefocusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
