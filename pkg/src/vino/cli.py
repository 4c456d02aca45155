"""Command line entry point: ``vino synth-gen | pretrain | eval-corloc | attn-viz``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, DataError, VinoError

log = logging.getLogger("vino")


def _load_cfg(path):
    return load_config(path) if path else ExperimentConfig().validate()


def cmd_synth_gen(args):
    from .maskops import bbox_of_mask
    from .discovery import write_boxes
    from .videodata import generate_synthetic_video, write_video, FRAME_PATTERN

    cfg = _load_cfg(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    video = generate_synthetic_video(cfg.synth)
    write_video(out, video)
    if args.boxes:
        boxes = {
            Path(FRAME_PATTERN.format(i)).stem: [bbox_of_mask(m.grid) for m in masks if m.area > 0]
            for i, masks in enumerate(video.annotations)
        }
        write_boxes(args.boxes, boxes)
    log.info("wrote %d frames to %s", len(video), out)
    return 0


def cmd_pretrain(args):
    from .training import pretrain
    from .videodata import read_videos

    cfg = _load_cfg(args.config)
    videos = read_videos(args.data)
    out = Path(args.out)
    log.info("effective batch: %d tubes (%d x %d)", cfg.effective_batch, cfg.run.micro_batch_tubes, cfg.run.accumulation)
    res = pretrain(cfg, videos, out, resume=args.resume, force_resume=args.force_resume)
    log.info("finished at step %d", res.step)
    return 0


def _read_images(directory):
    from .videodata import read_image

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not paths:
        raise DataError(f"no images in {directory}")
    return [p.stem for p in paths], [read_image(p) for p in paths]


def cmd_eval_corloc(args):
    from . import discovery
    from .training import boxes_foreground, discover_boxes, encoder_keys, indicator_keys, model_from_checkpoint

    model, cfg = model_from_checkpoint(args.ckpt)
    ids, images = _read_images(args.images)
    try:
        gt = discovery.read_boxes(args.boxes)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not any(i in gt for i in ids):
        raise DataError(f"no ground-truth boxes for any image in {args.images}")
    p = cfg.encoder.patch_size
    for i, im in zip(ids, images):
        if im.shape[0] % p or im.shape[1] % p:
            raise ConfigError(f"image {i} size {im.shape[1]}x{im.shape[0]} not divisible by patch size {p}")
    gt_lists = [gt.get(i, []) for i in ids]
    if args.oracle_keys:
        keys, grid = [], None
        for im, boxes in zip(images, gt_lists):
            k, grid = indicator_keys(boxes_foreground(im.shape[:2], boxes), p)
            keys.append(k)
    else:
        keys, grid = encoder_keys(model, images)
    preds = discover_boxes(keys, grid, p)
    try:
        result = discovery.corloc(preds, gt_lists, cfg.discovery.iou_threshold, ids)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    discovery.write_report(args.out, result, {"oracle_keys": bool(args.oracle_keys)})
    log.info("CorLoc %.1f over %d images (%d excluded)", result.corloc, result.n_evaluated, len(result.excluded))
    print(f"corloc={result.corloc:.2f}")
    return 0


def attention_overlay(image: np.ndarray, attn: np.ndarray, alpha: float = 0.5):
    """Blend an inferno heat map of ``attn`` over ``image``; returns (overlay, heat) in [0, 1]."""
    from matplotlib import colormaps

    H, W = image.shape[:2]
    gh, gw = attn.shape
    up = np.kron(attn, np.ones((H // gh, W // gw)))
    peak = up.max()
    norm = up / peak if peak > 0 else up
    heat = colormaps["inferno"](norm)[..., :3]
    base = image.astype(np.float64) / (255.0 if image.dtype == np.uint8 else 1.0)
    return (1 - alpha) * base + alpha * heat, heat


def cmd_attn_viz(args):
    import torch

    from .encoder import attention_map
    from .training import model_from_checkpoint, to_tensor
    from .videodata import read_image, write_image

    model, cfg = model_from_checkpoint(args.ckpt)
    image = read_image(args.image)
    p = cfg.encoder.patch_size
    if image.shape[0] % p or image.shape[1] % p:
        raise ConfigError(
            f"image size {image.shape[1]}x{image.shape[0]} must be divisible by the patch size {p}"
        )
    with torch.no_grad():
        out = model(to_tensor([image], next(model.parameters()).dtype))
    overlay, _ = attention_overlay(image, attention_map(out), args.alpha)
    write_image(args.out, overlay)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="vino", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-defaults", action="store_true", help="print the default config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth-gen", help="render a synthetic co-occurrence video")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--boxes", help="also write ground-truth boxes to this file")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("pretrain", help="train student/teacher encoders")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--force-resume", action="store_true", help="ignore a config-hash mismatch")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval-corloc", help="LOST object discovery with a frozen teacher")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-keys", action="store_true", help="replace encoder keys with ground-truth indicators")
    p.set_defaults(func=cmd_eval_corloc)

    p = sub.add_parser("attn-viz", help="class-token attention overlay")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_attn_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.dump_defaults:
        sys.stdout.write(dump_config(ExperimentConfig()))
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except VinoError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
