"""Pretraining loop and frozen-encoder evaluation."""

from __future__ import annotations

import copy
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import discovery
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, dump_config, parse_config
from .distill import DistillState, cosine_lr, cosine_momentum, make_optimizer, train_step
from .encoder import VisionTransformer
from .videodata import Video, default_min_area, sample_tube, valid_starts
from .viewgen import NORM_MEAN, NORM_STD, build_tube_views

log = logging.getLogger(__name__)

LOG_NAME = "train_log.txt"


def deterministic_requested(cfg: ExperimentConfig | None = None) -> bool:
    return os.environ.get("VINO_DETERMINISTIC") == "1" or bool(cfg and cfg.run.deterministic)


def set_determinism(on: bool):
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_models(cfg: ExperimentConfig):
    torch.manual_seed(cfg.run.seed)
    dtype = getattr(torch, cfg.run.dtype)
    student = VisionTransformer(cfg.encoder).to(dtype)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    state = DistillState.initial(
        cfg.encoder.head_output_dim,
        dtype=dtype,
        tau_s=cfg.distill.tau_s,
        tau_t=cfg.distill.tau_t,
        momentum=cfg.distill.momentum,
        lambda_local=cfg.distill.lambda_local,
        lambda_mask=cfg.distill.lambda_mask,
        lambda_temp=cfg.distill.lambda_temp,
        center_rate=cfg.distill.center_rate,
    )
    optimizer = make_optimizer(student, cfg.distill.lr, cfg.distill.weight_decay)
    return student, teacher, state, optimizer


def model_from_checkpoint(path, which: str = "teacher") -> tuple[VisionTransformer, ExperimentConfig]:
    ckpt = load_checkpoint(path)
    cfg = parse_config(ckpt.config_text)
    model = VisionTransformer(cfg.encoder).to(getattr(torch, cfg.run.dtype))
    model.load_state_dict(ckpt.teacher if which == "teacher" else ckpt.student)
    model.eval()
    return model, cfg


class TubeSampler:
    """Draws tubes across videos, weighting each video by its number of valid starts."""

    def __init__(self, videos: list[Video], cfg: ExperimentConfig):
        self.videos = videos
        self.cfg = cfg
        d = cfg.data
        counts = np.array([len(valid_starts(len(v), d.T, d.stride)) for v in videos], dtype=np.float64)
        if counts.sum() == 0:
            from .errors import InsufficientFramesError

            raise InsufficientFramesError(
                f"insufficient frames: no video has {(d.T - 1) * d.stride + 1} frames"
            )
        self.weights = counts / counts.sum()

    def sample(self, rng):
        d = self.cfg.data
        v = self.videos[int(rng.choice(len(self.videos), p=self.weights))]
        H, W = v.frames[0].shape[:2]
        min_area = int(np.ceil(d.min_area_fraction * H * W))
        return sample_tube(
            v, d.T, d.stride, rng,
            min_area=min_area, min_confidence=d.min_confidence, max_objects=d.max_objects,
        )

    def micro_batches(self, step: int):
        """View batches for one optimiser step; a pure function of (seed, step)."""
        run = self.cfg.run
        out = []
        for a in range(run.accumulation):
            tubes = []
            for i in range(run.micro_batch_tubes):
                rng = np.random.default_rng(np.random.SeedSequence([run.seed, step, a, i]))
                tube = self.sample(rng)
                for _ in range(self.cfg.views.n_global):
                    tubes.append(build_tube_views(tube, self.cfg.views, rng))
            out.append(tubes)
        return out


def _prefetch(sampler: TubeSampler, steps: range, depth: int):
    if depth <= 0:
        for s in steps:
            yield sampler.micro_batches(s)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for s in steps:
                if stop.is_set():
                    return
                q.put(sampler.micro_batches(s))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    try:
        for _ in steps:
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(timeout=0.05)


def _fmt(v):
    return "-" if v is None else f"{v:.6f}"


def format_log_line(step, losses, mu, lr, tubes, wall_ms):
    return (
        f"step={step} L_local={_fmt(losses['L_local'])} L_mask={_fmt(losses['L_mask'])} "
        f"L_temp={_fmt(losses['L_temp'])} total={_fmt(losses['total'])} "
        f"mu={mu:.6f} lr={lr:.8f} tubes={tubes} wall_ms={wall_ms:.1f}"
    )


def parse_log_line(line: str) -> dict:
    return dict(part.split("=", 1) for part in line.split())


@dataclass
class TrainResult:
    student: VisionTransformer
    teacher: VisionTransformer
    state: DistillState
    step: int
    history: list


def pretrain(cfg: ExperimentConfig, videos: list[Video], out_dir, resume=None, force_resume=False, progress=None) -> TrainResult:
    """Train for ``cfg.run.steps`` optimiser steps, writing logs and checkpoints to ``out_dir``."""
    cfg.validate()
    det = deterministic_requested(cfg)
    set_determinism(det)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    student, teacher, state, optimizer = build_models(cfg)
    step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_hash=chash, force=force_resume)
        student.load_state_dict(ckpt.student)
        teacher.load_state_dict(ckpt.teacher)
        optimizer.load_state_dict(ckpt.optimizer)
        state = ckpt.state
        step = ckpt.step
        torch.set_rng_state(ckpt.rng["torch"])

    def checkpoint(path):
        save_checkpoint(
            path,
            Checkpoint(
                student=student.state_dict(),
                teacher=teacher.state_dict(),
                state=state,
                optimizer=optimizer.state_dict(),
                step=step,
                rng={"torch": torch.get_rng_state(), "seed": cfg.run.seed, "next_step": step},
                config_hash=chash,
                config_text=dump_config(cfg),
            ),
        )

    if resume is None:
        checkpoint(out_dir / "checkpoint_00000.pt")
    (out_dir / "config.txt").write_text(dump_config(cfg))
    sampler = TubeSampler(videos, cfg)
    total_steps = cfg.run.steps
    history = []
    log_path = out_dir / LOG_NAME
    with open(log_path, "a") as log_file:
        for micro in _prefetch(sampler, range(step, total_steps), cfg.run.prefetch):
            t0 = time.perf_counter()
            lr = cosine_lr(step, total_steps, cfg.distill.lr, cfg.distill.min_lr, cfg.distill.warmup_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            if cfg.distill.momentum_schedule == "cosine":
                mu = cosine_momentum(step, total_steps, cfg.distill.momentum)
            else:
                mu = cfg.distill.momentum
            losses = train_step(student, teacher, state, micro, optimizer, momentum=mu, step=step, dump_dir=out_dir)
            step += 1
            # timing is the one nondeterministic field; zero it so logs compare byte-for-byte
            wall = 0.0 if det else (time.perf_counter() - t0) * 1000.0
            line = format_log_line(step, losses, mu, lr, cfg.effective_batch, wall)
            log_file.write(line + "\n")
            log_file.flush()
            history.append(losses)
            if progress is not None:
                progress(step, losses)
            if cfg.run.checkpoint_every and step % cfg.run.checkpoint_every == 0:
                checkpoint(out_dir / f"checkpoint_{step:05d}.pt")
    if history:
        checkpoint(out_dir / "checkpoint_last.pt")
    return TrainResult(student, teacher, state, step, history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def to_tensor(images, dtype=torch.float32):
    arr = np.stack([np.asarray(im, dtype=np.float32) / (255.0 if np.asarray(im).dtype == np.uint8 else 1.0) for im in images])
    arr = (arr - np.asarray(NORM_MEAN, np.float32)) / np.asarray(NORM_STD, np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


@torch.no_grad()
def encoder_keys(model: VisionTransformer, images, batch_size: int = 64):
    """Last-layer keys ``(heads, N, head_dim)`` per image, plus the patch grid."""
    dtype = next(model.parameters()).dtype
    keys, grid = [], None
    for i in range(0, len(images), batch_size):
        out = model(to_tensor(images[i : i + batch_size], dtype))
        keys.extend(out.last_keys.to(torch.float64).numpy())
        grid = out.grid
    return keys, grid


def indicator_keys(foreground: np.ndarray, patch_size: int, min_fraction: float = 0.5):
    """Oracle keys: ``e1`` for patches that are mostly foreground, ``e2`` otherwise."""
    H, W = foreground.shape
    gh, gw = H // patch_size, W // patch_size
    frac = foreground[: gh * patch_size, : gw * patch_size].reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))
    fg = frac.ravel() >= min_fraction
    keys = np.zeros((gh * gw, 2))
    keys[fg, 0] = 1.0
    keys[~fg, 1] = 1.0
    return keys, (gh, gw)


def boxes_foreground(shape, boxes):
    fg = np.zeros(shape, dtype=bool)
    for x, y, w, h in boxes:
        fg[y : y + h, x : x + w] = True
    return fg


def discover_boxes(keys_list, grid, patch_size):
    return [discovery.lost(k, grid, patch_size) for k in keys_list]


def evaluate_corloc(model, images, gt_boxes, patch_size=None, threshold=0.5, image_ids=None):
    patch_size = patch_size or model.cfg.patch_size
    keys, grid = encoder_keys(model, images)
    preds = discover_boxes(keys, grid, patch_size)
    return discovery.corloc(preds, gt_boxes, threshold, image_ids)
