"""Scaled-down de-contextualisation experiment.

Train the toy encoder on a seeded co-occurrence-trap corpus with the full
objective and with a context-reliant control (unmasked teacher, local term
only), then compare LOST CorLoc of the frozen teachers on held-out frames.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .maskops import bbox_of_mask
from .training import evaluate_corloc, pretrain
from .videodata import SyntheticSceneConfig, Video, generate_synthetic_video


@dataclass
class CorpusSpec:
    n_videos: int = 10
    frames_per_video: int = 200
    heldout_videos: int = 4
    heldout_frames: int = 200
    sprites: tuple[int, int] = (2, 4)
    scene: SyntheticSceneConfig = field(
        default_factory=lambda: SyntheticSceneConfig(ego_velocity=(3.0, 1.0), texture_density=1.0, sprite_size=(20, 30))
    )


def make_corpus(spec: CorpusSpec, seed: int):
    """Training videos and held-out (frames, gt boxes) drawn from disjoint seeds."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1234]))

    def video(i, n_frames, offset):
        cfg = copy.deepcopy(spec.scene)
        cfg.num_frames = n_frames
        cfg.num_sprites = int(rng.integers(spec.sprites[0], spec.sprites[1] + 1))
        cfg.seed = int(np.random.SeedSequence([seed, offset, i]).generate_state(1)[0])
        vx, vy = spec.scene.ego_velocity
        # each video pans in its own direction at the same speed
        angle = rng.uniform(0, 2 * np.pi)
        speed = float(np.hypot(vx, vy))
        cfg.ego_velocity = (speed * float(np.cos(angle)), speed * float(np.sin(angle)))
        return generate_synthetic_video(cfg)

    train = [video(i, spec.frames_per_video, 0) for i in range(spec.n_videos)]
    per_video = int(np.ceil(spec.heldout_frames / spec.heldout_videos))
    images, boxes = [], []
    for i in range(spec.heldout_videos):
        v = video(i, per_video, 1)
        for f, masks in zip(v.frames, v.annotations):
            if len(images) == spec.heldout_frames:
                break
            images.append(f)
            boxes.append([bbox_of_mask(m.grid) for m in masks if m.area > 0])
    return train, images, boxes


def control_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Context-reliant control: unmasked teacher, no masked or temporal term."""
    c = copy.deepcopy(cfg)
    c.distill.lambda_mask = 0.0
    c.distill.lambda_temp = 0.0
    c.views.mask_teacher = False
    c.views.student_masked = False
    return c


@dataclass
class ArmResult:
    arm: str
    seed: int
    corloc: float
    seconds: float
    final_loss: float | None


def run_arm(cfg: ExperimentConfig, train: list[Video], images, boxes, out_dir, arm: str) -> ArmResult:
    t0 = time.perf_counter()
    res = pretrain(cfg, train, out_dir)
    score = evaluate_corloc(res.teacher, images, boxes)
    last = res.history[-1]["total"] if res.history else None
    return ArmResult(arm, cfg.run.seed, score.corloc, time.perf_counter() - t0, last)


def run_experiment(base: ExperimentConfig, seeds, out_root, spec: CorpusSpec | None = None, report=print):
    spec = spec or CorpusSpec()
    results = []
    for seed in seeds:
        train, images, boxes = make_corpus(spec, seed)
        for arm in ("vino", "control"):
            cfg = copy.deepcopy(base) if arm == "vino" else control_config(base)
            cfg.run.seed = seed
            r = run_arm(cfg, train, images, boxes, f"{out_root}/seed{seed}_{arm}", arm)
            report(f"seed={seed} arm={arm} corloc={r.corloc:.1f} time={r.seconds:.0f}s loss={r.final_loss}")
            results.append(r)
    return results


def summarize(results):
    out = {}
    for arm in ("vino", "control"):
        vals = [r.corloc for r in results if r.arm == arm]
        out[arm] = float(np.mean(vals)) if vals else float("nan")
    return out
