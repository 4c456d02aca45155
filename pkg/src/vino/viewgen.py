"""Per-tube view assembly: foreground-union teacher views, object-conditioned
student views and mask-guided local views under one shared crop geometry.

Views are float32 ``H x W x 3`` arrays in ``[0, 1]``. Suppressed pixels are
set to the normalisation mean, so they become exactly zero once the trainer
normalises its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import maskops
from .maskops import CropGeometry
from .videodata import Tube, write_image

NORM_MEAN = (0.5, 0.5, 0.5)
NORM_STD = (0.25, 0.25, 0.25)

# family ids mixed into per-view seeds
_TEACHER, _STUDENT, _LOCAL, _FULL = 0, 1, 2, 3


@dataclass
class PhotometricConfig:
    jitter_prob: float = 0.8
    # mild jitter: flat-coloured sprites are identified by colour alone, and
    # strong jitter or solarisation destroys that cue in the teacher targets
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    solarize_prob: float = 0.0
    solarize_threshold: float = 0.5
    seed: int | None = None

    def validate(self):
        for name in ("jitter_prob", "blur_prob", "solarize_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass
class ViewConfig:
    global_size: int = 64
    local_size: int = 32
    n_local: int = 4
    n_global: int = 1
    global_scale: tuple[float, float] = (0.5, 1.0)
    precrop_min_fraction: float = 0.5
    local_area_range: tuple[float, float] = (0.4, 0.7)
    local_alpha: float = 0.3
    local_retries: int = 32
    bbox_pad: float = 0.1
    fallback_local_scale: tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    min_view_mask_area: int = 4
    mask_teacher: bool = True
    student_masked: bool = True
    fill: tuple[float, float, float] = NORM_MEAN
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)


class LocalView(NamedTuple):
    t: int
    r: int
    image: np.ndarray
    geom: CropGeometry
    fallback: bool
    whole_image: bool
    seed: int


@dataclass
class ViewBatch:
    """All views of one tube.

    ``teacher_views`` holds foreground-union views for frames with at least
    one object. Frames without objects get an unmasked ``fallback_views``
    entry that only serves as the local-view target.
    """

    teacher_views: dict[int, np.ndarray]
    fallback_views: dict[int, np.ndarray]
    student_masked_views: list[tuple[int, int, np.ndarray]]
    local_views: list[LocalView]
    track_ids: dict[tuple[int, int], int]
    geometry: CropGeometry
    warped_masks: dict[int, list[np.ndarray]]
    seeds: dict[tuple, int] = field(default_factory=dict)

    @property
    def T(self):
        return len(self.warped_masks)

    def teacher_target_frames(self):
        return sorted(set(self.teacher_views) | set(self.fallback_views))


def _view_rng(base_seed: int, family: int, t: int, k: int):
    seed = int(np.random.SeedSequence([base_seed, family, t, k]).generate_state(1)[0])
    return seed, np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def make_precrop(annotations, frame_shape, min_fraction: float = 0.5) -> CropGeometry:
    """Shared scene window containing every object of the tube.

    The union bbox over all frames is grown about its centre to at least
    ``min_fraction`` of the frame area, then clipped to the frame.
    """
    H, W = frame_shape
    rects = [maskops.bbox_of_mask(m.grid) for masks in annotations for m in masks if m.area > 0]
    if not rects:
        return CropGeometry.identity(H, W)
    x, y, w, h = maskops.rect_union(rects)
    target = min_fraction * H * W
    if w * h < target:
        s = np.sqrt(target / (w * h))
        nw, nh = min(W, int(np.ceil(w * s))), min(H, int(np.ceil(h * s)))
        # one side saturated: spend the remaining area on the other side
        if nw * nh < target:
            if nw == W:
                nh = min(H, int(np.ceil(target / nw)))
            else:
                nw = min(W, int(np.ceil(target / nh)))
        cx, cy = x + w / 2.0, y + h / 2.0
        nx = int(np.clip(np.floor(cx - nw / 2.0), 0, W - nw))
        ny = int(np.clip(np.floor(cy - nh / 2.0), 0, H - nh))
        # keep containment exact after rounding
        nx = min(nx, x)
        ny = min(ny, y)
        nw = max(nw, x + w - nx)
        nh = max(nh, y + h - ny)
        x, y, w, h = nx, ny, nw, nh
    return CropGeometry(x, y, w, h, h, w, False)


def sample_global_crop(precrop: CropGeometry, cfg: ViewConfig, rng) -> CropGeometry:
    """Random sub-rect of the pre-crop, resized to the global input size."""
    sub = maskops.sample_resized_crop(
        precrop.h,
        precrop.w,
        cfg.global_scale,
        rng,
        out_size=(cfg.global_size, cfg.global_size),
        flip_prob=cfg.flip_prob,
    )
    return CropGeometry(
        precrop.x + sub.x, precrop.y + sub.y, sub.w, sub.h, sub.out_h, sub.out_w, sub.flip
    )


# ---------------------------------------------------------------------------
# photometric augmentation
# ---------------------------------------------------------------------------


def _grayscale(img):
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def photometric_augment(image, config: PhotometricConfig, rng=None, out_size=None) -> np.ndarray:
    """Colour jitter, Gaussian blur and solarisation, then resize.

    Pixel positions are untouched until the final nearest-neighbour resize.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    img = np.asarray(image, dtype=np.float32).copy()
    if rng.random() < config.jitter_prob:
        # fixed order; factors drawn even when a strength is zero to keep streams aligned
        b = 1.0 + rng.uniform(-config.brightness, config.brightness)
        c = 1.0 + rng.uniform(-config.contrast, config.contrast)
        s = 1.0 + rng.uniform(-config.saturation, config.saturation)
        img = img * b
        mean = _grayscale(img).mean()
        img = (img - mean) * c + mean
        gray = _grayscale(img)[..., None]
        img = (img - gray) * s + gray
        img = np.clip(img, 0.0, 1.0)
    if rng.random() < config.blur_prob:
        sigma = rng.uniform(*config.blur_sigma)
        img = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    if rng.random() < config.solarize_prob:
        img = np.where(img >= config.solarize_threshold, 1.0 - img, img)
    if out_size is not None:
        img = maskops.resize_nearest(img, *out_size)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# view families
# ---------------------------------------------------------------------------


def _full_view(pixels, geom: CropGeometry, cfg: ViewConfig, rng):
    region = maskops.crop_region(pixels, geom)
    return photometric_augment(region, cfg.photometric, rng, (geom.out_h, geom.out_w))


def _fill(image, keep, fill):
    out = np.empty_like(image)
    out[:] = np.asarray(fill, dtype=image.dtype)
    out[keep] = image[keep]
    return out


def build_teacher_view(pixels, geom: CropGeometry, masks, cfg: ViewConfig, rng):
    """Foreground-union view, or ``None`` when the frame has no objects.

    ``masks`` are already in the global-crop coordinate system.
    """
    if len(masks) == 0:
        return None
    m_union = maskops.union_mask(masks)
    if not m_union.any():
        return None
    full = _full_view(pixels, geom, cfg, rng)
    return _fill(full, m_union, cfg.fill)


def build_student_masked_views(pixels, geom: CropGeometry, masks, cfg: ViewConfig, rng):
    """One object-conditioned view per mask, each with its own photometric draw."""
    if len(masks) == 0:
        return []
    m_union = maskops.union_mask(masks)
    views = []
    for k, m in enumerate(masks):
        full = _full_view(pixels, geom, cfg, rng)
        views.append((k, _fill(full, maskops.object_conditioned_mask(m_union, m), cfg.fill)))
    return views


def build_local_views(pixels, geom: CropGeometry, masks, R: int, cfg: ViewConfig, rng, *, t=0, base_seed=None):
    """``R`` local views, round-robin over objects.

    Object crops are sub-rects of the global window satisfying the
    foreground-overlap constraint; without objects, random small crops of the
    whole frame are used instead.
    """
    if R <= 0:
        return []
    out_size = (cfg.local_size, cfg.local_size)
    views = []
    if len(masks) == 0:
        H, W = pixels.shape[:2]
        for r in range(R):
            seed, vrng = _local_rng(rng, base_seed, t, r)
            lg = maskops.sample_resized_crop(
                H, W, cfg.fallback_local_scale, vrng, out_size=out_size, flip_prob=cfg.flip_prob
            )
            img = photometric_augment(maskops.crop_region(pixels, lg), cfg.photometric, vrng, out_size)
            views.append(LocalView(t, r, img, lg, False, True, seed))
        return views

    window = maskops.warp_image(pixels, geom)
    m_union = maskops.union_mask(masks)
    bboxes = [maskops.bbox_of_mask(m) for m in masks]
    for r in range(R):
        seed, vrng = _local_rng(rng, base_seed, t, r)
        crop = maskops.sample_local_crop(
            m_union,
            bboxes[r % len(masks)],
            cfg.local_area_range,
            cfg.local_alpha,
            vrng,
            out_size=out_size,
            pad=cfg.bbox_pad,
            retries=cfg.local_retries,
            flip_prob=cfg.flip_prob,
        )
        lg = crop.geom
        img = photometric_augment(maskops.crop_region(window, lg), cfg.photometric, vrng, out_size)
        views.append(LocalView(t, r, img, lg, crop.fallback, False, seed))
    return views


def _local_rng(rng, base_seed, t, r):
    if base_seed is None:
        seed = int(rng.integers(2**63))
        return seed, np.random.default_rng(seed)
    return _view_rng(base_seed, _LOCAL, t, r)


def warp_tube_masks(tube: Tube, geom: CropGeometry, min_area: int = 1):
    """Warp every retained mask into the crop; drop those left (nearly) empty."""
    warped, ids = {}, {}
    for t, masks in enumerate(tube.annotations):
        kept = []
        for m in masks:
            w = maskops.warp_mask(m.grid, geom)
            if w.sum() >= max(1, min_area):
                ids[(t, len(kept))] = m.track_id
                kept.append(w)
        warped[t] = kept
    return warped, ids


def build_tube_views(tube: Tube, cfg: ViewConfig, rng) -> ViewBatch:
    """Pre-crop, one shared global crop, then every view family."""
    cfg.photometric.validate()
    base_seed = int(rng.integers(2**63))
    geo_rng = np.random.default_rng(np.random.SeedSequence([base_seed, 99]))
    precrop = make_precrop(tube.annotations, tube.shape, cfg.precrop_min_fraction)
    geom = sample_global_crop(precrop, cfg, geo_rng)
    warped, track_ids = warp_tube_masks(tube, geom, cfg.min_view_mask_area)

    teacher, fallback, students, locals_ = {}, {}, [], []
    seeds = {}
    for t, frame in enumerate(tube.frames):
        masks = warped[t]
        if masks and cfg.mask_teacher:
            seed, vrng = _view_rng(base_seed, _TEACHER, t, 0)
            teacher[t] = build_teacher_view(frame.pixels, geom, masks, cfg, vrng)
            seeds[("teacher", t, 0)] = seed
        else:
            seed, vrng = _view_rng(base_seed, _FULL, t, 0)
            full = _full_view(frame.pixels, geom, cfg, vrng)
            if masks:
                # unmasked-teacher control: the full view is the teacher input
                teacher[t] = full
            else:
                fallback[t] = full
            seeds[("full", t, 0)] = seed
        if cfg.student_masked and masks:
            seed, vrng = _view_rng(base_seed, _STUDENT, t, 0)
            students.extend((t, k, img) for k, img in build_student_masked_views(frame.pixels, geom, masks, cfg, vrng))
            seeds[("student", t, 0)] = seed
        for lv in build_local_views(frame.pixels, geom, masks, cfg.n_local, cfg, None, t=t, base_seed=base_seed):
            locals_.append(lv)
            seeds[("local", t, lv.r)] = lv.seed
    return ViewBatch(
        teacher_views=teacher,
        fallback_views=fallback,
        student_masked_views=students,
        local_views=locals_,
        track_ids=track_ids,
        geometry=geom,
        warped_masks=warped,
        seeds=seeds,
    )


def normalize(image, mean=NORM_MEAN, std=NORM_STD):
    return (np.asarray(image, dtype=np.float32) - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def dump_views(batch: ViewBatch, directory):
    """Write every view as a numbered PNG plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = batch.geometry
    ggeo = f"{g.x},{g.y},{g.w},{g.h},{g.out_h},{g.out_w},{int(g.flip)}"
    lines = []
    entries = [("teacher", t, 0, img, ggeo, batch.seeds.get(("teacher", t, 0), batch.seeds.get(("full", t, 0))))
               for t, img in sorted(batch.teacher_views.items())]
    entries += [("fallback", t, 0, img, ggeo, batch.seeds.get(("full", t, 0))) for t, img in sorted(batch.fallback_views.items())]
    entries += [("student", t, k, img, ggeo, batch.seeds.get(("student", t, 0))) for t, k, img in batch.student_masked_views]
    for lv in batch.local_views:
        lg = lv.geom
        entries.append(
            ("local", lv.t, lv.r, lv.image, f"{lg.x},{lg.y},{lg.w},{lg.h},{lg.out_h},{lg.out_w},{int(lg.flip)}", lv.seed)
        )
    for i, (family, t, kr, img, geo, seed) in enumerate(entries):
        name = f"{i:04d}_{family}_t{t}_{kr}.png"
        write_image(directory / name, img)
        lines.append(f"{name} {family} {t} {kr} {geo} {seed}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return len(entries)
