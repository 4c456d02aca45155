"""Binary mask algebra and crop geometry.

Rects are ``(x, y, w, h)`` tuples in pixel units with ``x`` the column.
All resampling is nearest-neighbour so that masks stay binary and warping
commutes exactly with unions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_ALPHA = 0.3
DEFAULT_RETRIES = 32
DEFAULT_AREA_RANGE = (0.4, 0.7)
DEFAULT_BBOX_PAD = 0.1


@dataclass(frozen=True)
class CropGeometry:
    x: int
    y: int
    w: int
    h: int
    out_h: int
    out_w: int
    flip: bool = False

    @property
    def rect(self):
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def identity(cls, height, width):
        return cls(0, 0, width, height, height, width, False)

    def validate(self, height, width):
        if self.w <= 0 or self.h <= 0 or self.out_h <= 0 or self.out_w <= 0:
            raise ValueError(f"degenerate crop geometry {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(f"crop {self.rect} outside source bounds {width}x{height}")

    def source_index(self):
        """Source (row, col) index vectors sampled for each output pixel."""
        rows = self.y + np.floor((np.arange(self.out_h) + 0.5) * self.h / self.out_h).astype(np.int64)
        offs = np.floor((np.arange(self.out_w) + 0.5) * self.w / self.out_w).astype(np.int64)
        # mirror source columns (not output columns) so crop-flip-resize == warp
        cols = self.x + (self.w - 1 - offs if self.flip else offs)
        return rows, cols


class LocalCrop(NamedTuple):
    geom: CropGeometry
    overlap: float
    fallback: bool


def _check_binary(mask):
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask values must be 0 or 1")
        mask = mask.astype(bool)
    return mask


def union_mask(masks: Sequence[np.ndarray], shape=None) -> np.ndarray:
    """Elementwise OR of ``masks``; an empty list needs ``shape``."""
    if len(masks) == 0:
        if shape is None:
            raise ValueError("shape is required for an empty mask list")
        return np.zeros(shape, dtype=bool)
    masks = [_check_binary(m) for m in masks]
    first = masks[0].shape
    for m in masks[1:]:
        if m.shape != first:
            raise ValueError(f"mask shape mismatch: {m.shape} vs {first}")
    return np.logical_or.reduce(masks)


def object_conditioned_mask(m_union: np.ndarray, m_k: np.ndarray) -> np.ndarray:
    """Keep background plus object ``k``; suppress every other instance.

    Computes ``min(1, (1 - m_union) + m_k)``. Overlapping instances are
    accepted; the clamp keeps the result binary.
    """
    m_union = _check_binary(m_union)
    m_k = _check_binary(m_k)
    if m_union.shape != m_k.shape:
        raise ValueError(f"mask shape mismatch: {m_k.shape} vs {m_union.shape}")
    if np.any(m_k & ~m_union):
        raise ValueError("object mask is not contained in the union mask")
    return ~m_union | m_k


def warp_mask(mask: np.ndarray, geom: CropGeometry) -> np.ndarray:
    mask = _check_binary(mask)
    geom.validate(*mask.shape[:2])
    rows, cols = geom.source_index()
    return mask[np.ix_(rows, cols)]


def warp_image(image: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """Crop, flip and nearest-resample an ``H x W (x C)`` array."""
    geom.validate(*image.shape[:2])
    rows, cols = geom.source_index()
    return image[rows][:, cols]


def crop_region(image: np.ndarray, geom: CropGeometry) -> np.ndarray:
    """The source pixels of ``geom`` at source resolution, flipped if requested."""
    geom.validate(*image.shape[:2])
    region = image[geom.y : geom.y + geom.h, geom.x : geom.x + geom.w]
    return region[:, ::-1] if geom.flip else region


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    return warp_image(image, CropGeometry(0, 0, w, h, out_h, out_w, False))


def overlap_ratio(crop, m_union: np.ndarray) -> float:
    """Fraction of the crop region covered by foreground.

    ``crop`` is a :class:`CropGeometry` or a plain rect, in the coordinate
    system of ``m_union``.
    """
    m_union = _check_binary(m_union)
    x, y, w, h = crop.rect if isinstance(crop, CropGeometry) else crop
    if w <= 0 or h <= 0:
        raise ValueError(f"zero-area crop {(x, y, w, h)}")
    H, W = m_union.shape
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"crop {(x, y, w, h)} outside mask bounds {W}x{H}")
    return float(m_union[y : y + h, x : x + w].sum()) / float(w * h)


def bbox_of_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    mask = _check_binary(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("bbox of an empty mask")
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def pad_bbox(rect, fraction: float, bounds: tuple[int, int]) -> tuple[int, int, int, int]:
    """Grow ``rect`` by ``fraction`` of its size on every side, clipped to ``bounds = (H, W)``."""
    x, y, w, h = rect
    H, W = bounds
    # round to nearest pixel, halves away from the box
    dx = int(np.floor(fraction * w + 0.5))
    dy = int(np.floor(fraction * h + 0.5))
    x0, y0 = max(0, x - dx), max(0, y - dy)
    x1, y1 = min(W, x + w + dx), min(H, y + h + dy)
    return (x0, y0, x1 - x0, y1 - y0)


def rect_union(rects):
    x0 = min(r[0] for r in rects)
    y0 = min(r[1] for r in rects)
    x1 = max(r[0] + r[2] for r in rects)
    y1 = max(r[1] + r[3] for r in rects)
    return (x0, y0, x1 - x0, y1 - y0)


def sample_local_crop(
    m_union: np.ndarray,
    object_bbox,
    area_range=DEFAULT_AREA_RANGE,
    alpha: float = DEFAULT_ALPHA,
    rng: np.random.Generator | None = None,
    *,
    out_size: tuple[int, int] = (32, 32),
    pad: float = DEFAULT_BBOX_PAD,
    retries: int = DEFAULT_RETRIES,
    aspect_range=(3 / 4, 4 / 3),
    flip_prob: float = 0.5,
) -> LocalCrop:
    """Rejection-sample a foreground-overlapping sub-rect of the padded bbox.

    Returns the first candidate with ``overlap_ratio >= alpha``; after
    ``retries`` failures the best candidate seen is returned with
    ``fallback=True``.
    """
    rng = rng if rng is not None else np.random.default_rng()
    m_union = _check_binary(m_union)
    bx, by, bw, bh = object_bbox
    if bw <= 0 or bh <= 0:
        raise ValueError(f"empty object bbox {object_bbox}")
    px, py, pw, ph = pad_bbox(object_bbox, pad, m_union.shape)
    lo, hi = area_range
    log_ar = np.log(aspect_range)
    best = None
    for _ in range(max(1, retries)):
        area = rng.uniform(lo, hi) * pw * ph
        ar = float(np.exp(rng.uniform(*log_ar)))
        w = int(np.clip(round(np.sqrt(area * ar)), 1, pw))
        h = int(np.clip(round(np.sqrt(area / ar)), 1, ph))
        x = px + int(rng.integers(pw - w + 1))
        y = py + int(rng.integers(ph - h + 1))
        flip = bool(rng.random() < flip_prob)
        geom = CropGeometry(x, y, w, h, out_size[0], out_size[1], flip)
        ratio = overlap_ratio(geom, m_union)
        if ratio >= alpha:
            return LocalCrop(geom, ratio, False)
        if best is None or ratio > best.overlap:
            best = LocalCrop(geom, ratio, True)
    return best


def sample_resized_crop(
    height: int,
    width: int,
    scale=(0.05, 0.4),
    rng: np.random.Generator | None = None,
    *,
    out_size: tuple[int, int] = (32, 32),
    aspect_range=(3 / 4, 4 / 3),
    flip_prob: float = 0.5,
    retries: int = 10,
) -> CropGeometry:
    """Random-resized-crop geometry over a whole ``height x width`` image."""
    rng = rng if rng is not None else np.random.default_rng()
    log_ar = np.log(aspect_range)
    flip = bool(rng.random() < flip_prob)
    for _ in range(retries):
        area = rng.uniform(*scale) * height * width
        ar = float(np.exp(rng.uniform(*log_ar)))
        w = int(round(np.sqrt(area * ar)))
        h = int(round(np.sqrt(area / ar)))
        if 0 < w <= width and 0 < h <= height:
            x = int(rng.integers(width - w + 1))
            y = int(rng.integers(height - h + 1))
            return CropGeometry(x, y, w, h, out_size[0], out_size[1], flip)
    # central crop fallback
    side = max(1, min(height, width, int(round(np.sqrt(scale[1] * height * width)))))
    return CropGeometry((width - side) // 2, (height - side) // 2, side, side, out_size[0], out_size[1], flip)
