"""Video frames, instance masks, tube sampling and the synthetic scene generator.

Frames are stored as ``H x W x 3`` arrays with intensities in ``[0, 1]``.
Instance masks carry a track id that is stable within a video, which is
all the trainer needs to build cross-time positives.

The annotation file is a small little-endian binary container::

    b"VINOMSK1" | u32 frames | u32 H | u32 W
    per frame:    u32 instance count
    per instance: u32 track_id | f32 confidence | u32 n_runs | n_runs * u32

Runs are row-major and alternate background/foreground, always starting
with a (possibly zero-length) background run.
"""

from __future__ import annotations

import colorsys
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import AnnotationParseError, ConfigError, DataError, InsufficientFramesError

MAGIC = b"VINOMSK1"
ANNOTATION_FILENAME = "annotations.vmsk"
FRAME_PATTERN = "frame_{:05d}.png"

DEFAULT_MAX_OBJECTS = 10
DEFAULT_MIN_CONFIDENCE = 0.5
DEFAULT_MIN_AREA_FRACTION = 0.001


@dataclass
class Frame:
    pixels: np.ndarray
    index: int

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass
class InstanceMask:
    grid: np.ndarray
    track_id: int
    confidence: float = 1.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.track_id < 0:
            raise ValueError(f"track_id must be non-negative, got {self.track_id}")

    @property
    def area(self) -> int:
        return int(self.grid.sum())


@dataclass
class Tube:
    frames: list[Frame]
    annotations: list[list[InstanceMask]]
    stride: int

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape


@dataclass
class Video:
    """A frame sequence (uint8 storage) with per-frame instance masks."""

    frames: list[np.ndarray]
    annotations: list[list[InstanceMask]]

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise DataError(
                f"{len(self.frames)} frames but {len(self.annotations)} annotation lists"
            )

    def __len__(self):
        return len(self.frames)

    def frame(self, i: int) -> Frame:
        pixels = self.frames[i]
        if pixels.dtype == np.uint8:
            pixels = pixels.astype(np.float32) / 255.0
        return Frame(pixels=pixels, index=i)


def filter_masks(
    masks: Sequence[InstanceMask],
    min_area: int = 0,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    max_objects: int = DEFAULT_MAX_OBJECTS,
) -> list[InstanceMask]:
    """Drop low-confidence or tiny masks and keep the ``max_objects`` largest."""
    kept = [m for m in masks if m.confidence >= min_confidence and m.area >= max(min_area, 1)]
    # stable sort keeps provider order among equal areas
    kept.sort(key=lambda m: -m.area)
    return kept[:max_objects]


def default_min_area(height: int, width: int) -> int:
    return int(math.ceil(DEFAULT_MIN_AREA_FRACTION * height * width))


def sample_tube(
    video: Video,
    T: int = 4,
    stride: int = 10,
    rng: np.random.Generator | None = None,
    *,
    start: int | None = None,
    min_area: int | None = None,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    max_objects: int = DEFAULT_MAX_OBJECTS,
) -> Tube:
    """Sample ``T`` frames at a fixed stride with a uniformly drawn start."""
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be positive")
    span = (T - 1) * stride + 1
    n_starts = len(video) - span + 1
    if n_starts < 1:
        raise InsufficientFramesError(
            f"insufficient frames: need {span} for T={T}, stride={stride}, video has {len(video)}"
        )
    if start is None:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(n_starts))
    elif not 0 <= start < n_starts:
        raise InsufficientFramesError(f"start {start} leaves fewer than {span} frames")

    frames, annotations = [], []
    for t in range(T):
        frame = video.frame(start + t * stride)
        if min_area is None:
            area = default_min_area(*frame.shape)
        else:
            area = min_area
        frames.append(frame)
        annotations.append(
            filter_masks(video.annotations[frame.index], area, min_confidence, max_objects)
        )
    return Tube(frames=frames, annotations=annotations, stride=stride)


def valid_starts(n_frames: int, T: int, stride: int) -> range:
    return range(max(0, n_frames - (T - 1) * stride))


# ---------------------------------------------------------------------------
# synthetic co-occurrence scenes
# ---------------------------------------------------------------------------

SHAPES = ("square", "disc", "diamond", "triangle")

def sprite_colors(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` saturated flat colours with evenly spread, randomly rotated hues.

    Hues are unique per video, so a sprite's colour identifies it.
    """
    hues = (rng.uniform() + np.arange(n) / max(n, 1) + rng.uniform(-0.1, 0.1, size=n) / max(n, 1)) % 1.0
    sat = rng.uniform(0.7, 1.0, size=n)
    val = rng.uniform(0.75, 1.0, size=n)
    return np.array([colorsys.hsv_to_rgb(h, s, v) for h, s, v in zip(hues, sat, val)], dtype=np.float32)


@dataclass
class SpriteSpec:
    x: float
    y: float
    size: int
    vx: float = 0.0
    vy: float = 0.0
    shape: str = "square"
    color: tuple[float, float, float] = (0.95, 0.15, 0.10)


@dataclass
class SyntheticSceneConfig:
    height: int = 64
    width: int = 64
    num_frames: int = 200
    num_sprites: int = 3
    sprite_size: tuple[int, int] = (12, 22)
    texture_density: float = 1.0
    ego_velocity: tuple[float, float] = (3.0, 0.0)
    sprite_speed: float = 1.0
    seed: int = 0
    # explicit sprites override num_sprites / sprite_size / sprite_speed
    sprites: list[SpriteSpec] | None = None

    def validate(self):
        if min(self.height, self.width, self.num_frames) <= 0:
            raise ConfigError("frame size and video length must be positive")
        if self.num_sprites < 0 or self.texture_density < 0 or self.sprite_speed < 0:
            raise ConfigError("sprite count, texture density and speed must be non-negative")
        lo, hi = self.sprite_size
        if lo <= 0 or hi < lo:
            raise ConfigError(f"invalid sprite size range {self.sprite_size}")
        if self.sprites is not None:
            for s in self.sprites:
                if s.size > min(self.height, self.width):
                    raise ConfigError(f"sprite of size {s.size} does not fit the frame")
                if s.shape not in SHAPES:
                    raise ConfigError(f"unknown sprite shape {s.shape!r}")
        elif self.num_sprites:
            rows, cols = _cell_grid(self.num_sprites)
            cell = min(self.height // rows, self.width // cols)
            if hi > cell - 2:
                raise ConfigError(
                    f"sprite size {hi} larger than its {cell}px cell "
                    f"({self.num_sprites} sprites in a {self.height}x{self.width} frame)"
                )


def _cell_grid(n):
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    return rows, cols


def sprite_shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stamp for a sprite shape; always 4-connected."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
    elif shape == "disc":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "diamond":
        m = np.abs(yy - c) + np.abs(xx - c) <= size / 2.0
    elif shape == "triangle":
        # apex at the top row, base on the bottom row
        half_width = (yy + 1) / size * (size / 2.0)
        m = np.abs(xx - c) <= half_width
    else:
        raise ConfigError(f"unknown sprite shape {shape!r}")
    return m


def _background_canvas(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Periodic high-contrast texture, twice the frame size in each direction."""
    H, W = 2 * cfg.height, 2 * cfg.width
    base = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    canvas = np.broadcast_to(base, (H, W, 3)).copy()
    n_rects = int(round(cfg.texture_density * H * W / 100.0))
    for _ in range(n_rects):
        h = int(rng.integers(2, 12))
        w = int(rng.integers(2, 12))
        y = int(rng.integers(H))
        x = int(rng.integers(W))
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        rows = np.arange(y, y + h) % H
        cols = np.arange(x, x + w) % W
        canvas[np.ix_(rows, cols)] = color
    if cfg.texture_density > 0:
        # thin high-contrast stripes, periodic in the canvas
        period = int(rng.integers(6, 14))
        phase = int(rng.integers(period))
        stripe = ((np.arange(W) + phase) % period) == 0
        canvas[:, stripe] = 1.0 - canvas[:, stripe]
    return canvas


def _random_sprites(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> tuple[list[SpriteSpec], list[tuple]]:
    """Place one sprite per grid cell; returns sprites and their confinement boxes."""
    if cfg.num_sprites == 0:
        return [], []
    rows, cols = _cell_grid(cfg.num_sprites)
    ch, cw = cfg.height // rows, cfg.width // cols
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    order = rng.permutation(len(cells))[: cfg.num_sprites]
    colors = sprite_colors(cfg.num_sprites, rng)
    sprites, bounds = [], []
    for i, ci in enumerate(order):
        r, c = cells[ci]
        # one pixel of margin keeps sprites in neighbouring cells from touching
        box = (c * cw + 1, r * ch + 1, (c + 1) * cw - 1, (r + 1) * ch - 1)
        size = int(rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1))
        x = float(rng.uniform(box[0], box[2] - size))
        y = float(rng.uniform(box[1], box[3] - size))
        vx, vy = (float(v) for v in rng.uniform(-cfg.sprite_speed, cfg.sprite_speed, size=2))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = tuple(float(v) for v in colors[i])
        sprites.append(SpriteSpec(x, y, size, vx, vy, shape, color))
        bounds.append(box)
    return sprites, bounds


def _bounce(pos, vel, lo, hi):
    """Reflect a 1-D trajectory into ``[lo, hi]``."""
    if hi <= lo:
        return lo, 0.0
    span = hi - lo
    p = (pos - lo) % (2 * span)
    if p > span:
        return lo + 2 * span - p, -vel
    return lo + p, vel


def generate_synthetic_video(cfg: SyntheticSceneConfig) -> Video:
    """Render flat sprites over an ego-translating textured background.

    Output depends only on ``cfg``; the same seed gives bit-identical
    frames and masks.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    canvas = _background_canvas(cfg, rng)
    if cfg.sprites is not None:
        sprites = list(cfg.sprites)
        bounds = [(0, 0, cfg.width, cfg.height)] * len(sprites)
    else:
        sprites, bounds = _random_sprites(cfg, rng)
    stamps = [sprite_shape_mask(s.shape, s.size) for s in sprites]
    ox0 = float(rng.uniform(0, canvas.shape[1]))
    oy0 = float(rng.uniform(0, canvas.shape[0]))

    H, W = cfg.height, cfg.width
    CH, CW = canvas.shape[:2]
    frames, annotations = [], []
    for t in range(cfg.num_frames):
        oy = int(round(oy0 + cfg.ego_velocity[1] * t))
        ox = int(round(ox0 + cfg.ego_velocity[0] * t))
        img = canvas[np.ix_((np.arange(H) + oy) % CH, (np.arange(W) + ox) % CW)].copy()
        masks = []
        for k, (s, stamp, box) in enumerate(zip(sprites, stamps, bounds)):
            x, _ = _bounce(s.x + s.vx * t, s.vx, box[0], box[2] - s.size)
            y, _ = _bounce(s.y + s.vy * t, s.vy, box[1], box[3] - s.size)
            xi, yi = int(round(x)), int(round(y))
            grid = np.zeros((H, W), dtype=bool)
            grid[yi : yi + s.size, xi : xi + s.size] = stamp
            img[grid] = s.color
            masks.append(InstanceMask(grid=grid, track_id=k, confidence=1.0))
        frames.append(np.round(img * 255.0).astype(np.uint8))
        annotations.append(masks)
    return Video(frames=frames, annotations=annotations)


# ---------------------------------------------------------------------------
# run-length annotation files
# ---------------------------------------------------------------------------


def rle_encode(grid: np.ndarray) -> np.ndarray:
    """Row-major run lengths, starting with a background run."""
    flat = np.asarray(grid, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(runs.sum())
    if total != shape[0] * shape[1]:
        raise ValueError(f"runs cover {total} pixels, expected {shape[0] * shape[1]}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def encode_annotations(annotations: Sequence[Sequence[InstanceMask]], height: int, width: int) -> bytes:
    out = [MAGIC, struct.pack("<III", len(annotations), height, width)]
    for masks in annotations:
        out.append(struct.pack("<I", len(masks)))
        for m in masks:
            if m.grid.shape != (height, width):
                raise DataError(f"mask shape {m.grid.shape} != ({height}, {width})")
            runs = rle_encode(m.grid)
            out.append(struct.pack("<IfI", m.track_id, m.confidence, len(runs)))
            out.append(runs.astype("<u4").tobytes())
    return b"".join(out)


def decode_annotations(data: bytes) -> tuple[list[list[InstanceMask]], tuple[int, int]]:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise AnnotationParseError("unexpected end of file", pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:8] != MAGIC:
        raise AnnotationParseError(f"bad magic {data[:8]!r}", 0)
    pos = 8
    n_frames, H, W = take("<III")
    if H == 0 or W == 0:
        raise AnnotationParseError("zero frame size in header", 12)
    annotations = []
    for _ in range(n_frames):
        (count,) = take("<I")
        masks = []
        for _ in range(count):
            inst_offset = pos
            track_id, conf, n_runs = take("<IfI")
            if pos + 4 * n_runs > len(data):
                raise AnnotationParseError("run-length data truncated", pos)
            runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=pos)
            pos += 4 * n_runs
            try:
                grid = rle_decode(runs, (H, W))
            except ValueError as exc:
                raise AnnotationParseError(f"malformed RLE: {exc}", inst_offset) from None
            masks.append(InstanceMask(grid=grid, track_id=int(track_id), confidence=float(conf)))
        annotations.append(masks)
    if pos != len(data):
        raise AnnotationParseError("trailing bytes after last frame", pos)
    return annotations, (H, W)


def save_annotations(path, annotations, height: int, width: int):
    Path(path).write_bytes(encode_annotations(annotations, height, width))


def load_annotations(path) -> list[list[InstanceMask]]:
    annotations, _ = decode_annotations(Path(path).read_bytes())
    return annotations


# ---------------------------------------------------------------------------
# image sequences on disk
# ---------------------------------------------------------------------------


def _to_uint8(pixels):
    if pixels.dtype == np.uint8:
        return pixels
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, pixels):
    Image.fromarray(_to_uint8(pixels)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_video(directory, video: Video):
    """Write numbered PNG frames plus one annotation file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise DataError(f"directory {directory} is not writable")
    for i, pixels in enumerate(video.frames):
        write_image(directory / FRAME_PATTERN.format(i), pixels)
    H, W = video.frames[0].shape[:2] if video.frames else (1, 1)
    save_annotations(directory / ANNOTATION_FILENAME, video.annotations, H, W)


def read_video(directory) -> Video:
    directory = Path(directory)
    ann_path = directory / ANNOTATION_FILENAME
    if not ann_path.exists():
        raise DataError(f"no {ANNOTATION_FILENAME} in {directory}")
    annotations, (H, W) = decode_annotations(ann_path.read_bytes())
    frames = [read_image(directory / FRAME_PATTERN.format(i)) for i in range(len(annotations))]
    for i, f in enumerate(frames):
        if f.shape[:2] != (H, W):
            raise DataError(f"frame {i} has shape {f.shape[:2]}, annotations say {(H, W)}")
    return Video(frames=frames, annotations=annotations)


def read_videos(directory) -> list[Video]:
    """One video if ``directory`` holds an annotation file, else one per subdirectory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    if (directory / ANNOTATION_FILENAME).exists():
        return [read_video(directory)]
    videos = [read_video(d) for d in sorted(directory.iterdir()) if (d / ANNOTATION_FILENAME).exists()]
    if not videos:
        raise DataError(f"no videos found under {directory}")
    return videos
