"""LOST-style single-object discovery on frozen patch keys, IoU and CorLoc.

A patch graph connects patches whose L2-normalised keys have positive
cosine similarity. The seed is the patch with the fewest neighbours; it is
expanded to the patches positively correlated with it, restricted to the
seed's 4-connected region on the patch grid.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PatchGraph:
    similarity: np.ndarray
    adjacency: np.ndarray
    grid: tuple[int, int] | None = None

    @property
    def n(self):
        return self.similarity.shape[0]

    def degrees(self):
        """Neighbour counts excluding self."""
        A = self.adjacency.copy()
        np.fill_diagonal(A, False)
        return A.sum(axis=1)


@dataclass
class DetectionBox:
    rect: tuple[int, int, int, int]
    seed: int
    members: frozenset = field(default_factory=frozenset)


def flatten_keys(keys) -> np.ndarray:
    """``(heads, N, head_dim)`` keys to ``(N, heads * head_dim)``."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim == 3:
        keys = keys.transpose(1, 0, 2).reshape(keys.shape[1], -1)
    return keys


def build_patch_graph(keys, grid=None) -> PatchGraph:
    keys = flatten_keys(keys)
    if keys.shape[0] < 1:
        raise ValueError("need at least one patch")
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm key rows treated as isolated patches")
    # normalise after the dot product so exactly orthogonal keys give exactly 0
    # and the sign that decides adjacency never depends on rounding
    outer = norms * norms.T
    sim = np.divide(keys @ keys.T, outer, out=np.zeros((len(keys), len(keys))), where=outer > 0)
    np.clip(sim, -1.0, 1.0, out=sim)
    adj = sim > 0
    # self-adjacency is kept on the diagonal and ignored by degree counts
    np.fill_diagonal(adj, True)
    return PatchGraph(similarity=sim, adjacency=adj, grid=tuple(grid) if grid is not None else None)


SUM_TIE_TOL = 1e-9


def select_seed(graph: PatchGraph) -> int:
    """Lowest degree; ties by lowest off-diagonal similarity sum, then index.

    Sums within ``SUM_TIE_TOL`` of the minimum count as tied, so patches with
    identical keys resolve to the lowest index whatever the summation order.
    """
    deg = graph.degrees()
    sim = graph.similarity.copy()
    np.fill_diagonal(sim, 0.0)
    ssum = sim.sum(axis=1)
    cand = np.flatnonzero(deg == deg.min())
    best = ssum[cand].min()
    return int(cand[ssum[cand] <= best + SUM_TIE_TOL][0])


def expand_seed(graph: PatchGraph, seed: int) -> frozenset:
    candidates = graph.similarity[seed] > 0
    candidates[seed] = True
    if graph.grid is None:
        return frozenset(int(i) for i in np.flatnonzero(candidates))
    gh, gw = graph.grid
    cand = candidates.reshape(gh, gw)
    seen = np.zeros_like(cand)
    r0, c0 = divmod(seed, gw)
    seen[r0, c0] = True
    queue = deque([(r0, c0)])
    while queue:
        r, c = queue.popleft()
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < gh and 0 <= cc < gw and cand[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                queue.append((rr, cc))
    return frozenset(int(i) for i in np.flatnonzero(seen.ravel()))


def box_from_patches(members, patch_size: int, image_size: tuple[int, int], seed: int | None = None) -> DetectionBox:
    """Tight pixel box around member patch cells; ``image_size`` is ``(H, W)``."""
    if not members:
        raise ValueError("cannot box an empty patch set")
    H, W = image_size
    gw = W // patch_size
    rows = [i // gw for i in members]
    cols = [i % gw for i in members]
    x0, y0 = min(cols) * patch_size, min(rows) * patch_size
    x1, y1 = (max(cols) + 1) * patch_size, (max(rows) + 1) * patch_size
    return DetectionBox(
        rect=(x0, y0, x1 - x0, y1 - y0),
        seed=min(members) if seed is None else seed,
        members=frozenset(members),
    )


def lost(keys, grid: tuple[int, int], patch_size: int) -> DetectionBox:
    graph = build_patch_graph(keys, grid)
    seed = select_seed(graph)
    members = expand_seed(graph, seed)
    return box_from_patches(members, patch_size, (grid[0] * patch_size, grid[1] * patch_size), seed)


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError(f"zero-area rect in iou: {a}, {b}")
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


@dataclass
class CorLocResult:
    corloc: float
    per_image: list
    excluded: list

    @property
    def n_evaluated(self):
        return len(self.per_image)


def corloc(predictions, ground_truth, threshold: float = 0.5, image_ids=None) -> CorLocResult:
    """Percentage of images whose box hits any ground-truth box with IoU >= threshold.

    Images without ground truth are excluded from the denominator and listed
    in ``excluded``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth are not aligned")
    ids = list(image_ids) if image_ids is not None else list(range(len(predictions)))
    per_image, excluded = [], []
    hits = 0
    for img_id, pred, gts in zip(ids, predictions, ground_truth):
        if not gts:
            excluded.append(img_id)
            continue
        rect = pred.rect if isinstance(pred, DetectionBox) else pred
        best = max(iou(rect, g) for g in gts)
        hit = best >= threshold
        hits += hit
        per_image.append({"image": img_id, "iou": best, "hit": bool(hit),
                          "box": list(rect), "seed": getattr(pred, "seed", None)})
    if not per_image:
        raise ValueError("no evaluable images")
    return CorLocResult(corloc=100.0 * hits / len(per_image), per_image=per_image, excluded=excluded)


def corloc_from_ious(ious, threshold: float = 0.5) -> float:
    ious = list(ious)
    if not ious:
        raise ValueError("no evaluable images")
    return 100.0 * sum(v >= threshold for v in ious) / len(ious)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_boxes(path) -> dict[str, list[tuple[int, int, int, int]]]:
    """``image_id x y w h`` per line; blank lines and ``#`` comments ignored."""
    boxes: dict[str, list] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'image_id x y w h', got {line!r}")
        boxes.setdefault(parts[0], []).append(tuple(int(float(v)) for v in parts[1:]))
    return boxes


def write_boxes(path, boxes: dict):
    lines = [f"{img} {x} {y} {w} {h}" for img in sorted(boxes) for (x, y, w, h) in boxes[img]]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_report(path, result: CorLocResult, extra=None):
    report = {"corloc": round(result.corloc, 6), "n_images": result.n_evaluated,
              "excluded": result.excluded, "per_image": result.per_image}
    if extra:
        report.update(extra)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
