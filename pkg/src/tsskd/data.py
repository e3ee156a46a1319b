"""Synthetic tracking scenes with exact ground truth.

Each sample is a template patch ``z`` showing the target centred, and a larger
search region ``x`` in which the same object appears translated and slightly
rescaled among distractors and noise. Boxes are ``(cx, cy, w, h)`` in
continuous pixel coordinates where the image spans ``[0, size]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import read_tensor, write_tensor
from .errors import ValidationError

IGNORE = 0
POS_IOU = 0.6
NEG_IOU = 0.3
SHAPES = ("rectangle", "ellipse", "cross")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(cx, cy, w, h)`` rectangles."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValidationError(f"iou needs positive extents, got {a} and {b}")
    return float(iou_many(np.asarray(a, float)[None], np.asarray(b, float))[0])


def iou_many(boxes: np.ndarray, box: np.ndarray) -> np.ndarray:
    """IoU of every row of ``boxes`` (``[..., 4]``) against a single box."""
    boxes = np.asarray(boxes, dtype=float)
    ax0 = boxes[..., 0] - boxes[..., 2] / 2
    ax1 = boxes[..., 0] + boxes[..., 2] / 2
    ay0 = boxes[..., 1] - boxes[..., 3] / 2
    ay1 = boxes[..., 1] + boxes[..., 3] / 2
    bx0, bx1 = box[0] - box[2] / 2, box[0] + box[2] / 2
    by0, by1 = box[1] - box[3] / 2, box[1] + box[3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = boxes[..., 2] * boxes[..., 3] + box[2] * box[3] - inter
    # Corner rounding can push identical boxes a few ulps past 1.
    return np.clip(inter / union, 0.0, 1.0)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor placement over a square score map.

    Cell ``(i, j)`` is centred at ``origin + stride * (j, i)`` in search pixels.
    ``ratios`` are height/width aspect ratios at a single scale ``base_size``.
    """

    score_size: int = 9
    stride: int = 4
    origin: float = 15.5
    base_size: float = 16.0
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    @property
    def k(self) -> int:
        return len(self.ratios)

    def centers(self) -> np.ndarray:
        return self.origin + self.stride * np.arange(self.score_size, dtype=float)

    def boxes(self) -> np.ndarray:
        """Anchor boxes as ``[k, S, S, 4]``."""
        c = self.centers()
        cy, cx = np.meshgrid(c, c, indexing="ij")
        out = np.empty((self.k, self.score_size, self.score_size, 4))
        for a, r in enumerate(self.ratios):
            out[a, ..., 0] = cx
            out[a, ..., 1] = cy
            out[a, ..., 2] = self.base_size / math.sqrt(r)
            out[a, ..., 3] = self.base_size * math.sqrt(r)
        return out


@dataclass
class GroundTruth:
    """Supervision for one sample (or a batch when arrays carry a leading axis).

    ``anchor_labels`` is ``[k, S, S]`` in {+1, -1, IGNORE}; ``reg_targets`` is
    ``[4k, S, S]`` laid out like the regression head (channel ``4a + c``);
    ``score_labels`` is the ``[S, S]`` labelling used by the similarity head.
    """

    anchor_labels: np.ndarray
    reg_targets: np.ndarray
    score_labels: np.ndarray
    box: np.ndarray
    degenerate: bool = False

    @property
    def cls_labels(self) -> np.ndarray:
        return self.anchor_labels


def encode_box(anchors: np.ndarray, box: Sequence[float]) -> np.ndarray:
    """Normalized offsets ``(dx, dy, dw, dh)`` of ``box`` against each anchor."""
    return np.stack(
        [
            (box[0] - anchors[..., 0]) / anchors[..., 2],
            (box[1] - anchors[..., 1]) / anchors[..., 3],
            np.log(box[2] / anchors[..., 2]),
            np.log(box[3] / anchors[..., 3]),
        ],
        axis=-1,
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_box`; ``deltas`` is ``[..., 4]``."""
    dw = np.clip(deltas[..., 2], -6, 6)
    dh = np.clip(deltas[..., 3], -6, 6)
    return np.stack(
        [
            anchors[..., 0] + deltas[..., 0] * anchors[..., 2],
            anchors[..., 1] + deltas[..., 1] * anchors[..., 3],
            anchors[..., 2] * np.exp(dw),
            anchors[..., 3] * np.exp(dh),
        ],
        axis=-1,
    )


def assign_anchors(box: Sequence[float], grid: AnchorGrid) -> GroundTruth:
    """Label anchors by IoU with ``box`` (>= 0.6 positive, <= 0.3 negative)."""
    box = np.asarray(box, dtype=float)
    if box[2] <= 0 or box[3] <= 0:
        raise ValidationError(f"box must have positive extents, got {box}")
    anchors = grid.boxes()
    overlaps = iou_many(anchors, box)
    labels = np.full(overlaps.shape, IGNORE, dtype=np.int8)
    labels[overlaps >= POS_IOU] = 1
    labels[overlaps <= NEG_IOU] = -1
    deltas = encode_box(anchors, box)  # k, S, S, 4
    reg = deltas.transpose(0, 3, 1, 2).reshape(grid.k * 4, grid.score_size, grid.score_size)

    c = grid.centers()
    cy, cx = np.meshgrid(c, c, indexing="ij")
    dist = np.hypot(cx - box[0], cy - box[1])
    score = np.full(dist.shape, IGNORE, dtype=np.int8)
    score[dist <= grid.stride] = 1
    score[dist > 2 * grid.stride] = -1
    return GroundTruth(labels, reg, score, box, degenerate=not np.any(labels == 1))


@dataclass(frozen=True)
class SceneSpec:
    """Distribution of synthetic scenes.

    Ranges are inclusive ``(low, high)`` pairs; the target's base side is drawn
    from ``target_size`` and its aspect (h/w) log-uniformly from ``aspect``.
    """

    template_size: int = 32
    search_size: int = 64
    shapes: tuple[str, ...] = SHAPES
    target_size: tuple[float, float] = (14.0, 19.0)
    aspect: tuple[float, float] = (0.6, 1.7)
    scale_jitter: tuple[float, float] = (0.92, 1.08)
    translation: float = 12.0
    distractors: tuple[int, int] = (0, 2)
    noise: tuple[float, float] = (0.02, 0.12)
    color_low: float = 0.15
    grid: AnchorGrid = field(default_factory=AnchorGrid)

    def __post_init__(self):
        for name in ("target_size", "aspect", "scale_jitter", "distractors", "noise"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValidationError(f"SceneSpec.{name} must satisfy low <= high, got {(lo, hi)}")
        if self.target_size[0] <= 0 or self.translation < 0:
            raise ValidationError("SceneSpec sizes must be positive")
        if self.template_size > self.search_size:
            raise ValidationError("template patch larger than search region")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValidationError(f"unknown shape families {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["ratios"] = list(self.grid.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        grid = d.pop("grid", None)
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if grid is not None:
            grid = dict(grid)
            grid["ratios"] = tuple(grid["ratios"])
            kwargs["grid"] = AnchorGrid(**grid)
        return cls(**kwargs)


@dataclass
class TrainSample:
    z: np.ndarray
    x: np.ndarray
    box: np.ndarray
    gt: GroundTruth
    meta: dict

    @property
    def anchors(self) -> GroundTruth:
        return self.gt


def _shape_mask(kind: str, size: int, box: Sequence[float]) -> np.ndarray:
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy, w, h = box
    dx, dy = (xx - cx) / (w / 2), (yy - cy) / (h / 2)
    if kind == "rectangle":
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if kind == "ellipse":
        return dx * dx + dy * dy <= 1
    bar = 1 / 3
    return ((np.abs(dx) <= 1) & (np.abs(dy) <= bar)) | ((np.abs(dx) <= bar) & (np.abs(dy) <= 1))


def _background(rng: np.random.Generator, size: int, level: np.ndarray, tilt: np.ndarray, noise: float) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = level[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy
    return img + noise * rng.standard_normal((3, size, size))


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray) -> None:
    img[:, mask] = color[:, None]


def _distinct_color(rng: np.random.Generator, avoid: np.ndarray, low: float) -> np.ndarray:
    for _ in range(20):
        c = rng.uniform(low, 1.0, 3)
        if np.abs(c - avoid).max() > 0.3:
            return c
    return np.clip(1.0 + low - avoid, low, 1.0)


def _draw_sample(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    zs, xs = spec.template_size, spec.search_size
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    color = rng.uniform(spec.color_low, 1.0, 3)
    side = rng.uniform(*spec.target_size)
    aspect = math.exp(rng.uniform(math.log(spec.aspect[0]), math.log(spec.aspect[1])))
    w0, h0 = side / math.sqrt(aspect), side * math.sqrt(aspect)
    scale = rng.uniform(*spec.scale_jitter)
    w, h = w0 * scale, h0 * scale
    lim_x = max(0.0, min(spec.translation, xs / 2 - w / 2 - 0.5))
    lim_y = max(0.0, min(spec.translation, xs / 2 - h / 2 - 0.5))
    cx = xs / 2 + rng.uniform(-lim_x, lim_x)
    cy = xs / 2 + rng.uniform(-lim_y, lim_y)
    box = np.array([cx, cy, w, h])
    noise = rng.uniform(*spec.noise)
    n_distract = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))

    level = rng.uniform(0.0, 0.5, 3)
    tilt = rng.uniform(-0.3, 0.3, (3, 2))
    z = _background(rng, zs, level, tilt, noise)
    _paint(z, _shape_mask(kind, zs, (zs / 2, zs / 2, w0, h0)), color)

    x = _background(rng, xs, level, tilt, noise)
    placed = []
    for _ in range(n_distract):
        for _attempt in range(30):
            dside = rng.uniform(*spec.target_size)
            dasp = math.exp(rng.uniform(math.log(spec.aspect[0]), math.log(spec.aspect[1])))
            dbox = np.array([rng.uniform(0, xs), rng.uniform(0, xs), dside / math.sqrt(dasp), dside * math.sqrt(dasp)])
            if iou_many(dbox[None], box)[0] == 0.0:
                break
        others = [s for s in spec.shapes if s != kind] or [kind]
        dkind = others[int(rng.integers(len(others)))]
        dcolor = _distinct_color(rng, color, spec.color_low)
        _paint(x, _shape_mask(dkind, xs, dbox), dcolor)
        placed.append(dbox)
    _paint(x, _shape_mask(kind, xs, box), color)
    meta = {
        "distractor_count": n_distract,
        "noise_level": float(noise),
        "shape": kind,
        "template_wh": [float(w0), float(h0)],
    }
    return (z - 0.5), (x - 0.5), box, meta


def generate(spec: SceneSpec, count: int, seed: int, dtype=np.float32) -> list[TrainSample]:
    """Draw ``count`` non-degenerate samples; identical for identical arguments.

    Sample ``i`` uses generator state derived from ``(seed, i, attempt)``; draws
    with no positive anchor are rejected and redrawn with the next attempt.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    out = []
    for i in range(count):
        for attempt in range(1000):
            rng = np.random.default_rng([seed, i, attempt])
            z, x, box, meta = _draw_sample(spec, rng)
            gt = assign_anchors(box, spec.grid)
            if not gt.degenerate:
                break
        else:  # pragma: no cover - the default spec never gets here
            raise ValidationError("scene spec yields only degenerate samples")
        meta.update(seed=seed, index=i, attempt=attempt)
        out.append(TrainSample(z.astype(dtype), x.astype(dtype), box, gt, meta))
    return out


def collate(samples: Sequence[TrainSample]) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Stack samples into batched arrays."""
    z = np.stack([s.z for s in samples])
    x = np.stack([s.x for s in samples])
    gt = GroundTruth(
        np.stack([s.gt.anchor_labels for s in samples]),
        np.stack([s.gt.reg_targets for s in samples]),
        np.stack([s.gt.score_labels for s in samples]),
        np.stack([s.box for s in samples]),
        degenerate=any(s.gt.degenerate for s in samples),
    )
    return z, x, gt


def split(samples: Sequence[TrainSample], ratios: Sequence[float] = (0.7, 0.15, 0.15)):
    """Partition into (train, val, search_small), stratified by distractor count.

    Each stratum is divided by largest remainder so the per-stratum counts
    track the ratios; order within a split follows the original index.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValidationError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    buckets: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        buckets.setdefault(int(s.meta.get("distractor_count", 0)), []).append(idx)
    assignment = [0] * len(samples)
    for key in sorted(buckets):
        members = buckets[key]
        quotas = [r * len(members) for r in ratios]
        counts = [int(math.floor(q)) for q in quotas]
        order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in order[: len(members) - sum(counts)]:
            counts[i] += 1
        pos = 0
        for part, c in enumerate(counts):
            for idx in members[pos : pos + c]:
                assignment[idx] = part
            pos += c
    parts: tuple[list, list, list] = ([], [], [])
    for idx, s in enumerate(samples):
        parts[assignment[idx]].append(s)
    return parts


def save_dataset(path: str | Path, samples: Sequence[TrainSample], spec: SceneSpec, seed: int, splits=None) -> None:
    """Write ``index.json`` plus ``samples.bin`` (z then x per sample)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "samples.bin", "wb") as fp:
        for s in samples:
            write_tensor(fp, s.z)
            write_tensor(fp, s.x)
    index = {
        "count": len(samples),
        "seed": seed,
        "spec": spec.to_dict(),
        "boxes": [list(map(float, s.box)) for s in samples],
        "meta": [s.meta for s in samples],
        "splits": splits,
    }
    (path / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset(path: str | Path) -> tuple[list[TrainSample], SceneSpec, dict]:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    spec = SceneSpec.from_dict(index["spec"])
    samples = []
    with open(path / "samples.bin", "rb") as fp:
        for box, meta in zip(index["boxes"], index["meta"]):
            z = read_tensor(fp).data
            x = read_tensor(fp).data
            box = np.asarray(box)
            samples.append(TrainSample(z, x, box, assign_anchors(box, spec.grid), meta))
    return samples, spec, index


def split_by_index(samples: Sequence[TrainSample], splits: dict | None):
    if not splits:
        return split(samples)
    return tuple([samples[i] for i in splits[name]] for name in ("train", "val", "search"))


def generate_sequence(
    spec: SceneSpec, length: int, seed: int, frame_size: int = 128, velocity: Sequence[float] = (0.0, 0.0)
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Frames of a target moving at constant ``velocity`` (pixels/frame).

    Returns ``(frames, boxes)``; each frame is ``[3, frame_size, frame_size]``.
    """
    if length < 2:
        raise ValidationError("a sequence needs at least two frames")
    rng = np.random.default_rng([seed, 7919])
    kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
    color = rng.uniform(spec.color_low, 1.0, 3)
    side = float(np.mean(spec.target_size))
    w, h = side, side
    level = rng.uniform(0.0, 0.5, 3)
    tilt = rng.uniform(-0.3, 0.3, (3, 2))
    noise = float(np.mean(spec.noise))
    n_distract = spec.distractors[1]
    start = np.array([frame_size / 2, frame_size / 2])
    distractors = []
    for _ in range(n_distract):
        dbox = np.array([rng.uniform(0, frame_size), rng.uniform(0, frame_size), side, side])
        if np.hypot(*(dbox[:2] - start)) < 2.5 * side:
            dbox[0] = (dbox[0] + frame_size / 2) % frame_size
        others = [s for s in spec.shapes if s != kind] or [kind]
        distractors.append((others[int(rng.integers(len(others)))], _distinct_color(rng, color, spec.color_low), dbox))
    frames, boxes = [], []
    for t in range(length):
        c = start + t * np.asarray(velocity, dtype=float)
        c = np.clip(c, w / 2, frame_size - w / 2)
        box = np.array([c[0], c[1], w, h])
        img = _background(rng, frame_size, level, tilt, noise)
        for dkind, dcolor, dbox in distractors:
            _paint(img, _shape_mask(dkind, frame_size, dbox), dcolor)
        _paint(img, _shape_mask(kind, frame_size, box), color)
        frames.append((img - 0.5).astype(np.float32))
        boxes.append(box)
    return frames, boxes
