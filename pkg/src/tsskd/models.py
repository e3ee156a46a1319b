"""Siamese feature extractors with similarity and anchor-proposal heads."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, AnchorGrid, GroundTruth, decode_boxes
from .errors import DimensionError, ValidationError

SIMILARITY = "similarity"
PROPOSAL = "proposal"
HEAD_KINDS = (SIMILARITY, PROPOSAL)


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ArchConfig:
    """Layer-by-layer blueprint of a Siamese tracker.

    Construction validates that every layer leaves a positive spatial extent on
    both the template and the search input.
    """

    layers: tuple[LayerSpec, ...]
    head_kind: str = PROPOSAL
    anchors_k: int = 3
    head_channels: int = 8
    template_size: int = 32
    search_size: int = 64
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if not self.layers:
            raise ValidationError("ArchConfig needs at least one layer")
        if self.head_kind not in HEAD_KINDS:
            raise ValidationError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        for i, l in enumerate(self.layers):
            if l.out_channels < 1 or l.kernel < 1 or l.stride < 1:
                raise ValidationError(f"layer {i}: channels, kernel and stride must be positive, got {l}")
        if self.anchors_k < 1 or self.head_channels < 1:
            raise ValidationError("anchors_k and head_channels must be positive")
        for name, size in (("template", self.template_size), ("search", self.search_size)):
            for i, l in enumerate(self.layers):
                if l.kernel > size:
                    raise ValidationError(f"layer {i} collapses the {name} branch: kernel {l.kernel} > extent {size}")
                size = (size - l.kernel) // l.stride + 1
        zs, xs = self.feature_sizes()
        if zs[-1] > xs[-1]:
            raise ValidationError("template features larger than search features")

    def feature_sizes(self) -> tuple[list[int], list[int]]:
        """Spatial extent after each layer for the template and search inputs."""
        out = []
        for size in (self.template_size, self.search_size):
            sizes = []
            for l in self.layers:
                size = (size - l.kernel) // l.stride + 1
                sizes.append(size)
            out.append(sizes)
        return out[0], out[1]

    def channels(self) -> list[int]:
        return [l.out_channels for l in self.layers]

    def with_channels(self, channels: Iterable[int]) -> "ArchConfig":
        layers = tuple(replace(l, out_channels=int(c)) for l, c in zip(self.layers, channels))
        return replace(self, layers=layers)

    def to_dict(self) -> dict:
        return {
            "layers": [{"out_channels": l.out_channels, "kernel": l.kernel, "stride": l.stride} for l in self.layers],
            "head_kind": self.head_kind,
            "anchors_k": self.anchors_k,
            "head_channels": self.head_channels,
            "template_size": self.template_size,
            "search_size": self.search_size,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d["layers"])
        return cls(**d)


def teacher_config(head_kind: str = PROPOSAL, **overrides) -> ArchConfig:
    """Desk-scale teacher: four 3x3 layers with 32-64-64-96 channels."""
    layers = (LayerSpec(32, 3, 2), LayerSpec(64, 3, 2), LayerSpec(64, 3, 1), LayerSpec(96, 3, 1))
    return ArchConfig(layers=layers, head_kind=head_kind, **overrides)


def halve_channels(cfg: ArchConfig) -> ArchConfig:
    """Floor-halve every layer width and the head width."""
    widths = cfg.channels() + [cfg.head_channels]
    if min(widths) < 2:
        raise ValidationError(f"cannot halve a channel count of 1 (widths {widths})")
    halved = cfg.with_channels(c // 2 for c in cfg.channels())
    return replace(halved, head_channels=cfg.head_channels // 2)


def score_geometry(cfg: ArchConfig) -> tuple[int, int, float]:
    """``(score_size, total_stride, origin)`` of the response map in search pixels."""
    center, jump = 0.5, 1
    for l in cfg.layers:
        center += (l.kernel - 1) / 2 * jump
        jump *= l.stride
    zs, xs = cfg.feature_sizes()
    origin = center + (zs[-1] - 1) * jump / 2
    return xs[-1] - zs[-1] + 1, jump, origin


def anchor_grid(cfg: ArchConfig, base_size: float = 16.0, ratios=(0.5, 1.0, 2.0)) -> AnchorGrid:
    size, stride, origin = score_geometry(cfg)
    if cfg.head_kind == PROPOSAL and len(ratios) != cfg.anchors_k:
        raise ValidationError(f"{len(ratios)} anchor ratios for anchors_k={cfg.anchors_k}")
    return AnchorGrid(size, stride, origin, base_size, tuple(ratios))


def _head_widths(cfg: ArchConfig) -> tuple[int, int]:
    return 2 * cfg.anchors_k * cfg.head_channels, 4 * cfg.anchors_k * cfg.head_channels


def param_shapes(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered parameter names and shapes (layer order, weight before bias)."""
    shapes = []
    cin = cfg.in_channels
    for i, l in enumerate(cfg.layers):
        shapes.append((f"layer{i}.weight", (l.out_channels, cin, l.kernel, l.kernel)))
        shapes.append((f"layer{i}.bias", (l.out_channels,)))
        cin = l.out_channels
    if cfg.head_kind == PROPOSAL:
        cls_w, reg_w = _head_widths(cfg)
        for name, width in (("cls_x", cls_w), ("cls_z", cls_w), ("reg_x", reg_w), ("reg_z", reg_w)):
            shapes.append((f"head.{name}.weight", (width, cin, 1, 1)))
            shapes.append((f"head.{name}.bias", (width,)))
    return shapes


def param_count(cfg_or_model) -> int:
    cfg = cfg_or_model.cfg if isinstance(cfg_or_model, Model) else cfg_or_model
    return int(sum(np.prod(s) for _, s in param_shapes(cfg)))


def model_size_bytes(cfg_or_model, bytes_per_scalar: int = 4) -> int:
    return param_count(cfg_or_model) * bytes_per_scalar


@dataclass
class TrackerOutput:
    cls: Tensor
    reg: Tensor | None
    feats_x: list[Tensor]
    feats_z: list[Tensor]
    head_kind: str
    # Precomputed per-layer response maps keyed by layer index; lets a frozen
    # teacher be summarised once instead of re-running its extractor.
    str_maps: dict = field(default_factory=dict)
    batched: bool = False


class Model:
    """Parameters plus the Siamese forward pass for one :class:`ArchConfig`."""

    def __init__(self, cfg: ArchConfig, params: dict[str, Tensor], seed: int = 0):
        self.cfg = cfg
        self.params = params
        self.seed = seed
        zs, _ = cfg.feature_sizes()
        if cfg.head_kind == SIMILARITY:
            self.out_scale = 1.0 / (cfg.layers[-1].out_channels * zs[-1] ** 2)
        else:
            self.out_scale = 1.0 / (cfg.head_channels * zs[-1] ** 2)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        """Toggle gradient tracking; freezing also drops stale gradients."""
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def extract(self, img: Tensor) -> list[Tensor]:
        feats = []
        h = img
        last = len(self.cfg.layers) - 1
        for i, l in enumerate(self.cfg.layers):
            h = ad.conv2d_valid(h, self.params[f"layer{i}.weight"], l.stride, bias=self.params[f"layer{i}.bias"])
            if i < last:
                h = ad.relu(h)
            feats.append(h)
        return feats

    def _conv1x1(self, name: str, feat: Tensor) -> Tensor:
        return ad.conv2d_valid(feat, self.params[f"head.{name}.weight"], 1, bias=self.params[f"head.{name}.bias"])

    def forward(self, z, x) -> TrackerOutput:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.cfg
        for name, t, size in (("template", z, cfg.template_size), ("search", x, cfg.search_size)):
            if t.ndim not in (3, 4) or t.shape[-3:] != (cfg.in_channels, size, size):
                raise DimensionError(f"{name} input must be [{cfg.in_channels},{size},{size}] (optionally batched), got {t.shape}")
        if z.ndim != x.ndim:
            raise DimensionError("template and search must both be batched or both unbatched")
        feats_z = self.extract(z)
        feats_x = self.extract(x)
        fz, fx = feats_z[-1], feats_x[-1]
        if cfg.head_kind == SIMILARITY:
            s = ad.xcorr(fx, fz) * self.out_scale
            cls = s.reshape(s.shape[:-2] + (1,) + s.shape[-2:])
            reg = None
        else:
            k = cfg.anchors_k
            cls = ad.grouped_xcorr(self._conv1x1("cls_x", fx), self._conv1x1("cls_z", fz), 2 * k) * self.out_scale
            reg = ad.grouped_xcorr(self._conv1x1("reg_x", fx), self._conv1x1("reg_z", fz), 4 * k) * self.out_scale
        return TrackerOutput(cls, reg, feats_x, feats_z, cfg.head_kind, batched=x.ndim == 4)

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)


def build_model(cfg: ArchConfig, seed: int, dtype=np.float64) -> Model:
    """Deterministic He-normal initialisation with zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return Model(cfg, params, seed)


# ---------------------------------------------------------------------------
# Supervised losses


def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype))


def balanced_mean(terms: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over labelled entries with positives and negatives weighted equally."""
    pos = labels == 1
    neg = labels == -1
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    weights = np.zeros(labels.shape)
    if n_pos and n_neg:
        weights[pos] = 0.5 / n_pos
        weights[neg] = 0.5 / n_neg
    elif n_pos:
        weights[pos] = 1.0 / n_pos
    elif n_neg:
        weights[neg] = 1.0 / n_neg
    return (terms * _const(weights, terms)).sum()


def _gt_arrays(gt: GroundTruth, out: TrackerOutput):
    labels = np.asarray(gt.score_labels if out.head_kind == SIMILARITY else gt.anchor_labels)
    expected = out.cls.ndim - 1 if out.head_kind == SIMILARITY else out.cls.ndim
    if labels.ndim != expected:
        raise DimensionError(f"labels rank {labels.ndim} does not match output rank {out.cls.ndim}")
    return labels


def fc_loss(out: TrackerOutput, gt: GroundTruth) -> Tensor:
    """Logistic loss of the similarity map over labelled (non-IGNORE) cells."""
    if out.head_kind != SIMILARITY:
        raise ValidationError("fc_loss needs a similarity-head output")
    if gt is None or gt.score_labels is None:
        raise ValidationError("fc_loss: missing score labels")
    labels = _gt_arrays(gt, out)
    scores = out.cls.reshape(out.cls.shape[:-3] + out.cls.shape[-2:])
    if scores.shape != labels.shape:
        raise DimensionError(f"score map {scores.shape} vs labels {labels.shape}")
    signs = np.where(labels == IGNORE, 1, labels)
    return balanced_mean(ad.logistic_terms(scores, _const(signs, scores)), labels)


def pair_logits(cls: Tensor) -> Tensor:
    """``[.., 2k, S, S]`` -> ``[.., k, S, S, 2]`` with (background, foreground) last."""
    lead = cls.shape[:-3]
    k = cls.shape[-3] // 2
    r = cls.reshape(lead + (k, 2) + cls.shape[-2:])
    n = len(lead)
    axes = tuple(range(n)) + (n, n + 2, n + 3, n + 1)
    return r.transpose(axes)


def reg_deltas(reg: Tensor) -> Tensor:
    """``[.., 4k, S, S]`` -> ``[.., k, 4, S, S]``."""
    lead = reg.shape[:-3]
    return reg.reshape(lead + (reg.shape[-3] // 4, 4) + reg.shape[-2:])


def rpn_cls_loss(out: TrackerOutput, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(pair_logits(out.cls))
    onehot = np.stack([labels == -1, labels == 1], axis=-1).astype(float)
    nll = -(logp * _const(onehot, logp)).sum(axis=-1)
    return balanced_mean(nll, labels)


def regression_loss(reg: Tensor, gt: GroundTruth, per_sample: bool = False):
    """Smooth-L1 over positive anchors' normalized offsets.

    With ``per_sample`` the result is one value per batch entry (shape ``[N]``),
    each averaged over that sample's positive coordinates; samples with no
    positive anchor contribute 0.
    """
    labels = np.asarray(gt.anchor_labels)
    targets = np.asarray(gt.reg_targets)
    if targets.shape != reg.shape:
        raise DimensionError(f"regression targets {targets.shape} vs output {reg.shape}")
    pos = (labels == 1).astype(float)
    mask = np.repeat(pos[..., :, None, :, :], 4, axis=-3).reshape(targets.shape)
    terms = ad.smooth_l1_terms(reg, _const(targets, reg))
    if not per_sample:
        count = mask.sum()
        if count == 0:
            return (terms * 0.0).sum()
        return (terms * _const(mask / count, reg)).sum()
    lead = reg.ndim - 3
    axes = tuple(range(lead, reg.ndim))
    counts = mask.sum(axis=axes, keepdims=True)
    weights = np.divide(mask, counts, out=np.zeros_like(mask), where=counts > 0)
    return (terms * _const(weights, reg)).sum(axis=axes)


def rpn_loss(out: TrackerOutput, gt: GroundTruth) -> Tensor:
    """Cross-entropy over labelled anchors plus smooth-L1 over positives, weighted 1:1."""
    if out.head_kind != PROPOSAL or out.reg is None:
        raise ValidationError("rpn_loss needs a proposal-head output")
    labels = _gt_arrays(gt, out)
    if labels.shape != out.cls.shape[:-3] + (out.cls.shape[-3] // 2,) + out.cls.shape[-2:]:
        raise DimensionError(f"anchor labels {labels.shape} do not match cls {out.cls.shape}")
    return rpn_cls_loss(out, labels) + regression_loss(out.reg, gt)


def gt_loss(out: TrackerOutput, gt: GroundTruth) -> Tensor:
    """The tracker's own supervised loss (logistic or multi-task RPN)."""
    return fc_loss(out, gt) if out.head_kind == SIMILARITY else rpn_loss(out, gt)


def gt_cls_loss(out: TrackerOutput, gt: GroundTruth) -> Tensor:
    if out.head_kind == SIMILARITY:
        return fc_loss(out, gt)
    return rpn_cls_loss(out, _gt_arrays(gt, out))


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, model: Model, epoch: int = 0, extra: dict | None = None) -> None:
    """JSON manifest line followed by one serialized tensor per parameter."""
    manifest = {
        "arch": model.cfg.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "params": [name for name, _ in param_shapes(model.cfg)],
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for name in manifest["params"]:
            ad.write_tensor(fp, model.params[name])


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    with open(path, "rb") as fp:
        manifest = json.loads(fp.readline().decode("utf-8"))
        cfg = ArchConfig.from_dict(manifest["arch"])
        params = {}
        for name in manifest["params"]:
            t = ad.read_tensor(fp)
            params[name] = Tensor(t.data, requires_grad=True)
    expected = dict(param_shapes(cfg))
    for name, t in params.items():
        if tuple(expected[name]) != t.shape:
            raise ValidationError(f"checkpoint parameter {name} has shape {t.shape}, expected {expected[name]}")
    return Model(cfg, params, manifest.get("seed", 0)), manifest


# ---------------------------------------------------------------------------
# Decoding


def foreground_scores(out: TrackerOutput) -> np.ndarray:
    """Per-proposal confidence: foreground softmax for anchors, raw score for cells."""
    if out.head_kind == SIMILARITY:
        return out.cls.data[..., 0, :, :]
    logits = pair_logits(Tensor(out.cls.data)).data
    return 0.5 * (1.0 + np.tanh(0.5 * (logits[..., 1] - logits[..., 0])))


def rank_proposals(cfg: ArchConfig, out: TrackerOutput, top_n: int, fixed_wh=None) -> tuple[np.ndarray, np.ndarray]:
    """Top-``top_n`` decoded boxes ``(cx, cy, w, h)`` in search pixels, best first.

    Proposal heads decode each anchor with its regression offsets. Similarity
    heads place a box of size ``fixed_wh`` (one ``(w, h)`` per sample when
    batched) at the highest score-map cells. Ties rank by flat index.
    Returns ``(boxes [.., top_n, 4], scores [.., top_n])``.
    """
    if top_n < 1:
        raise ValidationError(f"top_n must be >= 1, got {top_n}")
    scores = foreground_scores(out)
    if out.head_kind == SIMILARITY:
        if fixed_wh is None:
            raise ValidationError("similarity heads need a fixed box size to decode")
        size, stride, origin = score_geometry(cfg)
        coords = origin + stride * np.arange(size)
        cy, cx = np.meshgrid(coords, coords, indexing="ij")
        wh = np.asarray(fixed_wh, dtype=float)
        wh = np.broadcast_to(wh.reshape(wh.shape[:-1] + (1, 1, 2)), scores.shape + (2,))
        boxes = np.concatenate([np.broadcast_to(np.stack([cx, cy], -1), scores.shape + (2,)), wh], axis=-1)
    else:
        anchors = anchor_grid(cfg).boxes()
        deltas = np.moveaxis(reg_deltas(Tensor(out.reg.data)).data, -3, -1)
        boxes = decode_boxes(anchors, deltas)
    lead = scores.shape[: scores.ndim - (2 if out.head_kind == SIMILARITY else 3)]
    flat_s = scores.reshape(lead + (-1,))
    flat_b = boxes.reshape(lead + (-1, 4))
    top_n = min(top_n, flat_s.shape[-1])
    order = np.argsort(-flat_s, axis=-1, kind="stable")[..., :top_n]
    return np.take_along_axis(flat_b, order[..., None], axis=-2), np.take_along_axis(flat_s, order, axis=-1)
