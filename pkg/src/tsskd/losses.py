"""Teacher-student transfer losses, student-student sharing and the joint objective.

Naming follows the components of the distillation objective:

* ``ts``  - teacher soft loss (softened classification KL plus teacher-as-target regression)
* ``ah``  - adaptive hard loss (ground truth, regression gated against the teacher)
* ``str`` - Siamese target response matching on intermediate feature maps
* ``ks``  - knowledge sharing between students

Teacher tensors are always treated as constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IGNORE, GroundTruth
from .errors import DimensionError, ValidationError
from .models import (
    PROPOSAL,
    SIMILARITY,
    TrackerOutput,
    balanced_mean,
    gt_cls_loss,
    gt_loss,
    pair_logits,
    reg_deltas,
    regression_loss,
)



@dataclass(frozen=True)
class TransferConfig:
    """Weights and switches of the teacher-to-student transfer loss.

    ``str_layers=None`` means every extractor layer except the first. The
    ``use_*`` switches select ablation rows; ``use_gt`` substitutes the plain
    ground-truth loss for the adaptive hard loss in the same weighted slot.
    """

    temp: float = 1.0
    m: float = 0.005
    lam: float = 1.0
    omega: float = 10.0
    str_layers: tuple[int, ...] | None = None
    use_ts: bool = True
    use_ah: bool = True
    use_str: bool = True
    use_gt: bool = False
    ts_anchors: str = "dense"

    def __post_init__(self):
        if self.ts_anchors not in ("tracker", "dense", "all"):
            raise ValidationError(f"unknown ts_anchors {self.ts_anchors!r}")
        if not self.temp > 0:
            raise ValidationError(f"temp must be positive, got {self.temp}")
        if self.use_ah and self.use_gt:
            raise ValidationError("use_ah and use_gt are mutually exclusive")
        if self.str_layers is not None:
            object.__setattr__(self, "str_layers", tuple(int(j) for j in self.str_layers))

    def layers_for(self, n_layers: int) -> tuple[int, ...]:
        if self.str_layers is None:
            return tuple(range(1, n_layers))
        bad = [j for j in self.str_layers if not 0 <= j < n_layers]
        if bad:
            raise ValidationError(f"str_layers {bad} outside 0..{n_layers - 1}")
        return self.str_layers

    @property
    def label(self) -> str:
        parts = [name for name, on in (("GT", self.use_gt), ("AH", self.use_ah), ("TS", self.use_ts), ("STR", self.use_str)) if on]
        return "+".join(parts) or "none"


@dataclass(frozen=True)
class SharingConfig:
    """Gate and discount settings for student-student sharing.

    ``normalization`` is ``"auto"`` (pairwise form for two students, ``1/n`` form
    otherwise), ``"pair"`` or ``"mean"``. ``ks_reduction`` chooses whether the
    per-proposal sharing terms are summed or averaged.
    """

    h: float = 0.005
    beta: float = 0.5
    sigma0: float = 1.0
    decay: float = 0.9
    beta_matrix: tuple[tuple[float, ...], ...] | None = None
    normalization: str = "auto"
    ks_reduction: str = "mean"
    labeled_only: bool = True

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValidationError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.sigma0 > 0:
            raise ValidationError("sigma0 must be positive")
        if not 0 < self.decay < 1:
            raise ValidationError(f"decay must lie in (0, 1), got {self.decay}")
        if self.normalization not in ("auto", "pair", "mean"):
            raise ValidationError(f"unknown normalization {self.normalization!r}")
        if self.ks_reduction not in ("sum", "mean", "balanced"):
            raise ValidationError(f"unknown ks_reduction {self.ks_reduction!r}")
        if self.beta_matrix is not None:
            object.__setattr__(self, "beta_matrix", tuple(tuple(float(v) for v in row) for row in self.beta_matrix))

    def schedule(self, epoch: int) -> float:
        return self.sigma0 * self.decay**epoch

    def betas(self, n: int) -> np.ndarray:
        """Discount ``beta[i, j]`` applied when student ``i`` learns from ``j``.

        Students are ordered dullest first: learning from a later (larger)
        student is undiscounted, learning from an earlier one is discounted by
        ``beta``.
        """
        if self.beta_matrix is not None:
            mat = np.asarray(self.beta_matrix, dtype=float)
            if mat.shape != (n, n):
                raise ValidationError(f"beta_matrix is {mat.shape}, expected {(n, n)}")
            return mat
        mat = np.where(np.arange(n)[None, :] > np.arange(n)[:, None], 1.0, self.beta)
        np.fill_diagonal(mat, 0.0)
        return mat


@dataclass
class LossTerms:
    """A differentiable total plus float-valued components for logging."""

    total: Tensor
    parts: dict = field(default_factory=dict)

    def item(self) -> float:
        return self.total.item()


def _const(t: Tensor | None) -> Tensor | None:
    return None if t is None else Tensor(t.data)


def _check_pair(a: TrackerOutput, b: TrackerOutput) -> None:
    if a.head_kind != b.head_kind:
        raise DimensionError(f"head kinds differ: {a.head_kind} vs {b.head_kind}")
    if a.cls.shape != b.cls.shape:
        raise DimensionError(f"classification maps differ: {a.cls.shape} vs {b.cls.shape}")
    if (a.reg is None) != (b.reg is None) or (a.reg is not None and a.reg.shape != b.reg.shape):
        raise DimensionError("regression maps differ in presence or shape")


def class_logits(out: TrackerOutput, const: bool = False) -> Tensor:
    """Two-way (background, foreground) logits per proposal, last axis of size 2.

    For the similarity head the score ``s`` induces the pair ``(0, s)``, whose
    softmax is ``(1 - sigmoid(s), sigmoid(s))``.
    """
    cls = _const(out.cls) if const else out.cls
    if out.head_kind == PROPOSAL:
        return pair_logits(cls)
    s = cls.reshape(cls.shape[:-3] + cls.shape[-2:])
    zeros = Tensor(np.zeros(s.shape, dtype=s.dtype))
    return ad.stack([zeros, s], axis=-1)


def ts_loss(
    student: TrackerOutput, teacher: TrackerOutput, cfg: TransferConfig = TransferConfig(), gt: GroundTruth | None = None
) -> Tensor:
    """Softened KL(student || teacher) per proposal plus teacher-target regression.

    Without ``gt`` the KL is a plain mean over proposals and the regression
    covers every anchor. With ``gt`` both follow the tracker's own loss: KL
    averaged with the class-balanced weighting over labelled proposals, and
    regression restricted to positive anchors, with the teacher's offsets as
    the target.
    """
    _check_pair(student, teacher)
    p_s = ad.softmax_t(class_logits(student), cfg.temp)
    p_t = ad.softmax_t(class_logits(teacher, const=True), cfg.temp)
    per_prop = ad.kl_terms(p_s, p_t).sum(axis=-1)
    if gt is None:
        loss = ad.mean(per_prop)
    elif cfg.ts_anchors == "dense":
        loss = _group_mean(per_prop, _labels(gt, student))
    else:
        loss = balanced_mean(per_prop, _labels(gt, student))
    if student.head_kind == PROPOSAL:
        if gt is None:
            loss = loss + ad.smooth_l1(student.reg, _const(teacher.reg))
        else:
            target = GroundTruth(gt.anchor_labels, teacher.reg.data, gt.score_labels, gt.box, gt.degenerate)
            loss = loss + regression_loss(student.reg, target)
    return loss


def _group_mean(terms: Tensor, labels: np.ndarray) -> Tensor:
    """Mean with positives, negatives and ignored proposals weighted equally as groups."""
    weights = np.zeros(labels.shape)
    groups = [g for g in (labels == 1, labels == -1, labels == IGNORE) if g.any()]
    for g in groups:
        weights[g] = 1.0 / (len(groups) * g.sum())
    return (terms * Tensor(weights.astype(terms.dtype))).sum()


def _labels(gt: GroundTruth, out: TrackerOutput) -> np.ndarray:
    return np.asarray(gt.anchor_labels if out.head_kind == PROPOSAL else gt.score_labels)


def bounded_regression(student_reg: Tensor, teacher_reg: Tensor | float, m: float) -> Tensor:
    """Keep the student's regression loss only where it trails the teacher by less than ``m``.

    ``gap = teacher - student``; the term survives iff ``gap < m``. Inputs may
    be scalars or per-sample vectors; the result is averaged.
    """
    t = np.asarray(teacher_reg.data if isinstance(teacher_reg, Tensor) else teacher_reg, dtype=float)
    gap = t - student_reg.data
    keep = (gap < m).astype(student_reg.dtype)
    return ad.mean(student_reg * Tensor(keep))


def ah_loss(student: TrackerOutput, teacher: TrackerOutput, gt: GroundTruth, cfg: TransferConfig = TransferConfig()) -> Tensor:
    """Student's ground-truth classification loss plus the teacher-bounded regression term."""
    _check_pair(student, teacher)
    loss = gt_cls_loss(student, gt)
    if student.head_kind == PROPOSAL:
        per_s = regression_loss(student.reg, gt, per_sample=student.reg.ndim == 4)
        with ad.no_grad():
            per_t = regression_loss(_const(teacher.reg), gt, per_sample=teacher.reg.ndim == 4)
        loss = loss + bounded_regression(per_s, per_t, cfg.m)
    return loss


def search_response(qx: Tensor, qz: Tensor) -> Tensor:
    """Channel-squeezed search-branch response weighted by the branch correlation.

    ``W = qx * qz`` (correlation) is resized to ``qx``'s grid by nearest
    neighbour and multiplied into ``qx`` before the absolute channel sum.
    """
    w = ad.xcorr(qx, qz)
    w = ad.resize2d(w, qx.shape[-2:], mode="nearest")
    lead = w.shape[:-2]
    weighted = qx * w.reshape(lead + (1,) + w.shape[-2:])
    return ad.channel_abs_sum(weighted)


def response_maps(out: TrackerOutput, layer: int, normalize: bool = True) -> tuple[Tensor, Tensor]:
    """(search, template) response maps of one extractor layer."""
    if layer in out.str_maps:
        return out.str_maps[layer]
    if not 0 <= layer < len(out.feats_x):
        raise ValidationError(f"layer {layer} not present in output features")
    x_map = search_response(out.feats_x[layer], out.feats_z[layer])
    z_map = ad.channel_abs_sum(out.feats_z[layer])
    if normalize:
        x_map, z_map = ad.l2_normalize(x_map), ad.l2_normalize(z_map)
    return x_map, z_map


def summarize_teacher(out: TrackerOutput, layers: Sequence[int]) -> TrackerOutput:
    """Constant copy of a teacher output with response maps precomputed."""
    with ad.no_grad():
        maps = {j: tuple(Tensor(m.data) for m in response_maps(out, j)) for j in layers}
    return TrackerOutput(_const(out.cls), _const(out.reg), [], [], out.head_kind, maps, out.batched)


def str_loss(student: TrackerOutput, teacher: TrackerOutput, cfg: TransferConfig = TransferConfig()) -> Tensor:
    """Sum over chosen layers of MSE between normalized student and teacher response maps."""
    n_layers = len(student.feats_x)
    layers = cfg.layers_for(n_layers)
    if not layers:
        warnings.warn("str_loss called with no layers; returning 0", stacklevel=2)
        return Tensor(np.zeros((), dtype=student.cls.dtype))
    total = None
    for j in layers:
        sx, sz = response_maps(student, j)
        with ad.no_grad():
            tx, tz = response_maps(teacher, j)
        tx, tz = _const(tx), _const(tz)
        if sx.shape[-2:] != tx.shape[-2:]:
            sx = ad.l2_normalize(ad.resize2d(sx, tx.shape[-2:], mode="bilinear"))
        if sz.shape[-2:] != tz.shape[-2:]:
            sz = ad.l2_normalize(ad.resize2d(sz, tz.shape[-2:], mode="bilinear"))
        term = ad.mse(sx, tx) + ad.mse(sz, tz)
        total = term if total is None else total + term
    return total


def knowledge_transfer_loss(
    student: TrackerOutput, teacher: TrackerOutput, gt: GroundTruth, cfg: TransferConfig = TransferConfig()
) -> LossTerms:
    """``ts + lam * ah + omega * str`` with ablation switches; components in ``parts``."""
    total = None
    parts = {}

    def add(name, value, weight):
        nonlocal total
        parts[name] = value.item()
        term = value if weight == 1.0 else value * weight
        total = term if total is None else total + term

    if cfg.use_ts:
        add("ts", ts_loss(student, teacher, cfg, None if cfg.ts_anchors == "all" else gt), 1.0)
    if cfg.use_ah:
        add("ah", ah_loss(student, teacher, gt, cfg), cfg.lam)
    if cfg.use_gt:
        add("gt", gt_loss(student, gt), cfg.lam)
    if cfg.use_str:
        add("str", str_loss(student, teacher, cfg), cfg.omega)
    if total is None:
        total = Tensor(np.zeros((), dtype=student.cls.dtype))
    parts["total"] = total.item()
    return LossTerms(total, parts)


def ks_loss(a: TrackerOutput, b: TrackerOutput, labels: np.ndarray | None = None, reduction: str = "sum") -> Tensor:
    """Sharing loss of ``a`` towards ``b``; ``b`` is a constant.

    Per proposal: ``p_a log(p_a/p_b) + q_a log(q_a/q_b)`` plus, for the
    proposal head, the smooth-L1 distance of the four regression values.

    ``reduction``:

    * ``"sum"``: proposals are summed (restricted to non-IGNORE entries of
      ``labels`` when given), then averaged over the batch.
    * ``"mean"``: as ``"sum"`` but divided by the proposal count.
    * ``"balanced"``: the tracker's own weighting; class-balanced mean of the
      KL over labelled proposals and mean regression distance over positive
      anchors. Needs ``labels``.
    """
    _check_pair(a, b)
    pa = ad.softmax_t(class_logits(a), 1.0)
    pb = ad.softmax_t(class_logits(b, const=True), 1.0)
    per_prop = ad.kl_terms(pa, pb).sum(axis=-1)  # [.., k, S, S] or [.., S, S]
    mask = np.ones(per_prop.shape)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != per_prop.shape:
            raise DimensionError(f"labels {labels.shape} do not match proposals {per_prop.shape}")
        mask = (labels != IGNORE).astype(float)
    if reduction == "balanced":
        if labels is None:
            raise ValidationError("balanced reduction needs labels")
        loss = balanced_mean(per_prop, labels)
        if a.head_kind == PROPOSAL:
            target = GroundTruth(labels, b.reg.data, None, None, False)
            loss = loss + regression_loss(a.reg, target)
        return loss
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    batch = per_prop.shape[0] if a.batched else 1
    count = max(mask.sum() / batch, 1.0) if reduction == "mean" else 1.0
    weights = Tensor((mask / (count * batch)).astype(per_prop.dtype))
    loss = (per_prop * weights).sum()
    if a.head_kind == PROPOSAL:
        ra = reg_deltas(a.reg)
        rb = reg_deltas(_const(b.reg))
        reg_terms = ad.smooth_l1_terms(ra, rb).sum(axis=-3)  # [.., k, S, S]
        loss = loss + (reg_terms * weights).sum()
    return loss


def sigma_gate(student_gt_loss: float, teacher_gt_loss: float, epoch: int, cfg: SharingConfig = SharingConfig()) -> float:
    """``sigma0 * decay**epoch`` when the student's GT loss is within ``h`` of the teacher's, else 0."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if float(student_gt_loss) - float(teacher_gt_loss) < cfg.h:
        return cfg.schedule(epoch)
    return 0.0


class TSsKDLoss(NamedTuple):
    total: Tensor
    per_student: list


def combine_sharing(kt: Sequence[float], ks: dict, sigmas: Sequence[float], scfg: SharingConfig) -> list[float]:
    """Arithmetic of the joint objective on plain numbers (used for auditing logs)."""
    n = len(kt)
    betas = scfg.betas(n)
    pair = scfg.normalization == "pair" or (scfg.normalization == "auto" and n == 2)
    scale = 1.0 if pair else 1.0 / n
    out = []
    for i in range(n):
        total = kt[i]
        for j in range(n):
            if i != j:
                total += scale * betas[i, j] * sigmas[i] * ks[(i, j)]
        out.append(total)
    return out


def tsskd_loss(
    students: Sequence[tuple[TrackerOutput, float]],
    teacher: TrackerOutput,
    gt: GroundTruth,
    tcfg: TransferConfig = TransferConfig(),
    scfg: SharingConfig = SharingConfig(),
    epoch: int = 0,
) -> TSsKDLoss:
    """Joint objective of several students distilled from one teacher.

    Students are ordered dullest first. Each gets its own transfer loss plus
    gated, discounted sharing terms towards every other student. With two
    students (``normalization="auto"``) the pairwise form is used, so the dull
    student takes ``sigma * KS(s1||s2)`` and the other ``beta * sigma * KS(s2||s1)``;
    with more, sharing terms are scaled by ``1/n``.
    """
    n = len(students)
    if n < 2:
        raise ValidationError("tsskd_loss needs at least two students")
    with ad.no_grad():
        teacher_gt = gt_loss(teacher, gt).item()
    betas = scfg.betas(n)
    pair = scfg.normalization == "pair" or (scfg.normalization == "auto" and n == 2)
    scale = 1.0 if pair else 1.0 / n
    labels = None
    if scfg.labeled_only:
        labels = gt.anchor_labels if teacher.head_kind == PROPOSAL else gt.score_labels
    per_student = []
    grand = None
    for i, (out_i, gt_i) in enumerate(students):
        kt = knowledge_transfer_loss(out_i, teacher, gt, tcfg)
        sigma = sigma_gate(float(gt_i.item() if isinstance(gt_i, Tensor) else gt_i), teacher_gt, epoch, scfg)
        total = kt.total
        ks_sum = 0.0
        for j, (out_j, _) in enumerate(students):
            if i == j:
                continue
            weight = scale * betas[i, j] * sigma
            if weight == 0.0:
                continue
            ks = ks_loss(out_i, out_j, labels, scfg.ks_reduction)
            ks_sum += float(weight * ks.item())
            total = total + ks * weight
        parts = dict(kt.parts)
        parts.update(ks=ks_sum, sigma=sigma, gt=float(gt_i.item() if isinstance(gt_i, Tensor) else gt_i), teacher_gt=teacher_gt)
        parts["total"] = total.item()
        per_student.append(LossTerms(total, parts))
        grand = total if grand is None else grand + total
    return TSsKDLoss(grand, per_student)
