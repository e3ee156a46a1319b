"""Training, distillation, evaluation and tracking orchestration."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import GroundTruth, SceneSpec, TrainSample, generate, iou_many, split, split_by_index, load_dataset
from .errors import NumericError, ValidationError
from .models import (
    PROPOSAL,
    ArchConfig,
    Model,
    TrackerOutput,
    build_model,
    gt_loss,
    halve_channels,
    load_checkpoint,
    model_size_bytes,
    param_count,
    rank_proposals,
    save_checkpoint,
    teacher_config,
)

log = logging.getLogger(__name__)

DP_PIXELS = 20.0
DP_REFERENCE = 271.0
AUC_THRESHOLDS = tuple(np.round(np.arange(0, 21) * 0.05, 2))
DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------------------------------------------------------------------------
# Configuration


def _from_dict(cls, d: dict | None, where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    epochs: int = 10
    warmup_epochs: int = 2
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 0.0
    teacher_epochs: int = 24

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValidationError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.warmup_epochs < 0 or self.epochs < 0 or self.teacher_epochs < 1:
            raise ValidationError("epoch counts must be non-negative (teacher_epochs >= 1)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class DataConfig:
    count: int = 5000
    seed: int = 0
    path: str | None = None
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    spec: dict = field(default_factory=dict)

    def scene(self) -> SceneSpec:
        return SceneSpec.from_dict(self.spec) if self.spec else SceneSpec()


@dataclass(frozen=True)
class SearchConfig:
    iterations: int = 20
    n_candidates: int = 3
    candidate_epochs: int = 2
    candidate_train: int = 400
    candidate_val: int = 100
    top_n: int = 5
    lr: float = 3.0
    hidden: int = 32
    baseline: str = "ema"


PRESETS = {
    "desk": {},
    "full": {"optim": {"warmup_epochs": 10, "epochs": 50}, "search": {"iterations": 50, "candidate_epochs": 10}},
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs; see the README for the JSON schema."""

    mode: str = "distill"
    seed: int = 0
    out: str = "runs/default"
    head_kind: str = PROPOSAL
    dtype: str = "float32"
    teacher: dict | None = None
    teacher_checkpoint: str | None = None
    dull: list | None = None
    dull_from: str | None = None
    students: int = 2
    distill_mode: str = "TSsKD"
    transfer: L.TransferConfig = L.TransferConfig()
    sharing: L.SharingConfig = L.SharingConfig()
    optim: OptimConfig = OptimConfig()
    data: DataConfig = DataConfig()
    search: SearchConfig = SearchConfig()
    log_every: int = 1

    def __post_init__(self):
        if self.mode not in ("search", "distill", "eval", "gradcheck", "track", "gen-data"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}")
        if self.distill_mode not in ("NOKD", "TSKD", "TSsKD"):
            raise ValidationError(f"unknown distill_mode {self.distill_mode!r}")
        if self.students < 1:
            raise ValidationError("students must be >= 1")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def teacher_arch(self) -> ArchConfig:
        if self.teacher is None:
            return teacher_config(self.head_kind)
        cfg = ArchConfig.from_dict(self.teacher)
        if cfg.head_kind != self.head_kind:
            raise ValidationError(f"teacher head {cfg.head_kind} differs from run head {self.head_kind}")
        return cfg

    def dull_arch(self) -> ArchConfig:
        teacher = self.teacher_arch()
        chans = self.dull
        if chans is None and self.dull_from:
            with open(self.dull_from) as fp:
                chans = json.load(fp)["channels"]
        if chans is None:
            return halve_channels(halve_channels(teacher))
        if len(chans) != len(teacher.layers):
            raise ValidationError(f"dull student has {len(chans)} widths for {len(teacher.layers)} layers")
        return teacher.with_channels(int(c) for c in chans)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        preset = d.pop("preset", "desk")
        if preset not in PRESETS:
            raise ValidationError(f"unknown preset {preset!r}")
        for key, vals in PRESETS[preset].items():
            d[key] = {**vals, **d.get(key, {})}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "transfer": L.TransferConfig,
            "sharing": L.SharingConfig,
            "optim": OptimConfig,
            "data": DataConfig,
            "search": SearchConfig,
        }
        for key, sub in nested.items():
            if key in d:
                vals = dict(d[key])
                if key == "data" and "ratios" in vals:
                    vals["ratios"] = tuple(vals["ratios"])
                if key == "transfer" and "lambda" in vals:
                    vals["lam"] = vals.pop("lambda")
                d[key] = _from_dict(sub, vals, key)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path) as fp:
                d = json.load(fp)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# Optimisation


def lr_schedule(epoch: int, epochs: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from ``lr_start`` at epoch 0 to ``lr_end`` at ``epochs - 1``."""
    if epochs <= 1:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (epoch / (epochs - 1))


class SGD:
    """Momentum SGD; updates keep each parameter's dtype."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * v


class Batches:
    """Stacked arrays of a sample list with seeded per-epoch shuffling."""

    def __init__(self, samples: Sequence[TrainSample], dtype=np.float32):
        if len(samples) == 0:
            raise ValidationError("empty sample list")
        self.samples = list(samples)
        self.z = np.stack([s.z for s in samples]).astype(dtype)
        self.x = np.stack([s.x for s in samples]).astype(dtype)
        self.labels = np.stack([s.gt.anchor_labels for s in samples])
        self.targets = np.stack([s.gt.reg_targets for s in samples])
        self.score = np.stack([s.gt.score_labels for s in samples])
        self.boxes = np.stack([s.box for s in samples])

    def __len__(self) -> int:
        return len(self.samples)

    def order(self, seed: int, epoch: int, batch_size: int) -> list[np.ndarray]:
        perm = np.random.default_rng([seed, epoch, 17]).permutation(len(self))
        return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]

    def get(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
        gt = GroundTruth(self.labels[idx], self.targets[idx], self.score[idx], self.boxes[idx], False)
        return self.z[idx], self.x[idx], gt


class TeacherCache:
    """Frozen teacher outputs and response maps, computed once per training set."""

    def __init__(self, teacher: Model, data: Batches, layers: Sequence[int], batch_size: int = 64):
        self.layers = tuple(layers)
        self.head_kind = teacher.cfg.head_kind
        cls, reg, maps = [], [], {j: ([], []) for j in self.layers}
        with ad.no_grad():
            for lo in range(0, len(data), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(data)))
                z, x, _ = data.get(idx)
                out = teacher(z.astype(teacher.dtype), x.astype(teacher.dtype))
                cls.append(out.cls.data)
                reg.append(None if out.reg is None else out.reg.data)
                for j in self.layers:
                    mx, mz = L.response_maps(out, j)
                    maps[j][0].append(mx.data)
                    maps[j][1].append(mz.data)
        self.cls = np.concatenate(cls)
        self.reg = None if reg[0] is None else np.concatenate(reg)
        self.maps = {j: (np.concatenate(a), np.concatenate(b)) for j, (a, b) in maps.items()}

    def get(self, idx: np.ndarray) -> TrackerOutput:
        maps = {j: (Tensor(a[idx]), Tensor(b[idx])) for j, (a, b) in self.maps.items()}
        reg = None if self.reg is None else Tensor(self.reg[idx])
        return TrackerOutput(Tensor(self.cls[idx]), reg, [], [], self.head_kind, maps, True)


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Per-epoch CSV with a fixed column set; floats written with ``repr``."""

    COLUMNS = ("epoch", "phase", "student", "lr", "loss", "gt", "ts", "ah", "str", "ks", "sigma")

    def __init__(self, path: Path):
        self.fp = open(path, "w", newline="")
        self.writer = csv.writer(self.fp, lineterminator="\n")
        self.writer.writerow(self.COLUMNS)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row[c]) if c in row else "" for c in self.COLUMNS])
        self.fp.flush()

    def close(self) -> None:
        self.fp.close()


def train_supervised(
    model: Model,
    data: Batches,
    epochs: Sequence[int],
    optim: OptimConfig,
    total_epochs: int,
    seed: int,
    sgd: SGD | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> SGD:
    """Ground-truth-only training over the given epoch indices of a longer schedule."""
    sgd = sgd or SGD(model.parameters(), optim.momentum, optim.weight_decay)
    for e in epochs:
        lr = lr_schedule(e, total_epochs, optim.lr_start, optim.lr_end)
        losses = []
        for idx in data.order(seed, e, optim.batch_size):
            z, x, gt = data.get(idx)
            loss = gt_loss(model(z, x), gt)
            value = loss.item()
            _check_finite(value, "ground-truth loss")
            sgd.zero_grad()
            loss.backward()
            sgd.step(lr)
            losses.append(value)
            if on_step:
                on_step({"gt": value, "total": value})
        if on_epoch:
            on_epoch(e, lr, float(np.mean(losses)))
    return sgd


def train_teacher(cfg: RunConfig, train: Sequence[TrainSample], out_dir: str | Path | None = None) -> Model:
    """Fit the teacher on ground truth; writes ``teacher.ckpt`` and ``teacher_loss.csv``.

    On a non-finite loss the last good parameters are checkpointed and the
    error re-raised.
    """
    out = Path(out_dir) if out_dir else None
    model = build_model(cfg.teacher_arch(), cfg.seed, cfg.np_dtype)
    data = Batches(train, cfg.np_dtype)
    rows = []
    good = model.state_arrays()

    def on_epoch(e, lr, loss):
        nonlocal good
        rows.append((e, lr, loss))
        good = model.state_arrays()
        log.info("teacher epoch %d lr %.3g loss %.4f", e, lr, loss)

    E = cfg.optim.teacher_epochs
    try:
        train_supervised(model, data, range(E), cfg.optim, E, cfg.seed, on_epoch=on_epoch)
    except NumericError:
        if out:
            model.load_arrays(good)
            save_checkpoint(out / "teacher.ckpt", model, len(rows), {"status": "diverged"})
        raise
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "teacher.ckpt", model, E)
        with open(out / "teacher_loss.csv", "w", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            w.writerow(("epoch", "lr", "loss"))
            for e, lr, loss in rows:
                w.writerow((e, repr(lr), repr(loss)))
    model.loss_curve = [r[2] for r in rows]
    return model


# ---------------------------------------------------------------------------
# Distillation


@dataclass
class DistillResult:
    students: list
    names: list
    log_path: Path | None
    metrics_path: Path | None


def student_configs(cfg: RunConfig) -> list[ArchConfig]:
    """Students ordered dullest first.

    ``NOKD`` and ``TSKD`` train the dull student alone. ``TSsKD`` trains
    ``cfg.students`` (at least two): the dull student, widths spaced
    geometrically in between, and the half-width teacher last.
    """
    teacher = cfg.teacher_arch()
    dull = cfg.dull_arch()
    if dull.head_kind != teacher.head_kind:
        raise ValidationError("student and teacher head kinds differ")
    if cfg.distill_mode != "TSsKD":
        return [dull]
    if cfg.students < 2:
        raise ValidationError("TSsKD needs at least two students")
    smart = halve_channels(teacher)
    lo = np.array(dull.channels() + [dull.head_channels], dtype=float)
    hi = np.array(smart.channels() + [smart.head_channels], dtype=float)
    configs = [dull]
    n = cfg.students
    for k in range(1, n - 1):
        widths = np.maximum(np.rint(lo * (hi / lo) ** (k / (n - 1))), 1).astype(int)
        configs.append(replace(teacher.with_channels(widths[:-1]), head_channels=int(widths[-1])))
    configs.append(smart)
    return configs


def warm_start(cfg: RunConfig, configs: Sequence[ArchConfig], data: Batches, seed: int, out_dir: Path | None = None):
    """Ground-truth warmup of freshly initialised students; returns models and optimiser states."""
    total = cfg.optim.warmup_epochs + cfg.optim.epochs
    models, sgds = [], []
    logs = []
    for i, arch in enumerate(configs):
        m = build_model(arch, seed * 1000 + i + 1, cfg.np_dtype)
        name = f"s{i + 1}"

        def on_epoch(e, lr, loss, name=name):
            logs.append({"epoch": e, "phase": "warmup", "student": name, "lr": lr, "loss": loss, "gt": loss})

        sgd = train_supervised(m, data, range(cfg.optim.warmup_epochs), cfg.optim, total, seed + 101 * i, on_epoch=on_epoch)
        models.append(m)
        sgds.append(sgd)
    return models, sgds, logs


def _clone(model: Model) -> Model:
    m = Model(model.cfg, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}, model.seed)
    return m


def _clone_sgd(sgd: SGD, model: Model) -> SGD:
    new = SGD(model.parameters(), sgd.momentum, sgd.weight_decay)
    new.velocity = [v.copy() for v in sgd.velocity]
    return new


def distill(
    cfg: RunConfig,
    teacher: Model,
    train: Sequence[TrainSample] | Batches,
    out_dir: str | Path | None = None,
    mode: str | None = None,
    transfer: L.TransferConfig | None = None,
    warm=None,
    cache: TeacherCache | None = None,
    seed: int | None = None,
) -> DistillResult:
    """Warm students on ground truth, then train them against the frozen teacher.

    ``mode`` is ``NOKD`` (ground truth only), ``TSKD`` (one student, transfer
    loss) or ``TSsKD`` (students co-trained with sharing). ``warm`` may carry
    ``(models, sgds, logs)`` from :func:`warm_start` so several branches reuse
    one warmup; the models are copied, never modified.
    """
    mode = mode or cfg.distill_mode
    transfer = transfer or cfg.transfer
    seed = cfg.seed if seed is None else seed
    if mode not in ("NOKD", "TSKD", "TSsKD"):
        raise ValidationError(f"unknown mode {mode!r}")
    data = train if isinstance(train, Batches) else Batches(train, cfg.np_dtype)
    run_cfg = replace(cfg, distill_mode=mode)
    configs = student_configs(run_cfg)
    for arch in configs:
        if arch.head_kind != teacher.cfg.head_kind:
            raise ValidationError(f"student head {arch.head_kind} does not match teacher head {teacher.cfg.head_kind}")
        if (arch.template_size, arch.search_size) != (teacher.cfg.template_size, teacher.cfg.search_size):
            raise ValidationError("student and teacher input sizes differ")
    teacher.set_requires_grad(False)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if warm is None:
        warm = warm_start(run_cfg, configs, data, seed)
    models = [_clone(m) for m in warm[0][: len(configs)]]
    sgds = [_clone_sgd(s, m) for s, m in zip(warm[1], models)]
    warm_logs = [r for r in warm[2] if r["student"] in {f"s{i + 1}" for i in range(len(configs))}]
    names = [f"s{i + 1}" for i in range(len(configs))]

    metrics = MetricsWriter(out / "metrics.csv") if out else None
    jsonl = open(out / "losses.jsonl", "w") if out else None
    step = 0
    if metrics:
        for r in warm_logs:
            metrics.write(r)
    W, E = cfg.optim.warmup_epochs, cfg.optim.epochs
    total = W + E
    if cache is None and mode != "NOKD":
        cache = TeacherCache(teacher, data, transfer.layers_for(len(teacher.cfg.layers)))
    try:
        for e in range(W, total):
            lr = lr_schedule(e, total, cfg.optim.lr_start, cfg.optim.lr_end)
            sums = [dict() for _ in models]
            count = 0
            for idx in data.order(seed, e, cfg.optim.batch_size):
                z, x, gt = data.get(idx)
                outs = [m(z, x) for m in models]
                records = _step_losses(mode, outs, cache, idx, gt, transfer, cfg.sharing, e - W)
                total_loss = None
                for i, (t, parts) in enumerate(records):
                    _check_finite(parts["total"], f"{names[i]} loss")
                    total_loss = t if total_loss is None else total_loss + t
                    for k, v in parts.items():
                        sums[i][k] = sums[i].get(k, 0.0) + v
                for s in sgds:
                    s.zero_grad()
                total_loss.backward()
                for s in sgds:
                    s.step(lr)
                count += 1
                if jsonl and step % cfg.log_every == 0:
                    rec = {"step": step, "epoch": e, "phase": "main", "mode": mode,
                           "students": {n: parts for n, (_, parts) in zip(names, records)}}
                    jsonl.write(json.dumps(rec) + "\n")
                step += 1
            for i, n in enumerate(names):
                row = {k: v / count for k, v in sums[i].items()}
                row.update(epoch=e, phase="main", student=n, lr=lr, loss=row.pop("total"))
                if metrics:
                    metrics.write(row)
            log.info("%s epoch %d lr %.3g %s", mode, e, lr, [round(s.get("total", 0) / count, 4) for s in sums])
    finally:
        if metrics:
            metrics.close()
        if jsonl:
            jsonl.close()
    if out:
        for n, m in zip(names, models):
            save_checkpoint(out / f"{n}.ckpt", m, total, {"mode": mode})
    return DistillResult(models, names, out / "losses.jsonl" if out else None, out / "metrics.csv" if out else None)


def _step_losses(mode, outs, cache, idx, gt, transfer, sharing, main_epoch):
    if mode == "NOKD":
        res = []
        for o in outs:
            loss = gt_loss(o, gt)
            res.append((loss, {"gt": loss.item(), "total": loss.item()}))
        return res
    teacher = cache.get(idx)
    if mode == "TSKD":
        kt = L.knowledge_transfer_loss(outs[0], teacher, gt, transfer)
        with ad.no_grad():
            kt.parts["gt"] = gt_loss(outs[0], gt).item()
        return [(kt.total, kt.parts)]
    with ad.no_grad():
        gts = [gt_loss(o, gt).item() for o in outs]
    res = L.tsskd_loss(list(zip(outs, gts)), teacher, gt, transfer, sharing, main_epoch)
    return [(p.total, p.parts) for p in res.per_student]


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    dp: float
    op: float
    auc: float
    dp_threshold: float
    thresholds: list
    success_curve: list
    params: int = 0
    size_bytes: int = 0
    samples_per_sec: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def success_curve(ious: np.ndarray, thresholds: Sequence[float] = AUC_THRESHOLDS) -> np.ndarray:
    """Fraction of frames with ``IoU >= t`` (and any overlap at all) per threshold."""
    ious = np.asarray(ious, dtype=float)
    return np.array([np.mean((ious > 0) & (ious >= t)) for t in thresholds])


def tracking_metrics(pred: np.ndarray, truth: np.ndarray, search_size: int = 64, thresholds=AUC_THRESHOLDS):
    """``(dp, op, auc, dp_threshold, curve)`` for per-frame boxes ``(cx, cy, w, h)``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if len(pred) == 0:
        raise ValidationError("no frames to evaluate")
    if pred.shape != truth.shape:
        raise ValidationError(f"prediction shape {pred.shape} vs ground truth {truth.shape}")
    ious = np.array([iou_many(p[None], t)[0] for p, t in zip(pred, truth)])
    dist = np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])
    dp_thr = DP_PIXELS * search_size / DP_REFERENCE
    curve = success_curve(ious, thresholds)
    op = float(np.mean((ious > 0) & (ious >= 0.5)))
    return float(np.mean(dist <= dp_thr)), op, float(curve.mean()), dp_thr, curve


def predict_boxes(model: Model, samples: Sequence[TrainSample], batch_size: int = 64) -> np.ndarray:
    """Top-1 decoded box per sample, in search-region pixels."""
    preds = []
    with ad.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            z = np.stack([s.z for s in chunk]).astype(model.dtype)
            x = np.stack([s.x for s in chunk]).astype(model.dtype)
            wh = np.array([s.meta.get("template_wh", s.box[2:]) for s in chunk], dtype=float)
            boxes, _ = rank_proposals(model.cfg, model(z, x), 1, wh)
            preds.append(boxes[:, 0])
    return np.concatenate(preds)


def evaluate(model: Model | str | Path, valset: Sequence[TrainSample], thresholds=AUC_THRESHOLDS) -> EvalReport:
    """DP / OP / AUC of top-1 predictions against the samples' boxes."""
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if len(valset) == 0:
        raise ValidationError("empty validation set")
    t0 = time.perf_counter()
    pred = predict_boxes(model, valset)
    elapsed = time.perf_counter() - t0
    truth = np.stack([s.box for s in valset])
    dp, op, auc, thr, curve = tracking_metrics(pred, truth, model.cfg.search_size, thresholds)
    return EvalReport(
        dp, op, auc, thr, list(map(float, thresholds)), curve.tolist(),
        param_count(model), model_size_bytes(model), len(valset) / max(elapsed, 1e-9),
    )


# ---------------------------------------------------------------------------
# Sequence tracking


@dataclass
class TrackResult:
    boxes: list  # one per frame, frame 0 is the initial box
    clamped: list  # per-frame flag: the prediction left the frame and was clamped

    @property
    def predictions(self) -> list:
        return self.boxes[1:]

    def __len__(self) -> int:
        return len(self.boxes)


def crop(frame: np.ndarray, cx: float, cy: float, size: int) -> np.ndarray:
    """``size``x``size`` patch centred on ``(cx, cy)``; outside pixels take the frame mean."""
    c, H, W = frame.shape
    x0 = int(round(cx - size / 2))
    y0 = int(round(cy - size / 2))
    patch = np.empty((c, size, size), dtype=frame.dtype)
    patch[:] = frame.mean(axis=(1, 2), keepdims=True)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, W), min(y0 + size, H)
    if sx1 > sx0 and sy1 > sy0:
        patch[:, sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = frame[:, sy0:sy1, sx0:sx1]
    return patch, x0, y0


def track_sequence(model: Model | str | Path, frames: Sequence[np.ndarray], init_box: Sequence[float], size_rate: float = 0.3) -> TrackResult:
    """One-pass tracking: fixed template from frame 0, search window on the last estimate.

    Box sizes are smoothed with ``size_rate``; centres leaving the frame are
    clamped and flagged.
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if len(frames) < 2:
        raise ValidationError("tracking needs at least two frames")
    cfg = model.cfg
    box = np.asarray(init_box, dtype=float)
    z, _, _ = crop(np.asarray(frames[0]), box[0], box[1], cfg.template_size)
    zt = Tensor(z.astype(model.dtype))
    boxes, flags = [box.tolist()], [False]
    with ad.no_grad():
        for frame in frames[1:]:
            frame = np.asarray(frame)
            x, x0, y0 = crop(frame, box[0], box[1], cfg.search_size)
            out = model(zt, Tensor(x.astype(model.dtype)))
            pred, _ = rank_proposals(cfg, out, 1, box[2:])
            p = pred[0]
            w = (1 - size_rate) * box[2] + size_rate * p[2]
            h = (1 - size_rate) * box[3] + size_rate * p[3]
            cx, cy = x0 + p[0], y0 + p[1]
            H, W = frame.shape[1:]
            ccx, ccy = float(np.clip(cx, 0, W)), float(np.clip(cy, 0, H))
            flags.append(bool(ccx != cx or ccy != cy))
            box = np.array([ccx, ccy, w, h])
            boxes.append(box.tolist())
    return TrackResult(boxes, flags)


# ---------------------------------------------------------------------------
# Data and search plumbing


def load_or_generate(cfg: RunConfig) -> tuple[list, list, list]:
    """``(train, val, search)`` splits, from ``data.path`` if set, else generated."""
    if cfg.data.path:
        samples, _, index = load_dataset(cfg.data.path)
        return split_by_index(samples, index.get("splits"))
    samples = generate(cfg.data.scene(), cfg.data.count, cfg.data.seed)
    return split(samples, cfg.data.ratios)


def candidate_trainer(cfg: RunConfig, train: Sequence[TrainSample], val: Sequence[TrainSample], seed: int = 0):
    """Callback: briefly train a fresh model of a config and return its top-N accuracy."""
    from .search import tracking_accuracy

    data = Batches(train, cfg.np_dtype)
    sc = cfg.search
    optim = replace(cfg.optim, warmup_epochs=0, epochs=sc.candidate_epochs)

    def run(arch: ArchConfig) -> float:
        m = build_model(arch, seed, cfg.np_dtype)
        train_supervised(m, data, range(sc.candidate_epochs), optim, sc.candidate_epochs, seed)
        return tracking_accuracy(m, val, sc.top_n)

    return run


def run_search(cfg: RunConfig, out_dir: str | Path | None = None, splits=None):
    """Full student search on the configured teacher; writes ``search.csv`` and ``dull.json``."""
    from . import search as S

    train, val, srch = splits or load_or_generate(cfg)
    pool = list(srch) + list(val)
    sc = cfg.search
    if len(pool) < sc.candidate_train + sc.candidate_val:
        pool = list(train) + pool
    ctrain = pool[: sc.candidate_train]
    cval = pool[sc.candidate_train : sc.candidate_train + sc.candidate_val]
    trainer = S.CachedTrainer(candidate_trainer(cfg, ctrain, cval, cfg.seed))
    mdp = S.MdpSpec(cfg.teacher_arch(), n_candidates=sc.n_candidates)
    policy = S.PolicyNet(mdp.horizon, sc.hidden, cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    res = S.search(policy, mdp, sc.iterations, trainer, cfg.seed, sc.lr, S.MovingBaseline(mode=sc.baseline),
                   out / "search.csv" if out else None)
    acc_t = trainer(mdp.teacher)
    summary = {
        "channels": res.best_config.channels(),
        "factors": list(res.best_actions),
        "reward": res.best_reward,
        "acc_ratio": trainer(res.best_config) / acc_t,
        "params": param_count(res.best_config),
        "teacher_params": param_count(mdp.teacher),
        "evaluations": trainer.calls,
    }
    if out:
        with open(out / "dull.json", "w") as fp:
            json.dump(summary, fp, indent=2, sort_keys=True)
            fp.write("\n")
    return res, summary


# ---------------------------------------------------------------------------
# Method comparison


METHODS = {
    "NOKD": ("NOKD", None),
    "TSKD": ("TSKD", {}),
    "AH+TS": ("TSKD", {"use_str": False}),
    "TSsKD": ("TSsKD", {}),
}


def compare_methods(
    cfg: RunConfig,
    seeds: Sequence[int],
    methods: Sequence[str] = ("NOKD", "TSKD", "AH+TS", "TSsKD"),
    out_dir: str | Path | None = None,
    splits=None,
    teacher: Model | None = None,
) -> dict:
    """Dull-student test AUC per method and seed, sharing warmups within a seed.

    Returns ``{"auc": {method: [per-seed]}, "teacher_auc": float, ...}``.
    """
    train, val, test = splits or load_or_generate(cfg)
    out = Path(out_dir) if out_dir else None
    data = Batches(train, cfg.np_dtype)
    if teacher is None:
        teacher = train_teacher(cfg, train, out / "teacher" if out else None)
    teacher.set_requires_grad(False)
    result = {"auc": {m: [] for m in methods}, "dp": {m: [] for m in methods}, "op": {m: [] for m in methods}}
    result["teacher_auc"] = evaluate(teacher, test).auc
    caches = {}
    for seed in seeds:
        configs = student_configs(replace(cfg, distill_mode="TSsKD" if "TSsKD" in methods else "TSKD"))
        warm = warm_start(cfg, configs, data, seed)
        for name in methods:
            mode, flags = METHODS[name]
            transfer = replace(cfg.transfer, **flags) if flags is not None else cfg.transfer
            key = transfer.layers_for(len(teacher.cfg.layers))
            if mode != "NOKD" and key not in caches:
                caches[key] = TeacherCache(teacher, data, key)
            res = distill(cfg, teacher, data, out / f"seed{seed}" / name if out else None, mode, transfer,
                          warm, caches.get(key), seed)
            rep = evaluate(res.students[0], test)
            for k in ("auc", "dp", "op"):
                result[k][name].append(getattr(rep, k))
            log.info("seed %d %s auc %.4f", seed, name, rep.auc)
    return result
