"""Central finite-difference checks for every differentiable op and loss.

Each case draws random 64-bit inputs, contracts the output with a random
tensor to get a scalar, and compares reverse-mode gradients with central
differences on a random subset of coordinates. The error of one instance is
``max |analytic - numeric| / max(max |numeric|, max |analytic|)``, so it is
relative to the gradient's overall scale rather than per entry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import GroundTruth
from .models import PROPOSAL, SIMILARITY, TrackerOutput, gt_loss

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    instances: int
    passed: bool


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    tol: float = 1e-4
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def format(self) -> str:
        width = max(len(r.name) for r in self.results) if self.results else 4
        lines = [f"{'case':<{width}}  max_rel_error  status"]
        for r in self.results:
            lines.append(f"{r.name:<{width}}  {r.max_rel_error:13.3e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"{len(self.results) - len(self.failures)}/{len(self.results)} passed (tol {self.tol:g}, {self.seconds:.1f}s)")
        return "\n".join(lines)


def _away_from_zero(rng, shape, margin=0.05):
    a = rng.standard_normal(shape)
    return np.where(np.abs(a) < margin, np.sign(a + 1e-300) * margin + a, a)


def _projected(fn, rng, out_shape_probe):
    r = rng.standard_normal(out_shape_probe)

    def wrapped(*ts):
        out = fn(*ts)
        return (out * Tensor(r)).sum() if out.ndim else out

    return wrapped


def _unary(fn, positive=False, kink=False):
    def build(rng):
        a = rng.uniform(0.5, 2.0, (3, 4)) if positive else (_away_from_zero(rng, (3, 4)) if kink else rng.standard_normal((3, 4)))
        return fn, [a]

    return build


def _binary(fn, nonzero_b=False):
    def build(rng):
        b = rng.uniform(0.5, 2.0, (4,)) * rng.choice([-1, 1], 4) if nonzero_b else rng.standard_normal((4,))
        return fn, [rng.standard_normal((3, 4)), b]

    return build


def _conv(stride, bias):
    def build(rng):
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        arrays = [x, w] + ([rng.standard_normal(4)] if bias else [])
        return (lambda x, w, *b: ad.conv2d_valid(x, w, stride, bias=b[0] if b else None)), arrays

    return build


def _grouped(rng):
    return (lambda s, t: ad.grouped_xcorr(s, t, 3)), [rng.standard_normal((2, 6, 7, 6)), rng.standard_normal((2, 6, 3, 2))]


def _xcorr(rng):
    return ad.xcorr, [rng.standard_normal((3, 6, 6)), rng.standard_normal((3, 3, 3))]


def _resize(mode):
    def build(rng):
        return (lambda a: ad.resize2d(a, (7, 5), mode)), [rng.standard_normal((2, 4, 3))]

    return build


def _kl(rng):
    p = rng.dirichlet(np.ones(3), size=4)
    q = rng.dirichlet(np.ones(3), size=4)
    return ad.kl_terms, [p, q]


def _smooth_l1(rng):
    a = rng.standard_normal((3, 5)) * 2
    b = rng.standard_normal((3, 5)) * 2
    d = a - b
    a = np.where(np.abs(np.abs(d) - 1) < 0.05, a + 0.2, a)
    return ad.smooth_l1_terms, [a, b]


def _logistic(rng):
    labels = rng.choice([-1.0, 1.0], (3, 4))
    return (lambda s: ad.logistic_terms(s, Tensor(labels))), [rng.standard_normal((3, 4)) * 2]


def _getitem(rng):
    idx = (np.array([0, 2, 2]), np.array([1, 3, 1]))
    return (lambda a: a[idx] * 1.0 + a[1:, ::2].sum()), [rng.standard_normal((3, 4))]


OP_CASES: dict[str, Builder] = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, nonzero_b=True),
    "neg": _unary(lambda a: -a),
    "pow": _unary(lambda a: a**2.5, positive=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "abs": _unary(ad.absolute, kink=True),
    "relu": _unary(ad.relu, kink=True),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid),
    "sum": _unary(lambda a: a.sum(axis=1, keepdims=True) * a),
    "mean": _unary(lambda a: ad.mean(a, axis=0) * 3.0),
    "reshape": _unary(lambda a: a.reshape(2, 6) * Tensor(np.arange(12.0).reshape(2, 6))),
    "transpose": _unary(lambda a: a.transpose(1, 0) * Tensor(np.arange(12.0).reshape(4, 3))),
    "getitem": _getitem,
    "concat": _binary(lambda a, b: ad.concat([a, b.reshape(1, 4)], axis=0) ** 2),
    "stack": _binary(lambda a, b: ad.stack([a[0], b], axis=1) ** 2),
    "matmul": lambda rng: (lambda a, b: a @ b, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
    "conv2d_s1": _conv(1, False),
    "conv2d_s2_bias": _conv(2, True),
    "grouped_xcorr": _grouped,
    "xcorr": _xcorr,
    "resize_bilinear": _resize("bilinear"),
    "resize_nearest": _resize("nearest"),
    "l2_normalize": lambda rng: (ad.l2_normalize, [rng.standard_normal((2, 3, 4))]),
    "softmax_t": lambda rng: ((lambda a: ad.softmax_t(a, 2.0)), [rng.standard_normal((3, 5))]),
    "log_softmax": lambda rng: (ad.log_softmax, [rng.standard_normal((3, 5))]),
    "kl_terms": _kl,
    "smooth_l1": _smooth_l1,
    "mse": _binary(lambda a, b: ad.mse(a, a * b + b)),
    "logistic": _logistic,
    "channel_abs_sum": lambda rng: (ad.channel_abs_sum, [_away_from_zero(rng, (2, 3, 4, 4))]),
}


# ---------------------------------------------------------------------------
# Loss cases built on hand-made tracker outputs

_N, _K, _S = 2, 2, 3
_FEAT_X = ((3, 7), (4, 5))
_FEAT_Z = ((3, 3), (4, 3))


def _random_gt(rng, head: str) -> GroundTruth:
    labels = rng.choice([-1, 0, 1], (_N, _K, _S, _S), p=[0.5, 0.3, 0.2])
    labels[:, 0, 0, 0] = 1
    labels[:, 1, 2, 2] = -1
    score = rng.choice([-1, 0, 1], (_N, _S, _S), p=[0.5, 0.3, 0.2])
    score[:, 1, 1], score[:, 0, 0] = 1, -1
    return GroundTruth(labels, rng.standard_normal((_N, 4 * _K, _S, _S)) * 0.5, score, np.zeros((_N, 4)), False)


def _output_arrays(rng, head: str) -> list[np.ndarray]:
    arrays = [rng.standard_normal((_N, 2 * _K if head == PROPOSAL else 1, _S, _S))]
    if head == PROPOSAL:
        arrays.append(rng.standard_normal((_N, 4 * _K, _S, _S)) * 0.5)
    for c, s in _FEAT_X:
        arrays.append(_away_from_zero(rng, (_N, c, s, s)))
    for c, s in _FEAT_Z:
        arrays.append(_away_from_zero(rng, (_N, c, s, s)))
    return arrays


def _as_output(ts: Sequence[Tensor], head: str) -> TrackerOutput:
    ts = list(ts)
    cls = ts.pop(0)
    reg = ts.pop(0) if head == PROPOSAL else None
    n = len(_FEAT_X)
    return TrackerOutput(cls, reg, ts[:n], ts[n : 2 * n], head, batched=True)


def _n_out(head: str) -> int:
    return (2 if head == PROPOSAL else 1) + len(_FEAT_X) + len(_FEAT_Z)


_TCFG = L.TransferConfig(str_layers=(0, 1))


def _loss_case(kind: str, head: str) -> Builder:
    def build(rng):
        gt = _random_gt(rng, head)
        teacher = _as_output([Tensor(a) for a in _output_arrays(rng, head)], head)
        student = _output_arrays(rng, head)
        if kind == "ts":
            return (lambda *ts: L.ts_loss(_as_output(ts, head), teacher, _TCFG, gt)), student
        if kind in ("ts_tracker", "ts_dense", "ts_all"):
            cfg = replace(_TCFG, ts_anchors=kind[3:])
            return (lambda *ts: L.ts_loss(_as_output(ts, head), teacher, cfg, gt)), student
        if kind == "ts_plain":
            return (lambda *ts: L.ts_loss(_as_output(ts, head), teacher, L.TransferConfig(temp=2.0))), student
        if kind == "ah":
            return (lambda *ts: L.ah_loss(_as_output(ts, head), teacher, gt, _TCFG)), student
        if kind == "str":
            return (lambda *ts: L.str_loss(_as_output(ts, head), teacher, _TCFG)), student
        if kind == "kt":
            return (lambda *ts: L.knowledge_transfer_loss(_as_output(ts, head), teacher, gt, _TCFG).total), student
        if kind == "gt":
            return (lambda *ts: gt_loss(_as_output(ts, head), gt)), student
        if kind == "ks":
            other = _as_output([Tensor(a) for a in _output_arrays(rng, head)], head)
            labels = gt.anchor_labels if head == PROPOSAL else gt.score_labels
            return (lambda *ts: L.ks_loss(_as_output(ts, head), other, labels)), student
        if kind.startswith("tsskd"):
            # Each student's objective is checked against its own outputs with
            # the other student frozen: sharing terms treat the counterpart as
            # a constant, so a joint finite difference would disagree by design.
            who = int(kind[-1])
            other = _as_output([Tensor(a) for a in _output_arrays(rng, head)], head)
            scfg = L.SharingConfig(h=1e9)

            def fn(*ts):
                mine = _as_output(ts, head)
                pair = [(mine, 0.3), (other, 0.2)] if who == 0 else [(other, 0.3), (mine, 0.2)]
                return L.tsskd_loss(pair, teacher, gt, _TCFG, scfg, epoch=1).per_student[who].total

            return fn, student
        raise KeyError(kind)

    return build


LOSS_CASES: dict[str, Builder] = {}
for _head in (PROPOSAL, SIMILARITY):
    for _kind in ("ts", "ts_tracker", "ts_dense", "ts_all", "ts_plain", "ah", "str", "kt", "gt", "ks", "tsskd0", "tsskd1"):
        LOSS_CASES[f"loss_{_kind}_{_head}"] = _loss_case(_kind, _head)

ALL_CASES: dict[str, Builder] = {**OP_CASES, **LOSS_CASES}

# Coordinates probed per input and instance; loss cases are costlier to evaluate.
OP_COORDS = 24
LOSS_COORDS = 8


# ---------------------------------------------------------------------------


def numeric_grad(fn: Callable[..., Tensor], arrays: list[np.ndarray], i: int, coords, eps: float = 1e-6) -> np.ndarray:
    a = arrays[i]
    out = np.empty(len(coords))
    for n, idx in enumerate(coords):
        old = a[idx]
        a[idx] = old + eps
        with ad.no_grad():
            fp = fn(*[Tensor(x) for x in arrays]).item()
        a[idx] = old - eps
        with ad.no_grad():
            fm = fn(*[Tensor(x) for x in arrays]).item()
        a[idx] = old
        out[n] = (fp - fm) / (2 * eps)
    return out


def check_instance(builder: Builder, rng: np.random.Generator, max_coords: int = 24) -> float:
    """Relative gradient error of one random instance, maximised over inputs."""
    fn, arrays = builder(rng)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    scalar_fn = _projected(fn, rng, probe.shape)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    scalar_fn(*leaves).backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        flat = list(np.ndindex(arrays[i].shape))
        pick = rng.choice(len(flat), size=min(max_coords, len(flat)), replace=False)
        coords = [flat[p] for p in sorted(pick)]
        num = numeric_grad(scalar_fn, arrays, i, coords)
        ana = np.array([grad[c] for c in coords])
        scale = max(np.abs(num).max(), np.abs(ana).max())
        if scale < 1e-10:
            continue
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


def gradcheck_suite(instances: int = 25, seed: int = 0, tol: float = 1e-4, only: Sequence[str] | None = None) -> GradcheckReport:
    """Run every registered case ``instances`` times; report the worst error per case."""
    names = list(ALL_CASES) if only is None else list(only)
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {unknown}")
    report = GradcheckReport(tol=tol)
    t0 = time.perf_counter()
    for k, name in enumerate(names):
        rng = np.random.default_rng([seed, k])
        coords = LOSS_COORDS if name in LOSS_CASES else OP_COORDS
        errs = [check_instance(ALL_CASES[name], rng, coords) for _ in range(instances)]
        worst = max(errs)
        report.results.append(CheckResult(name, worst, instances, bool(worst < tol)))
    report.seconds = time.perf_counter() - t0
    return report
