"""Selection of a compressed student by sequential per-layer channel shrinking.

An LSTM policy walks over the extractor layers and picks a width factor for
each one. Every step yields ``n_candidates`` partially shrunk networks whose
rewards trade compression against accuracy; the policy is trained with
REINFORCE against a moving baseline.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import iou_many
from .errors import NumericError, ValidationError
from .models import ArchConfig, Model, TrackerOutput, model_size_bytes, rank_proposals

log = logging.getLogger(__name__)

FACTORS = tuple(round(0.1 * i, 1) for i in range(1, 11))
ORACLE_LIMIT = 10**4

Trainer = Callable[[ArchConfig], float]


def _check_factor(f: float) -> float:
    for g in FACTORS:
        if abs(f - g) < 1e-9:
            return g
    raise ValidationError(f"factor {f} is not on the grid {FACTORS}")


def apply_action(cfg: ArchConfig, action: Sequence[float]) -> ArchConfig:
    """Scale the first ``len(action)`` layer widths; remaining layers keep theirs.

    Widths become ``max(1, round(c * f))`` (round half to even).
    """
    factors = [_check_factor(float(f)) for f in action]
    if len(factors) > len(cfg.layers):
        raise ValidationError(f"{len(factors)} factors for {len(cfg.layers)} layers")
    chans = cfg.channels()
    new = [max(1, round(c * f)) for c, f in zip(chans, factors)] + chans[len(factors) :]
    return cfg.with_channels(new)


def _fixed_wh(samples) -> np.ndarray:
    return np.array([s.meta.get("template_wh", s.box[2:]) for s in samples], dtype=float)


def tracking_accuracy(model: Model, valset: Sequence, top_n: int = 5, batch_size: int = 64) -> float:
    """Sum over samples of the IoUs of the ``top_n`` most confident decoded boxes."""
    if top_n < 1:
        raise ValidationError(f"top_n must be >= 1, got {top_n}")
    if len(valset) == 0:
        raise ValidationError("empty validation set")
    total = 0.0
    with ad.no_grad():
        for lo in range(0, len(valset), batch_size):
            chunk = valset[lo : lo + batch_size]
            z = np.stack([s.z for s in chunk]).astype(model.dtype)
            x = np.stack([s.x for s in chunk]).astype(model.dtype)
            out = model(z, x)
            boxes, _ = rank_proposals(model.cfg, out, top_n, _fixed_wh(chunk))
            for b, s in zip(boxes, chunk):
                total += float(iou_many(b, s.box).sum())
    return total


def reward(student_size: float, teacher_size: float, acc_s: float, acc_t: float) -> float:
    """``C (2 - C) acc_s / acc_t`` with compression ``C = 1 - student_size / teacher_size``."""
    if student_size <= 0 or teacher_size <= 0:
        raise ValidationError("model sizes must be positive")
    if acc_t == 0:
        raise ValidationError("teacher accuracy is zero")
    c = 1.0 - student_size / teacher_size
    return c * (2.0 - c) * (acc_s / acc_t)


def step_reward(rewards: Sequence[float]) -> float:
    if len(rewards) == 0:
        raise ValidationError("no rewards at this step")
    return float(np.mean(rewards))


@dataclass(frozen=True)
class MdpSpec:
    """Shrinking MDP over ``teacher``'s layers; the horizon is the layer count."""

    teacher: ArchConfig
    gamma: float = 1.0
    n_candidates: int = 3
    horizon: int | None = None

    def __post_init__(self):
        if self.gamma != 1.0:
            raise ValidationError("the shrinking MDP is undiscounted (gamma must be 1)")
        if self.n_candidates < 1:
            raise ValidationError("n_candidates must be >= 1")
        T = len(self.teacher.layers)
        if self.horizon is None:
            object.__setattr__(self, "horizon", T)
        elif self.horizon != T:
            raise ValidationError(f"horizon {self.horizon} differs from the layer count {T}")


class PolicyNet:
    """Single-layer LSTM emitting a 10-way factor distribution per layer.

    The input at step ``t`` is the previous factor (one-hot, zeros at ``t=0``)
    concatenated with the layer position (one-hot).
    """

    def __init__(self, horizon: int, hidden: int = 32, seed: int = 0):
        self.horizon = horizon
        self.hidden = hidden
        n_in = len(FACTORS) + horizon
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(n_in + hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget gate
        self.params = {
            "lstm.weight": Tensor(rng.uniform(-scale, scale, (n_in + hidden, 4 * hidden)), requires_grad=True),
            "lstm.bias": Tensor(bias, requires_grad=True),
            "head.weight": Tensor(rng.uniform(-scale, scale, (hidden, len(FACTORS))), requires_grad=True),
            "head.bias": Tensor(np.zeros(len(FACTORS)), requires_grad=True),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _inputs(self, t: int, prev: np.ndarray | None, batch: int) -> np.ndarray:
        inp = np.zeros((batch, len(FACTORS) + self.horizon))
        if prev is not None:
            inp[np.arange(batch), prev] = 1.0
        inp[:, len(FACTORS) + t] = 1.0
        return inp

    def step(self, inp: np.ndarray, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """One recurrent step; returns ``(logits, h, c)``."""
        H = self.hidden
        gates = ad.concat([Tensor(inp), h], axis=1) @ self.params["lstm.weight"] + self.params["lstm.bias"]
        i = ad.sigmoid(gates[:, :H])
        f = ad.sigmoid(gates[:, H : 2 * H])
        g = ad.tanh(gates[:, 2 * H : 3 * H])
        o = ad.sigmoid(gates[:, 3 * H :])
        c = f * c + i * g
        h = o * ad.tanh(c)
        return h @ self.params["head.weight"] + self.params["head.bias"], h, c

    def log_probs(self, actions: np.ndarray) -> tuple[Tensor, list[float]]:
        """Teacher-forced log-probabilities ``[T, B]`` of recorded action indices ``[T, B]``."""
        T, B = actions.shape
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        rows, summary = [], []
        prev = None
        for t in range(T):
            logits, h, c = self.step(self._inputs(t, prev, B), h, c)
            logp = ad.log_softmax(logits)
            rows.append(logp[np.arange(B), actions[t]])
            summary.append(float(np.abs(h.data).mean()))
            prev = actions[t]
        return ad.stack(rows, axis=0), summary

    def distributions(self, actions: np.ndarray | None = None, batch: int = 1) -> np.ndarray:
        """Per-step factor distributions ``[T, B, 10]`` along given (or greedy) actions."""
        out = []
        with ad.no_grad():
            h = Tensor(np.zeros((batch, self.hidden)))
            c = Tensor(np.zeros((batch, self.hidden)))
            prev = None
            for t in range(self.horizon):
                logits, h, c = self.step(self._inputs(t, prev, batch), h, c)
                p = ad.softmax_t(logits, 1.0).data
                out.append(p)
                prev = p.argmax(axis=1) if actions is None else actions[t]
        return np.stack(out)

    def sample(self, rng: np.random.Generator, batch: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
        """Draw ``batch`` action sequences; returns indices ``[T, B]``, log-probs and hidden summaries."""
        acts, logps, summary = [], [], []
        with ad.no_grad():
            h = Tensor(np.zeros((batch, self.hidden)))
            c = Tensor(np.zeros((batch, self.hidden)))
            prev = None
            for t in range(self.horizon):
                logits, h, c = self.step(self._inputs(t, prev, batch), h, c)
                logp = ad.log_softmax(logits).data
                p = np.exp(logp)
                u = rng.random(batch)
                a = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), len(FACTORS) - 1)
                acts.append(a)
                logps.append(logp[np.arange(batch), a])
                summary.append(float(np.abs(h.data).mean()))
                prev = a
        return np.stack(acts), np.stack(logps), summary


@dataclass
class SearchStep:
    hidden_state_summary: float
    sampled_actions: list[tuple[float, ...]]
    configs: list[ArchConfig]
    rewards: list[float]
    log_probs: list[float]
    acc_ratios: list[float]
    compressions: list[float]


@dataclass
class SearchTrajectory:
    actions: np.ndarray  # [T, N_a] factor indices
    steps: list[SearchStep] = field(default_factory=list)

    def reward_matrix(self) -> np.ndarray:
        return np.array([s.rewards for s in self.steps], dtype=float)


class MovingBaseline:
    """State-independent baseline.

    ``mode="ema"`` keeps an exponential moving average (``momentum``) of
    per-rollout mean rewards, initialised with the first mean; ``mode="batch"``
    uses the current rollout's mean alone.
    """

    def __init__(self, momentum: float = 0.9, mode: str = "ema"):
        if mode not in ("ema", "batch"):
            raise ValidationError(f"unknown baseline mode {mode!r}")
        if not 0 <= momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self.mode = mode
        self.value: float | None = None

    def update(self, rewards: np.ndarray) -> float:
        batch = float(np.mean(rewards))
        if self.mode == "batch" or self.value is None:
            self.value = batch
        else:
            self.value = self.momentum * self.value + (1 - self.momentum) * batch
        return self.value


class CachedTrainer:
    """Memoises a candidate-accuracy callback by layer widths."""

    def __init__(self, trainer: Trainer):
        self.trainer = trainer
        self.cache: dict[tuple, float] = {}
        self.calls = 0

    def __call__(self, cfg: ArchConfig) -> float:
        key = (tuple(cfg.channels()), cfg.head_channels)
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = self.trainer(cfg)
        return self.cache[key]


def _candidate_accuracy(trainer: Trainer, cfg: ArchConfig) -> float:
    try:
        acc = float(trainer(cfg))
    except NumericError as exc:
        log.warning("candidate %s diverged: %s", cfg.channels(), exc)
        return float("nan")
    return acc


def rollout(policy: PolicyNet, mdp: MdpSpec, trainer: Trainer, seed: int, teacher_acc: float | None = None) -> SearchTrajectory:
    """Sample ``n_candidates`` factor sequences and score each prefix.

    The candidate at step ``t`` applies the first ``t + 1`` factors. A
    candidate whose accuracy is not finite receives reward 0.
    """
    rng = np.random.default_rng(seed)
    acc_t = trainer(mdp.teacher) if teacher_acc is None else teacher_acc
    size_t = model_size_bytes(mdp.teacher)
    acts, logps, summary = policy.sample(rng, mdp.n_candidates)
    traj = SearchTrajectory(acts)
    for t in range(mdp.horizon):
        step = SearchStep(summary[t], [], [], [], logps[t].tolist(), [], [])
        for i in range(mdp.n_candidates):
            factors = tuple(FACTORS[a] for a in acts[: t + 1, i])
            cfg = apply_action(mdp.teacher, factors)
            acc = _candidate_accuracy(trainer, cfg)
            size = model_size_bytes(cfg)
            if math.isfinite(acc):
                r = reward(size, size_t, acc, acc_t)
            else:
                log.warning("reward 0 for non-finite candidate %s", cfg.channels())
                r, acc = 0.0, 0.0
            step.sampled_actions.append(factors)
            step.configs.append(cfg)
            step.rewards.append(r)
            step.acc_ratios.append(acc / acc_t)
            step.compressions.append(1.0 - size / size_t)
        traj.steps.append(step)
    return traj


def policy_gradient_loss(policy: PolicyNet, traj: SearchTrajectory, b: float) -> Tensor:
    """Negative surrogate whose gradient is ``-sum_t mean_i grad log p(a_ti) (Rbar_t - b)``."""
    rewards = traj.reward_matrix()
    adv = rewards.mean(axis=1) - b  # [T]
    logp, _ = policy.log_probs(traj.actions)
    n_a = traj.actions.shape[1]
    weights = np.repeat(adv[:, None], n_a, axis=1) / n_a
    return -(logp * Tensor(weights)).sum()


def reinforce_update(policy: PolicyNet, traj: SearchTrajectory, baseline: MovingBaseline, lr: float) -> float:
    """Refresh the baseline, then take one gradient-ascent step. Returns the baseline used."""
    b = baseline.update(traj.reward_matrix())
    loss = policy_gradient_loss(policy, traj, b)
    for p in policy.parameters():
        p.grad = None
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in policy.parameters()]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite policy gradient; update aborted")
    for p, g in zip(policy.parameters(), grads):
        p.data = p.data - lr * g
    return b


SEARCH_COLUMNS = ("iteration", "mean_reward", "best_reward", "mean_acc_ratio", "mean_compression")


@dataclass
class SearchResult:
    best_config: ArchConfig
    best_reward: float
    best_actions: tuple[float, ...]
    records: list[dict]
    policy: PolicyNet


def search(
    policy: PolicyNet,
    mdp: MdpSpec,
    iterations: int,
    trainer: Trainer,
    seed: int = 0,
    lr: float = 3.0,
    baseline: MovingBaseline | None = None,
    log_path: str | Path | None = None,
) -> SearchResult:
    """Alternate rollouts and policy updates; keep the best candidate seen.

    Ties in reward keep the earliest candidate. One record per iteration is
    returned (and written as CSV to ``log_path`` if given).
    """
    if iterations < 1:
        raise ValidationError(f"iterations must be >= 1, got {iterations}")
    if policy.horizon != mdp.horizon:
        raise ValidationError(f"policy horizon {policy.horizon} != MDP horizon {mdp.horizon}")
    baseline = baseline or MovingBaseline()
    acc_t = trainer(mdp.teacher)
    seeds = np.random.SeedSequence(seed).spawn(iterations)
    best = (-math.inf, None, None)
    records = []
    for it in range(iterations):
        traj = rollout(policy, mdp, trainer, seeds[it], acc_t)
        for step in traj.steps:
            for r, cfg, fac in zip(step.rewards, step.configs, step.sampled_actions):
                if r > best[0]:
                    best = (r, cfg, fac)
        rewards = traj.reward_matrix()
        records.append(
            {
                "iteration": it,
                "mean_reward": float(rewards.mean()),
                "best_reward": float(rewards.max()),
                "mean_acc_ratio": float(np.mean([s.acc_ratios for s in traj.steps])),
                "mean_compression": float(np.mean([s.compressions for s in traj.steps])),
            }
        )
        reinforce_update(policy, traj, baseline, lr)
        log.info("search iteration %d mean reward %.4f best so far %.4f %s", it, records[-1]["mean_reward"], best[0], best[1].channels())
    if log_path is not None:
        write_search_log(log_path, records)
    return SearchResult(best[1], best[0], best[2], records, policy)


def write_search_log(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(SEARCH_COLUMNS)
        for r in records:
            w.writerow([r["iteration"]] + [repr(float(r[c])) for c in SEARCH_COLUMNS[1:]])


def brute_force_oracle(mdp: MdpSpec, trainer: Trainer) -> tuple[ArchConfig, float]:
    """Exhaustive argmax of the final-step reward over every factor sequence."""
    n = len(FACTORS) ** mdp.horizon
    if n > ORACLE_LIMIT:
        raise ValidationError(f"{n} sequences exceed the oracle bound of {ORACLE_LIMIT}")
    acc_t = trainer(mdp.teacher)
    size_t = model_size_bytes(mdp.teacher)
    best = (None, -math.inf)
    for factors in itertools.product(FACTORS, repeat=mdp.horizon):
        cfg = apply_action(mdp.teacher, factors)
        acc = _candidate_accuracy(trainer, cfg)
        r = reward(model_size_bytes(cfg), size_t, acc, acc_t) if math.isfinite(acc) else 0.0
        if r > best[1]:
            best = (cfg, r)
    return best


class ToyAccuracy:
    """Deterministic stand-in for candidate training.

    Accuracy is ``prod_l (1 - exp(-(c_l / c0_l) / knee_l))`` over layer width
    ratios against the reference config, so narrower layers cost accuracy
    with diminishing returns.
    """

    def __init__(self, reference: ArchConfig, knees: Sequence[float]):
        if len(knees) != len(reference.layers):
            raise ValidationError("one knee per layer required")
        self.reference = np.array(reference.channels(), dtype=float)
        self.knees = np.asarray(knees, dtype=float)
        self.calls = 0

    def __call__(self, cfg: ArchConfig) -> float:
        self.calls += 1
        ratio = np.array(cfg.channels(), dtype=float) / self.reference
        return float(np.prod(1.0 - np.exp(-ratio / self.knees)))
