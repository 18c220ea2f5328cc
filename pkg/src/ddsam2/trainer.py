"""Fine-tuning: Dice + cross-entropy loss, AdamW, LR halving, subsequence sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .metrics import dice
from .model import ADAPTER_SCOPE, init_state, set_trainable, track_video, unroll

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr_adapter: float = 1e-4
    lr_decoder: float = 1e-5
    lr_halve_epoch: int | None = None  # default epochs // 2
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    videos_per_step: int = 2
    subseq_len: int = 8
    steps_per_epoch: int | None = None  # default ceil(train videos / videos_per_step)
    clip_norm: float = 1.0
    capacity: int = 4
    policy: str = "paper"
    seed: int = 0

    def __post_init__(self):
        if self.subseq_len < 2:
            raise ConfigError(f"subseq_len must be >= 2, got {self.subseq_len}")
        if self.lr_adapter <= 0 or self.lr_decoder <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 0 or self.videos_per_step < 1:
            raise ConfigError("epochs >= 0 and videos_per_step >= 1 required")

    @property
    def halve_at(self):
        return self.epochs // 2 if self.lr_halve_epoch is None else self.lr_halve_epoch

    def lr_scale(self, epoch):
        return 0.5 if epoch >= self.halve_at else 1.0

    def lr_for(self, name, epoch):
        base = self.lr_adapter if name.startswith(ADAPTER_SCOPE) else self.lr_decoder
        return base * self.lr_scale(epoch)


# ---------------------------------------------------------------- losses


def _target(logits, target):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.dims:
        target = target.reshape(logits.dims) if target.size == logits.size else None
    if target is None:
        raise ShapeError(f"target does not match logits dims {logits.dims}")
    return T.Tensor(target)


def dice_loss(logits, target, smooth=1.0):
    t = _target(logits, target)
    p = T.sigmoid(logits)
    inter = T.sum_all(p * t)
    denom = T.sum_all(p) + (float(t.data.sum()) + smooth)
    return 1.0 - (2.0 * inter + smooth) / denom


def ce_loss(logits, target):
    """Mean binary cross-entropy with logits: softplus(z) - t*z."""
    t = _target(logits, target)
    return T.mean_all(T.softplus(logits) - logits * t)


def combined_loss(logits, target):
    return 0.5 * dice_loss(logits, target) + 0.5 * ce_loss(logits, target)


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(state, grads, opt, lr_map, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update of every trainable parameter.

    ``lr_map`` is a dict name -> lr or a callable name -> lr.
    """
    names = state.trainable_names()
    missing = [n for n in names if grads.get(n) is None]
    if missing:
        raise UsageError(f"missing gradient for trainable parameter {missing[0]!r}")
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for n in names:
        p = state.params[n]
        g = grads[n]
        lr = lr_map(n) if callable(lr_map) else lr_map[n]
        m = opt.m.get(n)
        if m is None:
            m = opt.m[n] = np.zeros_like(p.data)
            opt.v[n] = np.zeros_like(p.data)
        v = opt.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update
    return state, opt


def clip_gradients(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for n in grads:
            grads[n] = grads[n] * scale
    return total


# ---------------------------------------------------------------- data


def sample_subsequence(video, length, rng):
    """Contiguous window of ``length`` frames as a slice; whole video if shorter."""
    n = len(video)
    if n <= length:
        return slice(0, n)
    start = int(rng.integers(0, n - length + 1))
    return slice(start, start + length)


# ---------------------------------------------------------------- loop


def _step_loss(state, batch, capacity):
    """Sum of combined losses over frames 1..L-1 of every video in ``batch``."""
    total = None
    groups = {}
    for frames, masks in batch:
        groups.setdefault(len(frames), []).append((frames, masks))
    for items in groups.values():
        frames = np.stack([f for f, _ in items])
        masks = np.stack([m for _, m in items])
        logits, _ = unroll(frames, masks[:, 0], state, capacity)
        for i, lg in enumerate(logits, start=1):
            for v in range(len(items)):
                term = combined_loss(T.take(lg, slice(v, v + 1), 0), masks[v, i])
                total = term if total is None else total + term
    return total


def video_dice(state, samples, capacity=4):
    """Mean over videos of the frames-1..T-1 mean Dice of ``track_video``."""
    scores = []
    for s in samples:
        preds = track_video(s.frames, s.masks[0], state, capacity=capacity)
        scores.append(np.mean([dice(preds[t], s.masks[t]) for t in range(1, len(s))]))
    return float(np.mean(scores)) if scores else float("nan")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float


def train_run(train, val, model_cfg, tcfg, state=None):
    """Fine-tune and return (validation-best state, per-epoch log).

    ``state`` defaults to a fresh initialisation seeded by ``tcfg.seed``.
    """
    if not train:
        raise UsageError("training split is empty")
    if state is None:
        state = init_state(model_cfg, tcfg.seed, tcfg.policy)
    else:
        state = set_trainable(state.copy(), tcfg.policy)
    rng = np.random.default_rng(tcfg.seed)
    names = state.trainable_names()
    opt = OptimState()
    steps = tcfg.steps_per_epoch or math.ceil(len(train) / tcfg.videos_per_step)
    per_step = min(tcfg.videos_per_step, len(train))
    best, best_dice, history = state.copy(), -math.inf, []

    for n, p in state.params.items():
        p.requires_grad = state.trainable[n]
    try:
        for epoch in range(tcfg.epochs):
            losses = []
            for step in range(steps):
                picks = rng.choice(len(train), size=per_step, replace=False)
                batch = []
                for i in picks:
                    win = sample_subsequence(train[i], tcfg.subseq_len, rng)
                    batch.append((train[i].frames[win], train[i].masks[win]))
                for p in state.params.values():
                    p.grad = None
                with T.Tape() as tape:
                    loss = _step_loss(state, batch, tcfg.capacity)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value} at epoch {epoch} step {step}")
                if not names:
                    losses.append(value)
                    continue
                tape.backward(loss)
                grads = {n: (state.params[n].grad if state.params[n].grad is not None
                             else np.zeros_like(state.params[n].data)) for n in names}
                norm = clip_gradients(grads, tcfg.clip_norm)
                if not math.isfinite(norm):
                    raise NumericError(f"non-finite gradient norm at epoch {epoch} step {step}")
                adamw_step(state, grads, opt, lambda n: tcfg.lr_for(n, epoch),
                           tcfg.weight_decay, tcfg.betas, tcfg.eps)
                losses.append(value)
            vd = video_dice(state, val, tcfg.capacity) if val else float("nan")
            entry = EpochLog(epoch, float(np.mean(losses)), vd, tcfg.lr_adapter * tcfg.lr_scale(epoch))
            history.append(entry)
            log.info("epoch %d loss %.4f val_dice %.4f lr %.2e", epoch, entry.train_loss, vd, entry.lr)
            if not val or vd > best_dice:
                best_dice = vd
                best = state.copy()
    finally:
        for p in state.params.values():
            p.requires_grad = False
            p.grad = None
    return best, history
