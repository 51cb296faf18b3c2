"""Two-stage adapter training with the language model frozen: an MSE warm-up
aligning brain embeddings to mean prompt embeddings, then maximization of the
continuation likelihood, with Adam and patience-based early stopping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .prompts import build_input


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 8
    warmup_epochs: int = 10
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.patience < 1:
            raise DataError(f"bad training config: lr={self.lr}, patience={self.patience}")


class AdamState:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]


def adam_step(params, state: AdamState, lr: float) -> None:
    """One Adam update over the parameter list using accumulated gradients."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.value -= lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class TrainTrace:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = -1
    epoch_seconds: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_nll,valid_nll"]
        for i, tl in enumerate(self.train_loss):
            vl = self.valid_loss[i] if i < len(self.valid_loss) else float("nan")
            lines.append(f"{i},{tl:.10f},{vl:.10f}")
        return "\n".join(lines) + "\n"


def _warmup_loss_backward(adapter, lm, sample, scale: float) -> float:
    """MSE between each adapted brain row and the mean prompt embedding,
    averaged over all t*d coordinates."""
    vw = lm.embed_tokens(sample.prompt_ids)
    target = vw.mean(axis=0, keepdims=True)
    vb = adapter.adapt(sample.recording)
    diff = vb - target
    loss = float(np.mean(diff * diff))
    adapter.backward(2.0 * diff / diff.size * scale)
    return loss


def warmup(adapter, lm, train_samples, config: TrainConfig) -> TrainTrace:
    """Stage 1: fixed-length MSE training of the adapter; the LM is untouched.
    Empty-prompt samples are skipped (the mean prompt embedding is undefined)."""
    usable = [s for s in train_samples if len(s.prompt_ids) > 0]
    if not usable:
        raise DataError("no samples with non-empty prompts for warm-up")
    lm.set_trainable(False)
    params = adapter.params()
    state = AdamState(params)
    rng = np.random.default_rng(config.seed)
    trace = TrainTrace()
    for _ in range(config.warmup_epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(usable))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start : start + config.batch]
            adapter.zero_grad()
            for j in idx:
                losses.append(_warmup_loss_backward(adapter, lm, usable[j], 1.0 / len(idx)))
            adam_step(params, state, config.lr)
        trace.train_loss.append(float(np.mean(losses)))
        trace.epoch_seconds.append(time.monotonic() - t0)
    trace.best_epoch = len(trace.train_loss) - 1
    return trace


def sample_nll_backward(adapter, lm, sample, scale: float) -> float:
    """Mean-per-token NLL of the continuation through the full prompt input;
    gradients flow into the adapter and sentinels only (LM frozen upstream)."""
    vw = lm.embed_tokens(sample.prompt_ids)
    vb = adapter.adapt(sample.recording)
    pin = build_input(vb, vw, adapter.sent_open.value, adapter.sent_close.value)
    nll, drows = lm.nll_backward(pin.rows, sample.continuation_ids, scale=scale)
    t = adapter.t
    adapter.sent_open.accumulate(drows[0:1])
    adapter.backward(drows[1 : 1 + t])
    adapter.sent_close.accumulate(drows[1 + t : 2 + t])
    return nll


def sample_nll(adapter, lm, sample) -> float:
    vw = lm.embed_tokens(sample.prompt_ids)
    vb = adapter.adapt(sample.recording)
    pin = build_input(vb, vw, adapter.sent_open.value, adapter.sent_close.value)
    return -lm.sequence_log_likelihood(pin.rows, sample.continuation_ids) / len(
        sample.continuation_ids
    )


def validation_nll(adapter, lm, samples) -> float:
    return float(np.mean([sample_nll(adapter, lm, s) for s in samples]))


def train_main(adapter, lm, train_samples, valid_samples, config: TrainConfig):
    """Stage 2: minimize mean continuation NLL over the adapter and sentinel
    parameters with the LM frozen; early-stops on validation NLL and restores
    the best-validation parameters."""
    if not train_samples or not valid_samples:
        raise DataError("train and validation sets must be non-empty")
    lm.set_trainable(False)
    params = adapter.params()
    state = AdamState(params)
    rng = np.random.default_rng(config.seed + 1)
    trace = TrainTrace()
    best = validation_nll(adapter, lm, valid_samples)
    best_values = [p.value.copy() for p in params]
    best_epoch = -1
    since_best = 0
    for epoch in range(config.max_epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start : start + config.batch]
            adapter.zero_grad()
            for j in idx:
                nll = sample_nll_backward(adapter, lm, train_samples[j], 1.0 / len(idx))
                if not np.isfinite(nll):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}, sample {j}"
                    )
                losses.append(nll)
            adam_step(params, state, config.lr)
        vl = validation_nll(adapter, lm, valid_samples)
        trace.train_loss.append(float(np.mean(losses)))
        trace.valid_loss.append(vl)
        trace.epoch_seconds.append(time.monotonic() - t0)
        if vl < best:
            best = vl
            best_values = [p.value.copy() for p in params]
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for p, v in zip(params, best_values):
        p.value[...] = v
    trace.best_epoch = best_epoch
    return adapter, trace
