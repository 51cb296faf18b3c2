"""Generation: deterministic beam search over the full vocabulary, token-
budget truncation, the ridge word-rate model, and the autoregressive
full-text reconstruction loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .lm import BOS_ID
from .prompts import build_input, build_text_input


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float


@dataclass
class Beam:
    hypotheses: list[Hypothesis]
    width: int

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _extend_rows(lm, base_rows: np.ndarray, tokens, keep_brain: int) -> np.ndarray:
    """Prefix rows plus embeddings of generated tokens, evicting the oldest
    text rows (never the brain block) on context overflow."""
    rows = np.vstack([base_rows, lm.embed_tokens(tokens)]) if tokens else base_rows
    limit = lm.cfg.context_len
    if rows.shape[0] > limit:
        overflow = rows.shape[0] - limit
        head = rows[:keep_brain]
        tail = rows[keep_brain + overflow :]
        rows = np.vstack([head, tail])
    return rows


def beam_search(lm, prompt_input, width: int, max_tokens: int) -> Beam:
    """Length-by-length beam expansion over the whole vocabulary; ties in
    log-probability break toward the lower token id."""
    if width < 1 or max_tokens < 1:
        raise DataError(f"width and max_tokens must be >= 1, got {width}, {max_tokens}")
    keep_brain = prompt_input.t + 2 if prompt_input.has_brain else 0
    beams = [Hypothesis([], 0.0)]
    for _ in range(max_tokens):
        candidates = []
        for hyp in beams:
            rows = _extend_rows(lm, prompt_input.rows, hyp.tokens, keep_brain)
            dist = lm.next_token_distribution(rows)[0]
            logp = np.log(np.maximum(dist, 1e-300))
            # arrays sort faster than per-token tuples; token id is the tie-break
            top = np.lexsort((np.arange(logp.size), -logp))[: width]
            for tok in top:
                candidates.append(Hypothesis(hyp.tokens + [int(tok)], hyp.log_prob + logp[tok]))
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        beams = candidates[:width]
    return Beam(hypotheses=beams, width=width)


def greedy_decode(lm, prompt_input, max_tokens: int) -> list[int]:
    return beam_search(lm, prompt_input, width=1, max_tokens=max_tokens).best.tokens


def truncate_to_budget(tokens, tr_budget: int):
    if tr_budget < 0:
        raise DataError("tr_budget must be >= 0")
    return tokens[:tr_budget]


@dataclass
class WordRateModel:
    """Ridge regression from a flattened t x c recording to the number of
    word tokens perceived in the frame; predictions clamp to >= 0 integers."""

    weights: np.ndarray  # (t*c,)
    bias: float
    lam: float

    def predict(self, recording) -> int:
        x = recording.frames.reshape(-1)
        return int(max(0, round(float(x @ self.weights + self.bias))))


def _fit_ridge(X: np.ndarray, y: np.ndarray, lam: float):
    # center so the intercept is unregularized
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    A = Xc.T @ Xc + lam * np.eye(X.shape[1])
    w = np.linalg.solve(A, Xc.T @ (y - ym))
    return w, float(ym - xm @ w)


def fit_word_rate(train_recordings, train_budgets, valid_recordings=None, valid_budgets=None, lambdas=(0.1, 1.0, 10.0, 100.0)) -> WordRateModel:
    """Closed-form ridge fit; the regularizer is chosen on the validation
    pairs (falling back to the training pairs when none are given)."""
    if len(train_recordings) < 2:
        raise DataError("need at least 2 training pairs")
    X = np.vstack([r.frames.reshape(1, -1) for r in train_recordings])
    y = np.asarray(train_budgets, dtype=np.float64)
    if valid_recordings:
        Xv = np.vstack([r.frames.reshape(1, -1) for r in valid_recordings])
        yv = np.asarray(valid_budgets, dtype=np.float64)
    else:
        Xv, yv = X, y
    best = None
    for lam in lambdas:
        w, b = _fit_ridge(X, y, lam)
        err = float(np.mean((Xv @ w + b - yv) ** 2))
        if best is None or err < best[0]:
            best = (err, lam, w, b)
    _, lam, w, b = best
    return WordRateModel(weights=w, bias=b, lam=lam)


@dataclass
class ReconstructionConfig:
    window: int = 10
    beam_width: int = 3

    def __post_init__(self):
        if self.window < 1:
            raise DataError("window must be >= 1")


@dataclass
class FrameOutput:
    frame_id: int
    word_rate: int
    tokens: list[int] = field(default_factory=list)


def reconstruct_full_text(lm, adapter, recordings, wr: WordRateModel, cfg: ReconstructionConfig, use_brain: bool = True):
    """Frame 0 generates WR(B_0) tokens from brain input alone; frame k
    conditions on its brain block plus the last `window` generated tokens.
    With use_brain=False the brain block is dropped (the no-brain null run)
    while the word rates stay identical."""
    if not recordings:
        raise DataError("no recordings to reconstruct from")
    outputs = []
    generated: list[int] = []
    for rec in recordings:
        rate = wr.predict(rec)
        context = generated[-cfg.window :]
        if use_brain:
            vb = adapter.adapt(rec)
            vw = lm.embed_tokens(context)
            pin = build_input(vb, vw, adapter.sent_open.value, adapter.sent_close.value)
        else:
            pin = build_text_input(lm.embed_tokens(context if context else [BOS_ID]), lm)
        frame = FrameOutput(frame_id=rec.frame_id, word_rate=rate)
        if rate > 0:
            beam = beam_search(lm, pin, width=cfg.beam_width, max_tokens=rate)
            frame.tokens = beam.best.tokens
            generated.extend(frame.tokens)
        outputs.append(frame)
    return outputs
