"""From-scratch decoder-only language model: word-level tokenizer, causal
transformer stack with hand-written backprop, next-token distribution, and
base-model pretraining on a synthetic corpus.

The forward pass accepts raw embedding rows, so non-text rows (brain
embeddings, sentinel vectors) can be injected ahead of text embeddings and
gradients flow back to them while the model's own parameters stay frozen.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContextLengthError, DataError, VocabularyError
from .linalg import Affine, Parameter, as_matrix, load_matrix, relu, relu_backward, save_matrix, softmax_row

PAD_ID = 0
BOS_ID = 1
UNK_ID = 2
N_RESERVED = 3
RESERVED = ["<pad>", "<bos>", "<unk>"]

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def split_words(text: str) -> list[str]:
    """Lowercase and split into word tokens; punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijective word <-> id map with fixed reserved ids PAD=0, BOS=1, UNK=2."""

    def __init__(self, words: list[str]):
        seen = set(RESERVED)
        uniq = []
        for w in words:
            if w not in seen:
                seen.add(w)
                uniq.append(w)
        self.tokens = RESERVED + uniq
        self.index = {w: i for i, w in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts, max_size: int | None = None) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        # frequency order, alphabetical tie-break, for a stable id assignment
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ordered = ordered[: max_size - N_RESERVED]
        return cls(ordered)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in split_words(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:N_RESERVED] != RESERVED:
            raise VocabularyError(f"vocabulary file {path} missing reserved tokens")
        return cls(tokens[N_RESERVED:])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text)


@dataclass
class LMConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    context_len: int = 128
    vocab_size: int = 2000
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")


class LayerNorm:
    def __init__(self, d: int, name: str = "ln"):
        self.gamma = Parameter(np.ones((1, d)), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros((1, d)), name=f"{name}.beta")
        self.eps = 1e-5
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dout):
        xhat, inv = self._cache
        self.gamma.accumulate((dout * xhat).sum(axis=0, keepdims=True))
        self.beta.accumulate(dout.sum(axis=0, keepdims=True))
        dxhat = dout * self.gamma.value
        d = xhat.shape[1]
        return inv / d * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )


class CausalSelfAttention:
    def __init__(self, d: int, heads: int, rng: np.random.Generator, name: str = "attn"):
        self.d = d
        self.heads = heads
        self.dh = d // heads
        self.wq = Affine.create(d, d, rng, f"{name}.q")
        self.wk = Affine.create(d, d, rng, f"{name}.k")
        self.wv = Affine.create(d, d, rng, f"{name}.v")
        self.wo = Affine.create(d, d, rng, f"{name}.o")
        self._cache = None

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()

    def _split(self, x):
        L = x.shape[0]
        return x.reshape(L, self.heads, self.dh).transpose(1, 0, 2)  # (h, L, dh)

    def forward(self, x):
        L = x.shape[0]
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(self.dh)
        mask = np.triu(np.ones((L, L), dtype=bool), k=1)
        scores[:, mask] = -np.inf
        shifted = scores - scores.max(axis=2, keepdims=True)
        e = np.exp(shifted)
        attn = e / e.sum(axis=2, keepdims=True)  # (h, L, L)
        ctx = attn @ v  # (h, L, dh)
        merged = ctx.transpose(1, 0, 2).reshape(L, self.d)
        self._cache = (q, k, v, attn)
        return self.wo.forward(merged)

    def backward(self, dout):
        q, k, v, attn = self._cache
        L = attn.shape[1]
        dmerged = self.wo.backward(dout)
        dctx = self._split(dmerged)
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
        dscores /= np.sqrt(self.dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        merge = lambda t: t.transpose(1, 0, 2).reshape(L, self.d)
        dx = self.wq.backward(merge(dq))
        dx += self.wk.backward(merge(dk))
        dx += self.wv.backward(merge(dv))
        return dx


class Block:
    """Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, cfg: LMConfig, rng: np.random.Generator, name: str = "block"):
        d = cfg.d
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = CausalSelfAttention(d, cfg.heads, rng, f"{name}.attn")
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        hidden = d * cfg.mlp_ratio
        self.fc1 = Affine.create(d, hidden, rng, f"{name}.fc1")
        self.fc2 = Affine.create(hidden, d, rng, f"{name}.fc2")
        self._pre = None

    def params(self):
        return (
            self.ln1.params()
            + self.attn.params()
            + self.ln2.params()
            + self.fc1.params()
            + self.fc2.params()
        )

    def forward(self, x):
        x = x + self.attn.forward(self.ln1.forward(x))
        h = self.fc1.forward(self.ln2.forward(x))
        self._pre = h
        return x + self.fc2.forward(relu(h))

    def backward(self, dout):
        dh = relu_backward(self._pre, self.fc2.backward(dout))
        dx1 = dout + self.ln2.backward(self.fc1.backward(dh))
        return dx1 + self.ln1.backward(self.attn.backward(dx1))


class LanguageModel:
    """Frozen-able decoder-only LM over raw embedding rows."""

    def __init__(self, cfg: LMConfig, vocab: Vocabulary):
        if vocab.size > cfg.vocab_size:
            raise ConfigError(
                f"vocabulary size {vocab.size} exceeds configured cap {cfg.vocab_size}"
            )
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.embed = Parameter(rng.normal(0.0, 0.05, size=(vocab.size, d)), name="embed")
        self.pos = Parameter(rng.normal(0.0, 0.05, size=(cfg.context_len, d)), name="pos")
        self.blocks = [Block(cfg, rng, f"block{i}") for i in range(cfg.layers)]
        self.ln_f = LayerNorm(d, "ln_f")
        self.head = Affine.create(d, vocab.size, rng, "head")

    def params(self):
        out = [self.embed, self.pos]
        for b in self.blocks:
            out += b.params()
        out += self.ln_f.params()
        out += self.head.params()
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    # ---- forward / backward over raw rows ----

    def embed_tokens(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return np.zeros((0, self.cfg.d))
        if ids.min() < 0 or ids.max() >= self.vocab.size:
            raise VocabularyError(f"token id out of range for vocabulary of size {self.vocab.size}")
        return self.embed.value[ids]

    def _forward_hidden(self, rows: np.ndarray) -> np.ndarray:
        L = rows.shape[0]
        if L < 1:
            raise ContextLengthError("empty input sequence")
        if L > self.cfg.context_len:
            raise ContextLengthError(f"sequence length {L} exceeds context {self.cfg.context_len}")
        x = rows + self.pos.value[:L]
        for b in self.blocks:
            x = b.forward(x)
        return self.ln_f.forward(x)

    def _backward_hidden(self, dhidden: np.ndarray, L: int) -> np.ndarray:
        dx = self.ln_f.backward(dhidden)
        for b in reversed(self.blocks):
            dx = b.backward(dx)
        self.pos.accumulate(
            np.vstack([dx, np.zeros((self.cfg.context_len - L, self.cfg.d))])
        )
        return dx

    def logits(self, rows: np.ndarray) -> np.ndarray:
        return self.head.forward(self._forward_hidden(rows))

    def next_token_distribution(self, rows: np.ndarray) -> np.ndarray:
        rows = as_matrix(rows) if rows.size else rows
        logits = self.logits(rows)
        return softmax_row(logits[-1:, :])

    def sequence_log_likelihood(self, rows: np.ndarray, continuation_ids) -> float:
        nll, _ = self._continuation_nll(rows, continuation_ids, backward=False)
        return -nll

    def nll_backward(self, rows: np.ndarray, continuation_ids, scale: float = 1.0):
        """Mean-per-token NLL of the continuation given prefix rows.

        Accumulates scale * d(mean NLL)/dparam into trainable parameters and
        returns (mean_nll, d_rows) where d_rows is scale * gradient w.r.t. the
        prefix embedding rows.
        """
        k = len(continuation_ids)
        nll_sum, drows = self._continuation_nll(
            rows, continuation_ids, backward=True, scale=scale / k
        )
        return nll_sum / k, drows

    def _continuation_nll(self, rows, continuation_ids, backward: bool, scale: float = 1.0):
        ids = np.asarray(continuation_ids, dtype=np.int64)
        if ids.size == 0:
            raise DataError("empty continuation")
        L = rows.shape[0]
        full = np.vstack([rows, self.embed_tokens(ids)])
        hidden = self._forward_hidden(full)
        logits = self.head.forward(hidden)
        # logits at row L-1+i predict continuation token i
        pred_rows = np.arange(L - 1, L - 1 + ids.size)
        probs = softmax_row(logits[pred_rows])
        token_p = probs[np.arange(ids.size), ids]
        nll = -np.log(token_p).sum()
        if not backward:
            return nll, None
        dlogits = np.zeros_like(logits)
        dl = probs.copy()
        dl[np.arange(ids.size), ids] -= 1.0
        dlogits[pred_rows] = dl * scale
        dhidden = self.head.backward(dlogits)
        dfull = self._backward_hidden(dhidden, full.shape[0])
        # gradient into continuation token embeddings
        emb_grad = np.zeros_like(self.embed.value)
        np.add.at(emb_grad, ids, dfull[L:])
        self.embed.accumulate(emb_grad)
        return nll, dfull[:L]

    def token_nll_backward(self, token_ids, scale: float = 1.0):
        """Next-token training loss on one sequence: BOS-prefixed teacher forcing."""
        ids = list(token_ids)
        if not ids:
            raise DataError("empty training sequence")
        rows = self.embed_tokens([BOS_ID])
        mean_nll, drows = self.nll_backward(rows, ids, scale=scale)
        bos_grad = np.zeros_like(self.embed.value)
        bos_grad[BOS_ID] = drows[0]
        self.embed.accumulate(bos_grad)
        return mean_nll

    def sequence_mean_nll(self, token_ids) -> float:
        rows = self.embed_tokens([BOS_ID])
        return -self.sequence_log_likelihood(rows, list(token_ids)) / len(token_ids)

    # ---- checkpointing ----

    def save(self, path) -> None:
        with open(path, "wb") as f:
            header = (
                f"braingen-lm v1\nd {self.cfg.d}\nlayers {self.cfg.layers}\n"
                f"heads {self.cfg.heads}\ncontext_len {self.cfg.context_len}\n"
                f"vocab_size {self.cfg.vocab_size}\nseed {self.cfg.seed}\n"
                f"mlp_ratio {self.cfg.mlp_ratio}\nvocab {' '.join(self.vocab.tokens[N_RESERVED:])}\n"
                "end\n"
            )
            f.write(header.encode())
            for p in self.params():
                save_matrix(f, p.value)

    @classmethod
    def load(cls, path) -> "LanguageModel":
        with open(path, "rb") as f:
            lines = []
            while True:
                line = b""
                while not line.endswith(b"\n"):
                    ch = f.read(1)
                    if not ch:
                        raise ConfigError(f"truncated checkpoint header in {path}")
                    line += ch
                text = line.decode().rstrip("\n")
                if text == "end":
                    break
                lines.append(text)
            kv = dict(line.split(" ", 1) for line in lines[1:])
            cfg = LMConfig(
                d=int(kv["d"]),
                layers=int(kv["layers"]),
                heads=int(kv["heads"]),
                context_len=int(kv["context_len"]),
                vocab_size=int(kv["vocab_size"]),
                seed=int(kv["seed"]),
                mlp_ratio=int(kv["mlp_ratio"]),
            )
            vocab = Vocabulary(kv.get("vocab", "").split() if kv.get("vocab") else [])
            model = cls(cfg, vocab)
            for p in model.params():
                m = load_matrix(f)
                if m.shape != p.value.shape:
                    raise ConfigError(f"checkpoint block shape {m.shape} != {p.value.shape}")
                p.value[...] = m
        return model


def train_base_lm(
    corpus_ids,
    cfg: LMConfig,
    vocab: Vocabulary,
    epochs: int = 30,
    lr: float = 3e-3,
    batch: int = 8,
):
    """Adam-train a next-token model on a list of token-id sequences.

    Deterministic under cfg.seed. Returns (model, per-epoch mean loss trace).
    """
    from .training import AdamState, adam_step

    seqs = [list(s) for s in corpus_ids if len(s) > 0]
    if not seqs:
        raise DataError("empty corpus")
    model = LanguageModel(cfg, vocab)
    params = model.params()
    state = AdamState(params)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            model.zero_grad()
            for j in idx:
                losses.append(model.token_nll_backward(seqs[j], scale=1.0 / len(idx)))
            adam_step(params, state, lr)
        trace.append(float(np.mean(losses)))
    return model, trace
