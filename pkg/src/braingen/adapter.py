"""Brain adapter: trainable per-frame position embeddings plus an MLP that
maps a t x c recording into t rows of LM embedding space, and the two
sentinel embeddings that delimit the brain block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .linalg import Affine, Parameter, as_matrix, load_matrix, relu, relu_backward, save_matrix


@dataclass
class BrainRecording:
    """t x c feature matrix for the t frames following stimulus onset."""

    frames: np.ndarray
    frame_id: int = -1

    def __post_init__(self):
        self.frames = as_matrix(self.frames)


class BrainAdapter:
    """Position embeddings P (t x c), MLP c -> c -> c -> d with relu, and
    sentinel embeddings for the start/end of the brain block."""

    def __init__(self, c: int, d: int, t: int, seed: int, embed_range: tuple[float, float] = (-0.1, 0.1)):
        if min(c, d, t) < 1:
            raise ConfigError(f"c, d, t must be >= 1, got {(c, d, t)}")
        self.c, self.d, self.t = c, d, t
        rng = np.random.default_rng(seed)
        self.pos = Parameter(rng.uniform(-0.1, 0.1, size=(t, c)), name="adapter.pos")
        self.l1 = Affine.create(c, c, rng, "adapter.l1")
        self.l2 = Affine.create(c, c, rng, "adapter.l2")
        self.l3 = Affine.create(c, d, rng, "adapter.l3")
        lo, hi = embed_range
        self.sent_open = Parameter(rng.uniform(lo, hi, size=(1, d)), name="adapter.sent_open")
        self.sent_close = Parameter(rng.uniform(lo, hi, size=(1, d)), name="adapter.sent_close")
        self._cache = None

    @classmethod
    def init_from_lm(cls, c: int, t: int, lm, seed: int) -> "BrainAdapter":
        """Sentinels drawn uniformly within the empirical range of LM token embeddings."""
        lo = float(lm.embed.value.min())
        hi = float(lm.embed.value.max())
        return cls(c, lm.cfg.d, t, seed, embed_range=(lo, hi))

    def params(self):
        return [self.pos] + self.l1.params() + self.l2.params() + self.l3.params() + [
            self.sent_open,
            self.sent_close,
        ]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def param_count(self) -> int:
        # t*c + 2*(c^2+c) + (c*d+d) + 2d trainable scalars
        return sum(p.size for p in self.params() if p.trainable)

    def adapt(self, recording: BrainRecording) -> np.ndarray:
        B = recording.frames
        if B.shape != (self.t, self.c):
            raise DimensionError(f"recording shape {B.shape} != adapter shape {(self.t, self.c)}")
        x = B + self.pos.value
        h1 = self.l1.forward(x)
        a1 = relu(h1)
        h2 = self.l2.forward(a1)
        a2 = relu(h2)
        out = self.l3.forward(a2)
        self._cache = (h1, h2)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulates MLP and pos gradients; returns gradient w.r.t. the recording."""
        h1, h2 = self._cache
        da2 = self.l3.backward(dout)
        dh2 = relu_backward(h2, da2)
        da1 = self.l2.backward(dh2)
        dh1 = relu_backward(h1, da1)
        dx = self.l1.backward(dh1)
        self.pos.accumulate(dx)
        return dx

    # ---- checkpointing ----

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(f"braingen-adapter v1\nc {self.c}\nd {self.d}\nt {self.t}\nend\n".encode())
            for p in self.params():
                save_matrix(f, p.value)

    @classmethod
    def load(cls, path) -> "BrainAdapter":
        with open(path, "rb") as f:
            lines = []
            while True:
                line = b""
                while not line.endswith(b"\n"):
                    ch = f.read(1)
                    if not ch:
                        raise ConfigError(f"truncated adapter header in {path}")
                    line += ch
                text = line.decode().rstrip("\n")
                if text == "end":
                    break
                lines.append(text)
            kv = dict(line.split(" ", 1) for line in lines[1:])
            adapter = cls(int(kv["c"]), int(kv["d"]), int(kv["t"]), seed=0)
            for p in adapter.params():
                m = load_matrix(f)
                if m.shape != p.value.shape:
                    raise ConfigError(f"adapter block shape {m.shape} != {p.value.shape}")
                p.value[...] = m
        return adapter


def init_adapter(c: int, d: int, t: int, seed: int) -> BrainAdapter:
    return BrainAdapter(c, d, t, seed)


def adapter_param_count(adapter: BrainAdapter) -> int:
    return adapter.param_count()
