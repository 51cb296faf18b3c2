"""Dense float64 linear algebra: parameters, layer forward/backward passes,
matrix (de)serialization, and finite-difference gradient verification.

All arrays are float64 and row-major. Backward passes are hand-written per
layer; there is no autodiff graph.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DeterminismError, DimensionError, NumericError


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


class Parameter:
    """A matrix-valued parameter with an accumulated gradient.

    When trainable is False, accumulate() is a no-op, so the gradient stays
    identically zero through any backward pass.
    """

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    @property
    def size(self) -> int:
        return self.value.size

    def accumulate(self, g: np.ndarray) -> None:
        if not self.trainable:
            return
        if g.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {g.shape} != value shape {self.value.shape} ({self.name})"
            )
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape}, trainable={self.trainable})"


class Affine:
    """y = x @ W + b with cached input for the backward pass."""

    def __init__(self, W: Parameter, b: Parameter):
        if W.value.shape[1] != b.value.shape[1] or b.value.shape[0] != 1:
            raise DimensionError(
                f"bias shape {b.value.shape} incompatible with weight shape {W.value.shape}"
            )
        self.W = W
        self.b = b
        self._x = None

    @classmethod
    def create(cls, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "affine"):
        # uniform Kaiming-style range +-sqrt(6/fan_in)
        bound = np.sqrt(6.0 / fan_in)
        W = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.W")
        b = Parameter(np.zeros((1, fan_out)), name=f"{name}.b")
        return cls(W, b)

    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.W.value.shape[0]:
            raise DimensionError(
                f"input shape {x.shape} does not conform with weight shape {self.W.value.shape}"
            )
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        x = self._x
        self.W.accumulate(x.T @ dout)
        self.b.accumulate(dout.sum(axis=0, keepdims=True))
        return dout @ self.W.value.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return dout * (x > 0.0)


def softmax_row(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax. Raises NumericError on non-finite input."""
    x = as_matrix(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite entries")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


MAGIC = b"BGMX"


def save_matrix(f, m: np.ndarray) -> None:
    """Binary form: two little-endian uint64 dims, then float64 values."""
    m = as_matrix(m)
    f.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
    f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_matrix(f) -> np.ndarray:
    rows, cols = struct.unpack("<QQ", f.read(16))
    buf = f.read(rows * cols * 8)
    if len(buf) != rows * cols * 8:
        raise NumericError("truncated matrix block")
    return np.frombuffer(buf, dtype="<f8").reshape(rows, cols).astype(np.float64)


def matrix_to_csv(m: np.ndarray) -> str:
    m = as_matrix(m)
    return "\n".join(",".join(repr(v) for v in row) for row in m) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in text.strip().splitlines()
        if line.strip()
    ]
    return as_matrix(rows)


def finite_difference_check(
    f,
    params,
    eps: float = 1e-5,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients in params[i].grad against central differences.

    f is a zero-argument deterministic callable returning the scalar loss at
    the parameters' current values; analytic gradients must already be
    accumulated. Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)
    f0, f1 = f(), f()
    if f0 != f1:
        raise DeterminismError(f"f returned differing values: {f0} vs {f1}")
    worst = 0.0
    for p in params:
        n = p.size
        flat_val = p.value.reshape(-1)
        flat_grad = p.grad.reshape(-1)
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat_val[i]
            flat_val[i] = orig + eps
            fp = f()
            flat_val[i] = orig - eps
            fm = f()
            flat_val[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
