"""Residual vector quantization with EMA codebooks.

Layer 0 is the base quantizer; layers 1..V quantize what the layers before
them left over. Codebooks are not trained by gradient descent: they follow
an exponential moving average of the vectors assigned to them, and codes
whose running usage falls under a threshold are re-seeded from the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndmath import NumericError, Rng, Tensor, record
from .ndmath import tensor as _t


@dataclass
class Codebook:
    codes: np.ndarray  # (K, d) float32
    ema_count: np.ndarray  # (K,)
    ema_sum: np.ndarray  # (K, d)
    usage: np.ndarray = field(default=None)  # (K,) int64 assignment counters

    def __post_init__(self):
        if self.usage is None:
            self.usage = np.zeros(len(self.codes), dtype=np.int64)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @classmethod
    def init(cls, size: int, dim: int, rng: Rng, scale: float = 1.0) -> "Codebook":
        codes = (rng.normal(0.0, scale, size=(size, dim))).astype(np.float32)
        return cls(codes, np.ones(size, dtype=np.float32), codes.copy())


@dataclass
class RvqStack:
    layers: list[Codebook]
    dropout_q: float = 0.2

    @property
    def depth(self) -> int:
        """Number of quantization layers, V + 1."""
        return len(self.layers)

    @classmethod
    def init(cls, depth: int, size: int, dim: int, rng: Rng, dropout_q: float = 0.2) -> "RvqStack":
        sizes = [size] * depth if np.isscalar(size) else list(size)
        return cls([Codebook.init(k, dim, rng.stream("codebook", v)) for v, k in enumerate(sizes)], dropout_q)


@dataclass
class QuantizeResult:
    token_rows: np.ndarray  # (A, n)
    code_rows: np.ndarray  # (A, n, d)
    residuals: np.ndarray  # (A + 1, n, d): r^0 .. r^A
    active_layers: int

    def code_sum(self) -> np.ndarray:
        """Sum of the selected codes over active layers, in layer order."""
        total = self.code_rows[0].copy()
        for v in range(1, self.active_layers):
            total = total + self.code_rows[v]
        return total


def nearest_code(vectors: np.ndarray, book: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Index and code of the nearest entry for each row of ``vectors``.

    Works on a single d-vector or an (n, d) batch. Distances are computed in
    float64 and ties go to the lowest index.
    """
    if book.size == 0:
        raise ValueError("empty codebook")
    v = np.asarray(vectors)
    single = v.ndim == 1
    v2 = np.atleast_2d(v).astype(np.float64)
    if not np.all(np.isfinite(v2)):
        raise NumericError("non-finite vector passed to nearest_code")
    c = book.codes.astype(np.float64)
    dist = (v2 * v2).sum(1, keepdims=True) - 2.0 * v2 @ c.T + (c * c).sum(1)[None, :]
    idx = np.argmin(dist, axis=1)
    if single:
        return int(idx[0]), book.codes[idx[0]]
    return idx, book.codes[idx]


def residual_quantize(latents: np.ndarray, stack: RvqStack, active_layers: int | None = None) -> QuantizeResult:
    """Quantize ``latents`` (n, d) through the first ``active_layers`` layers."""
    a = stack.depth if active_layers is None else int(active_layers)
    if not 1 <= a <= stack.depth:
        raise ValueError(f"active_layers must be in [1, {stack.depth}], got {a}")
    r = np.asarray(latents, dtype=np.float32)
    residuals = [r]
    tokens, codes = [], []
    for v in range(a):
        idx, b = nearest_code(r, stack.layers[v])
        r = r - b
        tokens.append(idx)
        codes.append(b)
        residuals.append(r)
    return QuantizeResult(np.stack(tokens), np.stack(codes), np.stack(residuals), a)


def lookup_codes(tokens: np.ndarray, stack: RvqStack, layers_used: int) -> np.ndarray:
    """Sum of codes for a (V+1, n) token grid over the first ``layers_used`` rows."""
    if not 1 <= layers_used <= stack.depth:
        raise ValueError(f"layers_used must be in [1, {stack.depth}], got {layers_used}")
    total = None
    for v in range(layers_used):
        book = stack.layers[v]
        row = np.asarray(tokens[v], dtype=np.int64)
        if row.size and (row.min() < 0 or row.max() >= book.size):
            raise IndexError(f"token id out of range for layer {v} (size {book.size})")
        b = book.codes[row]
        total = b.copy() if total is None else total + b
    return total


def draw_dropout_layers(stack: RvqStack, rng: Rng) -> int:
    """Active layer count under quantization dropout.

    With probability q the number of kept layers is uniform on 1..V+1,
    otherwise every layer stays active.
    """
    if rng.uniform() < stack.dropout_q:
        return int(rng.integers(1, stack.depth + 1))
    return stack.depth


def commitment_loss(latents: Tensor, result: QuantizeResult, beta: float = 1.0) -> Tensor:
    """beta * sum over active layers of mean (r^v - sg[b^v])^2.

    r^v depends on the encoder output through ``latents``; the selected
    codes enter as constants, so only the encoder receives gradient.
    """
    total = None
    flat = latents
    for v in range(result.active_layers):
        # r^v - b^v = latents - (b^0 + ... + b^v); the subtrahend is constant
        target = result.residuals[0] - result.residuals[v + 1]
        diff = flat - _t(target.reshape(flat.shape), dtype=latents.dtype)
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * beta


def straight_through(latents: Tensor, result: QuantizeResult) -> Tensor:
    """Quantized latents in the forward pass, identity in the backward pass."""
    value = result.code_sum().reshape(latents.shape).astype(latents.dtype)
    return record(value, (latents,), lambda g: (g,))


def ema_update(
    stack: RvqStack,
    batch: dict[int, tuple[np.ndarray, np.ndarray]],
    decay: float,
    reset_threshold: float,
    rng: Rng,
    eps: float = 1e-5,
) -> RvqStack:
    """Move each layer's codes toward the mean of their assigned residuals.

    ``batch`` maps layer index to (residual vectors (m, d), indices (m,)).
    Codes whose EMA count ends below ``reset_threshold`` are replaced by a
    residual drawn uniformly from that layer's batch.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    for v, (vecs, idx) in sorted(batch.items()):
        if len(idx) == 0:
            continue
        book = stack.layers[v]
        vecs64 = np.asarray(vecs, dtype=np.float64).reshape(len(idx), book.dim)
        counts = np.bincount(idx, minlength=book.size).astype(np.float64)
        sums = np.zeros((book.size, book.dim))
        np.add.at(sums, idx, vecs64)
        ema_count = decay * book.ema_count.astype(np.float64) + (1.0 - decay) * counts
        ema_sum = decay * book.ema_sum.astype(np.float64) + (1.0 - decay) * sums
        codes = ema_sum / np.maximum(ema_count, eps)[:, None]
        dead = np.flatnonzero(ema_count < reset_threshold)
        if len(dead):
            pick = rng.integers(0, len(vecs64), size=len(dead))
            codes[dead] = vecs64[pick]
            ema_sum[dead] = codes[dead] * ema_count[dead][:, None]
        book.codes = codes.astype(np.float32)
        book.ema_count = ema_count.astype(np.float32)
        book.ema_sum = ema_sum.astype(np.float32)
        book.usage += counts.astype(np.int64)
    return stack


def usage_stats(tokens: np.ndarray, size: int) -> tuple[float, float]:
    """Fraction of codes used and code perplexity for one layer's token ids."""
    counts = np.bincount(np.asarray(tokens).reshape(-1), minlength=size).astype(np.float64)
    if counts.sum() == 0:
        return 0.0, 0.0
    p = counts / counts.sum()
    nz = p[p > 0]
    return float((counts > 0).mean()), float(np.exp(-(nz * np.log(nz)).sum()))
