"""Neural-network building blocks on top of :mod:`tensor`."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    matmul,
    pad_time,
    record,
    reshape,
    take_last,
    transpose,
    unfold_time,
)

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite input to {what}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), backward)


def layernorm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis; a constant row maps to zeros."""
    _check_finite(a.data, "layernorm")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * inv
    xhat = xhat64.astype(a.dtype)
    h = a.shape[-1]

    def backward(g):
        g64 = g.astype(np.float64)
        gx = (inv / h) * (h * g64 - g64.sum(-1, keepdims=True) - xhat64 * (g64 * xhat64).sum(-1, keepdims=True))
        return (gx.astype(a.dtype),)

    out = record(xhat, (a,), backward)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return record(out, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D convolution on channel-major ``(B, C_in, T)`` input.

    ``weight`` is ``(C_out, C_in, k)``. Zero padding of ``pad`` frames on
    both ends. Output is ``(B, C_out, T_out)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (B, C, T), got {x.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, weight {weight.shape}")
    _check_finite(x.data, "conv1d")
    if pad:
        x = pad_time(x, pad, pad)
    cols = unfold_time(x, k, stride)  # (B, T_out, C_in*k)
    w = transpose(reshape(weight, (c_out, c_in * k)), (1, 0))
    y = matmul(cols, w)
    if bias is not None:
        y = y + bias
    return transpose(y, (0, 2, 1))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention on ``(B, H, T, dh)`` operands.

    ``mask`` is a boolean array broadcastable to ``(B, H, T, T)``; False
    entries are excluded. No causal structure is imposed.
    """
    dh = q.shape[-1]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        bias = np.where(mask, 0.0, -1e9).astype(scores.dtype)
        scores = scores + Tensor(bias)
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    ``weights`` (same shape as ``targets``) selects and weights positions;
    the mean is taken over the weight total.
    """
    nll = -take_last(log_softmax(logits, axis=-1), targets)
    if weights is None:
        return nll.mean()
    w = np.asarray(weights, dtype=logits.dtype)
    total = float(np.sum(w, dtype=np.float64))
    if total <= 0:
        raise ValueError("cross_entropy called with no supervised positions")
    return (nll * Tensor(w)).sum() * (1.0 / total)
