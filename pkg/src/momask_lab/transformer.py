"""Bidirectional pre-LN transformer trunk shared by both token models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .ndmath import Rng, Tensor


@dataclass(frozen=True)
class Condition:
    """A caption label, or the null condition used for guidance."""

    label_id: int | None = None

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.label_id is None

    def index(self, num_labels: int) -> int:
        """Row in a condition table whose last row is the null embedding."""
        if self.label_id is None:
            return num_labels
        if not 0 <= self.label_id < num_labels:
            raise ValueError(f"label id {self.label_id} outside [0, {num_labels})")
        return self.label_id


def condition_indices(conds, num_labels: int) -> np.ndarray:
    out = []
    for c in conds:
        if isinstance(c, Condition):
            out.append(c.index(num_labels))
        elif c is None:
            out.append(num_labels)
        else:
            out.append(Condition(int(c)).index(num_labels))
    return np.asarray(out, dtype=np.int64)


def init_normal(rng: Rng, shape, std=0.02, name=None) -> Tensor:
    return nd.parameter(rng.normal(0.0, std, size=shape), name)


def init_trunk(params: dict, hidden: int, layers: int, ff_mult: int, rng: Rng) -> None:
    out_std = 0.02 / np.sqrt(2 * layers)
    for i in range(layers):
        p = f"blk{i}"
        r = rng.stream(p)
        params[f"{p}.ln1.w"] = nd.parameter(np.ones(hidden), f"{p}.ln1.w")
        params[f"{p}.ln1.b"] = nd.parameter(np.zeros(hidden), f"{p}.ln1.b")
        params[f"{p}.qkv.w"] = init_normal(r.stream("qkv"), (hidden, 3 * hidden), name=f"{p}.qkv.w")
        params[f"{p}.qkv.b"] = nd.parameter(np.zeros(3 * hidden), f"{p}.qkv.b")
        params[f"{p}.proj.w"] = init_normal(r.stream("proj"), (hidden, hidden), out_std, f"{p}.proj.w")
        params[f"{p}.proj.b"] = nd.parameter(np.zeros(hidden), f"{p}.proj.b")
        params[f"{p}.ln2.w"] = nd.parameter(np.ones(hidden), f"{p}.ln2.w")
        params[f"{p}.ln2.b"] = nd.parameter(np.zeros(hidden), f"{p}.ln2.b")
        params[f"{p}.ff1.w"] = init_normal(r.stream("ff1"), (hidden, ff_mult * hidden), name=f"{p}.ff1.w")
        params[f"{p}.ff1.b"] = nd.parameter(np.zeros(ff_mult * hidden), f"{p}.ff1.b")
        params[f"{p}.ff2.w"] = init_normal(r.stream("ff2"), (ff_mult * hidden, hidden), out_std, f"{p}.ff2.w")
        params[f"{p}.ff2.b"] = nd.parameter(np.zeros(hidden), f"{p}.ff2.b")
    params["ln_f.w"] = nd.parameter(np.ones(hidden), "ln_f.w")
    params["ln_f.b"] = nd.parameter(np.zeros(hidden), "ln_f.b")


def trunk_forward(x: Tensor, key_valid: np.ndarray, params: dict, layers: int, heads: int) -> Tensor:
    """Run ``layers`` blocks over (B, T, h); ``key_valid`` (B, T) hides padding."""
    b, t, h = x.shape
    dh = h // heads
    mask = key_valid[:, None, None, :]
    for i in range(layers):
        p = f"blk{i}"
        y = nd.layernorm(x, params[f"{p}.ln1.w"], params[f"{p}.ln1.b"])
        qkv = nd.linear(y, params[f"{p}.qkv.w"], params[f"{p}.qkv.b"])
        qkv = nd.transpose(nd.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = nd.attention(q, k, v, mask)
        att = nd.reshape(nd.transpose(att, (0, 2, 1, 3)), (b, t, h))
        x = x + nd.linear(att, params[f"{p}.proj.w"], params[f"{p}.proj.b"])
        y = nd.layernorm(x, params[f"{p}.ln2.w"], params[f"{p}.ln2.b"])
        y = nd.gelu(nd.linear(y, params[f"{p}.ff1.w"], params[f"{p}.ff1.b"]))
        x = x + nd.linear(y, params[f"{p}.ff2.w"], params[f"{p}.ff2.b"])
    return nd.layernorm(x, params["ln_f.w"], params["ln_f.b"])


def pad_rows(rows: list[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length int rows; returns (ids (B, n), valid (B, n))."""
    n = max(len(r) for r in rows)
    ids = np.full((len(rows), n), pad_id, dtype=np.int64)
    valid = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        valid[i, : len(r)] = True
    return ids, valid
