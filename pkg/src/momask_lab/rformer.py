"""Residual transformer predicting layer-j tokens from every shallower layer.

The head for layer ``j`` reuses the embedding table of layer ``j`` (same
Tensor object), so the tie survives optimizer steps and checkpoints.
Padding positions carry id 0 and are hidden through the attention mask,
which keeps every tied table exactly ``K x hidden``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndmath as nd
from .mformer import TokenError, TransformerLog, train_token_model
from .ndmath import Rng, Tensor
from .transformer import condition_indices, init_normal, init_trunk, pad_rows, trunk_forward


@dataclass
class RTransformerParams:
    weights: dict[str, Tensor]
    codebook_size: int
    depth: int  # V, the number of residual layers
    num_labels: int
    hidden: int
    layers: int
    heads: int
    max_len: int

    def head(self, j: int) -> Tensor:
        return self.weights[f"head.{j}"]


def init_rformer(codebook_size: int, depth: int, num_labels: int, rng: Rng, hidden: int = 128, layers: int = 4,
                 heads: int = 4, ff_mult: int = 4, max_len: int = 64) -> RTransformerParams:
    if depth < 1:
        raise ValueError("residual transformer needs at least one residual layer")
    w: dict[str, Tensor] = {}
    for v in range(depth + 1):
        w[f"tok_emb.{v}"] = init_normal(rng.stream("tok_emb", v), (codebook_size, hidden), name=f"tok_emb.{v}")
    for j in range(1, depth + 1):
        w[f"head.{j}"] = w[f"tok_emb.{j}"]
        w[f"head_b.{j}"] = nd.parameter(np.zeros(codebook_size), f"head_b.{j}")
    w["layer_emb"] = init_normal(rng.stream("layer_emb"), (depth, hidden), name="layer_emb")
    w["pos_emb"] = init_normal(rng.stream("pos_emb"), (max_len + 1, hidden), name="pos_emb")
    w["cond_emb"] = init_normal(rng.stream("cond_emb"), (num_labels + 1, hidden), name="cond_emb")
    init_trunk(w, hidden, layers, ff_mult, rng.stream("trunk"))
    return RTransformerParams(w, codebook_size, depth, num_labels, hidden, layers, heads, max_len)


def rformer_forward(tokens_below, j: int, conds, params: RTransformerParams, valid: np.ndarray | None = None) -> Tensor:
    """Logits (B, n, K) for layer ``j`` given rows 0..j-1.

    ``tokens_below`` is (j, n) for one sequence or (B, j, n) for a batch.
    """
    if not 1 <= j <= params.depth:
        raise ValueError(f"layer {j} outside [1, {params.depth}]")
    t = np.asarray(tokens_below, dtype=np.int64)
    if t.ndim == 2:
        t = t[None]
    b, rows, n = t.shape
    if rows != j:
        raise ValueError(f"layer {j} needs exactly {j} rows below it, got {rows}")
    if n > params.max_len:
        raise ValueError(f"sequence of {n} tokens exceeds max_len {params.max_len}")
    if t.size and (t.min() < 0 or t.max() >= params.codebook_size):
        raise TokenError(f"token id outside [0, {params.codebook_size})")
    cidx = condition_indices(conds, params.num_labels)
    if len(cidx) != b:
        raise ValueError(f"{len(cidx)} conditions for {b} sequences")
    w = params.weights
    if valid is None:
        valid = np.ones((b, n), bool)
    x = nd.take_rows(w["tok_emb.0"], t[:, 0])
    for v in range(1, j):
        x = x + nd.take_rows(w[f"tok_emb.{v}"], t[:, v])
    x = x + w["layer_emb"][j - 1]
    cond = nd.reshape(nd.take_rows(w["cond_emb"], cidx), (b, 1, params.hidden))
    x = nd.concat([cond, x], axis=1) + w["pos_emb"][: n + 1]
    key_valid = np.concatenate([np.ones((b, 1), bool), valid], axis=1)
    h = trunk_forward(x, key_valid, w, params.layers, params.heads)
    return nd.matmul(h[:, 1:], nd.transpose(params.head(j), (1, 0))) + w[f"head_b.{j}"]


def rformer_loss(stacks, labels, params: RTransformerParams, rng: Rng, cond_drop: float = 0.1, j: int | None = None):
    """Cross-entropy on every position of one uniformly drawn layer; returns (loss, accuracy, j)."""
    if not stacks:
        raise ValueError("empty batch")
    if j is None:
        j = int(rng.integers(1, params.depth + 1))
    for s in stacks:
        if len(s) != params.depth + 1:
            raise ValueError(f"stack has {len(s)} rows, expected {params.depth + 1}")
    lengths = [len(s[0]) for s in stacks]
    n = max(lengths)
    below = np.zeros((len(stacks), j, n), np.int64)
    for i, s in enumerate(stacks):
        below[i, :, : lengths[i]] = np.asarray(s[:j])
    targets, valid = pad_rows([np.asarray(s[j]) for s in stacks], 0)
    drop = rng.uniform(size=len(stacks)) < cond_drop
    conds = [None if d else int(l) for d, l in zip(drop, labels)]
    logits = rformer_forward(below, j, conds, params, valid)
    loss = nd.cross_entropy(logits, targets, valid)
    acc = float((logits.data.argmax(-1) == targets)[valid].mean())
    return loss, acc, j


def train_rformer(stacks, labels, num_labels: int, codebook_size: int, depth: int, tcfg, rng: Rng,
                  progress=None) -> tuple[RTransformerParams, TransformerLog]:
    """Fit the residual transformer on full token stacks of a tokenized corpus."""
    params = init_rformer(codebook_size, depth, num_labels, rng.stream("init"), tcfg.hidden, tcfg.layers,
                          tcfg.heads, tcfg.ff_mult, tcfg.max_len)
    labels = np.asarray(labels)

    def loss_fn(ids, srng):
        loss, acc, _ = rformer_loss([stacks[i] for i in ids], labels[ids], params, srng, tcfg.cond_drop)
        return loss, acc

    tlog = train_token_model(params, params.weights, loss_fn, len(stacks), tcfg, rng, "rformer", progress)
    return params, tlog


def layer_accuracy(stacks, labels, params: RTransformerParams, j: int, batch: int = 64) -> float:
    """Top-1 accuracy for layer ``j`` with ground-truth rows below and real conditions."""
    hits = total = 0
    labels = np.asarray(labels)
    for s in range(0, len(stacks), batch):
        chunk = stacks[s:s + batch]
        lengths = [len(x[0]) for x in chunk]
        below = np.zeros((len(chunk), j, max(lengths)), np.int64)
        for i, x in enumerate(chunk):
            below[i, :, : lengths[i]] = np.asarray(x[:j])
        targets, valid = pad_rows([np.asarray(x[j]) for x in chunk], 0)
        pred = rformer_forward(below, j, list(labels[s:s + batch]), params, valid).data.argmax(-1)
        hits += int((pred == targets)[valid].sum())
        total += int(valid.sum())
    return hits / max(total, 1)
