"""Masked transformer over base-layer tokens.

The condition is a label embedding prepended as one extra token; the null
condition has its own row at the end of the table. Token ids ``K`` and
``K + 1`` are the mask and pad ids and are never predicted.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .ndmath import Rng, Tape, Tensor
from .schedule import apply_mask, draw_training_mask
from .transformer import condition_indices, init_normal, init_trunk, pad_rows, trunk_forward

log = logging.getLogger(__name__)


class TokenError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MTransformerParams:
    weights: dict[str, Tensor]
    codebook_size: int
    num_labels: int
    hidden: int
    layers: int
    heads: int
    max_len: int

    @property
    def mask_id(self) -> int:
        return self.codebook_size

    @property
    def pad_id(self) -> int:
        return self.codebook_size + 1


@dataclass
class TransformerLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def init_mformer(codebook_size: int, num_labels: int, rng: Rng, hidden: int = 128, layers: int = 4,
                 heads: int = 4, ff_mult: int = 4, max_len: int = 64) -> MTransformerParams:
    w: dict[str, Tensor] = {}
    w["tok_emb"] = init_normal(rng.stream("tok_emb"), (codebook_size + 2, hidden), name="tok_emb")
    w["pos_emb"] = init_normal(rng.stream("pos_emb"), (max_len + 1, hidden), name="pos_emb")
    w["cond_emb"] = init_normal(rng.stream("cond_emb"), (num_labels + 1, hidden), name="cond_emb")
    init_trunk(w, hidden, layers, ff_mult, rng.stream("trunk"))
    w["head.w"] = init_normal(rng.stream("head"), (hidden, codebook_size), name="head.w")
    w["head.b"] = nd.parameter(np.zeros(codebook_size), "head.b")
    return MTransformerParams(w, codebook_size, num_labels, hidden, layers, heads, max_len)


def mformer_forward(rows: np.ndarray, conds, params: MTransformerParams, valid: np.ndarray | None = None) -> Tensor:
    """Logits (B, n, K) for a batch of (possibly corrupted) base rows.

    ``conds`` holds one :class:`Condition`, label id, or None per row.
    Positions holding the pad id are hidden from attention.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    b, n = rows.shape
    if n > params.max_len:
        raise ValueError(f"sequence of {n} tokens exceeds max_len {params.max_len}")
    if rows.size and (rows.min() < 0 or rows.max() > params.pad_id):
        raise TokenError(f"token id outside [0, {params.pad_id}]")
    cidx = condition_indices(conds, params.num_labels)
    if len(cidx) != b:
        raise ValueError(f"{len(cidx)} conditions for {b} rows")
    w = params.weights
    if valid is None:
        valid = rows != params.pad_id
    tok = nd.take_rows(w["tok_emb"], rows)
    cond = nd.reshape(nd.take_rows(w["cond_emb"], cidx), (b, 1, params.hidden))
    x = nd.concat([cond, tok], axis=1) + w["pos_emb"][: n + 1]
    key_valid = np.concatenate([np.ones((b, 1), bool), valid], axis=1)
    h = trunk_forward(x, key_valid, w, params.layers, params.heads)
    return nd.linear(h[:, 1:], w["head.w"], w["head.b"])


def corrupt_batch(rows: list[np.ndarray], labels, params: MTransformerParams, cond_drop: float, rng: Rng):
    """Mask every row with its own schedule draw and drop conditions.

    Returns (inputs, targets, supervision weights, valid, conds). Rows whose
    draw selects nothing are redrawn once and then left unsupervised.
    """
    corrupted, flags = [], []
    for r in rows:
        for _attempt in range(2):
            _, plan = draw_training_mask(len(r), rng)
            if len(plan):
                break
        c, f = apply_mask(r, plan, params.codebook_size, rng, mask_id=params.mask_id)
        corrupted.append(c)
        flags.append(f)
    inputs, valid = pad_rows(corrupted, params.pad_id)
    targets, _ = pad_rows(rows, 0)
    weights, _ = pad_rows([f.astype(np.int64) for f in flags], 0)
    drop = rng.uniform(size=len(rows)) < cond_drop
    conds = [None if d else int(l) for d, l in zip(drop, labels)]
    return inputs, targets, weights.astype(bool), valid, conds


def mformer_loss(rows: list[np.ndarray], labels, params: MTransformerParams, rng: Rng, cond_drop: float = 0.1):
    """Cross-entropy over corrupted positions; returns (loss, accuracy)."""
    if not rows:
        raise ValueError("empty batch")
    inputs, targets, weights, valid, conds = corrupt_batch(rows, labels, params, cond_drop, rng)
    logits = mformer_forward(inputs, conds, params, valid)
    loss = nd.cross_entropy(logits, targets, weights)
    pred = logits.data.argmax(-1)
    acc = float((pred == targets)[weights].mean()) if weights.any() else float("nan")
    return loss, acc


def train_token_model(params, weights: dict[str, Tensor], loss_fn, n_items: int, tcfg, rng: Rng, tag: str, progress=None) -> TransformerLog:
    """Shared Adam + warm-up loop for the two token transformers.

    ``loss_fn(batch_ids, step_rng)`` returns (loss tensor, accuracy).
    """
    names = list(weights)
    tensors = [weights[k] for k in names]
    state = nd.AdamState()
    tlog = TransformerLog()
    batch_rng = rng.stream("batches")
    for step in range(1, tcfg.steps + 1):
        ids = batch_rng.integers(0, n_items, size=tcfg.batch_size)
        try:
            with Tape() as tape:
                loss, acc = loss_fn(ids, rng.stream("step", step))
        except nd.NumericError as exc:
            raise TrainingDiverged(f"{tag} diverged at step {step}: {exc}") from exc
        lval = loss.item()
        if not math.isfinite(lval):
            raise TrainingDiverged(f"{tag} loss became {lval} at step {step}")
        grads = tape.gradient(loss, tensors)
        lr = nd.warmup_lr(step, tcfg.lr, tcfg.warmup)
        nd.adam_step(weights, dict(zip(names, grads)), state, lr)
        if step % 50 == 0 or step == 1 or step == tcfg.steps:
            tlog.steps.append(step)
            tlog.loss.append(lval)
            tlog.accuracy.append(acc)
            tlog.lr.append(lr)
            log.info("%s step %d loss %.4f acc %.3f lr %.2e", tag, step, lval, acc, lr)
            if progress:
                progress(step, lval)
    return tlog


def train_mformer(token_rows: list[np.ndarray], labels, num_labels: int, codebook_size: int, tcfg, rng: Rng,
                  progress=None) -> tuple[MTransformerParams, TransformerLog]:
    """Fit the masked transformer on base-layer rows of a tokenized corpus."""
    params = init_mformer(codebook_size, num_labels, rng.stream("init"), tcfg.hidden, tcfg.layers,
                          tcfg.heads, tcfg.ff_mult, tcfg.max_len)
    labels = np.asarray(labels)

    def loss_fn(ids, srng):
        return mformer_loss([token_rows[i] for i in ids], labels[ids], params, srng, tcfg.cond_drop)

    tlog = train_token_model(params, params.weights, loss_fn, len(token_rows), tcfg, rng, "mformer", progress)
    return params, tlog


def masked_accuracy(token_rows: list[np.ndarray], labels, params: MTransformerParams, rng: Rng, batch: int = 64) -> float:
    """Top-1 accuracy on corrupted positions of held-out rows (no condition drop)."""
    hits = total = 0
    for s in range(0, len(token_rows), batch):
        rows = token_rows[s:s + batch]
        inputs, targets, weights, valid, conds = corrupt_batch(rows, labels[s:s + batch], params, 0.0, rng.stream(s))
        pred = mformer_forward(inputs, conds, params, valid).data.argmax(-1)
        hits += int((pred == targets)[weights].sum())
        total += int(weights.sum())
    return hits / max(total, 1)
