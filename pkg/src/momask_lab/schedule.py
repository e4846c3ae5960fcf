"""Cosine mask-ratio schedule and BERT-style training corruption."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .ndmath import Rng

DEFAULT_ITERATIONS = 10
ACTION_PROBS = (0.8, 0.1, 0.1)


class Action(IntEnum):
    MASK_TOKEN = 0
    RANDOM_TOKEN = 1
    KEEP = 2


@dataclass(frozen=True)
class MaskPlan:
    positions: np.ndarray  # sorted int positions selected for corruption
    actions: np.ndarray  # Action per selected position

    def __len__(self) -> int:
        return len(self.positions)


def gamma(tau: float) -> float:
    """Fraction of tokens masked at progress ``tau``: cos(pi * tau / 2)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tau == 1.0:
        return 0.0
    return math.cos(math.pi * tau / 2.0)


def mask_count(tau: float, n: int) -> int:
    """ceil(gamma(tau) * n).

    The product is rounded to 9 decimals before the ceiling so that float
    noise such as 5.000000000000001 does not add a whole token.
    """
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    return min(n, math.ceil(round(gamma(tau) * n, 9)))


def remask_counts(n: int, iterations: int) -> list[int]:
    """Masked-token count left after each decoding iteration l = 1..L."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    return [mask_count(l / iterations, n) for l in range(1, iterations + 1)]


def draw_training_mask(n: int, rng: Rng) -> tuple[float, MaskPlan]:
    tau = float(rng.uniform())
    m = mask_count(tau, n)
    positions = np.sort(rng.choice(n, size=m, replace=False)) if m else np.zeros(0, dtype=np.int64)
    actions = rng.choice(3, size=m, p=ACTION_PROBS) if m else np.zeros(0, dtype=np.int64)
    return tau, MaskPlan(positions.astype(np.int64), actions.astype(np.int64))


def apply_mask(tokens: np.ndarray, plan: MaskPlan, vocab_size: int, rng: Rng, mask_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a base-layer row according to ``plan``.

    Returns the corrupted row and a boolean supervision flag per position;
    every selected position is supervised, whatever its action.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    mask_id = vocab_size if mask_id is None else mask_id
    if 0 <= mask_id < vocab_size:
        raise ValueError(f"mask id {mask_id} collides with codebook ids [0, {vocab_size})")
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(plan) and plan.positions.max() >= len(tokens):
        raise IndexError("mask plan position beyond row length")
    out = tokens.copy()
    flags = np.zeros(len(tokens), dtype=bool)
    flags[plan.positions] = True
    is_mask = plan.actions == Action.MASK_TOKEN
    is_rand = plan.actions == Action.RANDOM_TOKEN
    out[plan.positions[is_mask]] = mask_id
    n_rand = int(is_rand.sum())
    if n_rand:
        out[plan.positions[is_rand]] = rng.integers(0, vocab_size, size=n_rand)
    return out, flags
