"""Seeded, splittable random streams.

Each stream is a Philox counter-based generator whose key is derived from
the root seed and a path of stream names, so the numbers a component sees
do not depend on what other components drew before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


class SamplingError(ValueError):
    pass


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """A named random stream.

    ``Rng(7).stream("corpus")`` and ``Rng(7).stream("masking")`` are
    independent; the same seed and path always give the same numbers.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self.gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def stream(self, *names) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(n) for n in names))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    # thin pass-throughs, so call sites read like numpy
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def gumbel(self, size=None):
        return self.gen.gumbel(size=size)

    def random(self, size=None):
        return self.gen.random(size)


def _log_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise SamplingError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    top = np.max(z, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise SamplingError("cannot sample from all -inf (or non-finite) logits")
    z = z - top
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(logits, temperature: float, rng: Rng) -> tuple[int, float]:
    """Draw one index from softmax(logits / temperature).

    Returns the index and its log-probability under that distribution.
    """
    logits = np.asarray(logits)
    if logits.ndim != 1 or logits.size < 1:
        raise SamplingError(f"expected a non-empty 1-D logit vector, got shape {logits.shape}")
    idx, lp = sample_categorical_rows(logits[None, :], temperature, rng)
    return int(idx[0]), float(lp[0])


def sample_categorical_rows(logits: np.ndarray, temperature: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise version of :func:`sample_categorical` for ``(n, K)`` logits."""
    logp = _log_probs(logits, temperature)
    cdf = np.cumsum(np.exp(logp), axis=-1)
    u = rng.random(logp.shape[0]) * cdf[:, -1]
    idx = np.array([np.searchsorted(c, x, side="right") for c, x in zip(cdf, u)], dtype=np.int64)
    idx = np.minimum(idx, logp.shape[1] - 1)
    # never land on a zero-probability tail entry through rounding
    bad = ~np.isfinite(logp[np.arange(len(idx)), idx]) | (np.exp(logp[np.arange(len(idx)), idx]) == 0)
    if np.any(bad):
        idx[bad] = np.argmax(logp[bad], axis=-1)
    return idx, logp[np.arange(len(idx)), idx]
