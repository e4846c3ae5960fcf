"""MMK1 checkpoint container.

Layout, all integers little-endian::

    b"MMK1"  u32 version
    u32 len + meta JSON (sorted keys)
    u32 len + config snapshot text
    u32 count + u64 seeds
    u32 count, then per array:
        u16 len + name, u8 rank, u32 extents[rank],
        float32 payload (row-major), u32 crc32(payload)
    u32 count, then per tie: u16 len + alias, u16 len + target

Tied parameters (several names bound to one Tensor) are written once; the
alias is restored as the same Tensor object.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import ndmath as nd
from ..codec import CodecParams
from ..corpus import OracleParams
from ..mformer import MTransformerParams
from ..ndmath import Tensor
from ..rformer import RTransformerParams
from ..rvq import Codebook, RvqStack

MAGIC = b"MMK1"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    ties: dict[str, str] = field(default_factory=dict)  # alias -> stored name
    meta: dict = field(default_factory=dict)
    config_text: str = ""
    seeds: list[int] = field(default_factory=list)


def _put_str(buf, s: str, width: str = "<H") -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack(width, len(b)))
    buf.write(b)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, json.dumps(ckpt.meta, sort_keys=True), "<I")
    _put_str(buf, ckpt.config_text, "<I")
    buf.write(struct.pack("<I", len(ckpt.seeds)))
    for s in ckpt.seeds:
        buf.write(struct.pack("<Q", int(s)))
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise CheckpointError(f"array {name!r} has dtype {a.dtype}; only float32 is stored")
        _put_str(buf, name)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        payload = np.ascontiguousarray(a, dtype=_F32).tobytes()
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    buf.write(struct.pack("<I", len(ckpt.ties)))
    for alias, target in ckpt.ties.items():
        _put_str(buf, alias)
        _put_str(buf, target)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, width: str, what: str) -> str:
        (n,) = self.unpack(width, what)
        return self.take(n, what).decode("utf-8")


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not an MMK1 checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.string("<I", "meta"))
    config_text = r.string("<I", "config snapshot")
    (n_seeds,) = r.unpack("<I", "seed count")
    seeds = [r.unpack("<Q", "seeds")[0] for _ in range(n_seeds)]
    (n_arrays,) = r.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    for i in range(n_arrays):
        name = r.string("<H", f"name of array #{i}")
        what = f"array {name!r}"
        (rank,) = r.unpack("<B", what)
        shape = r.unpack(f"<{rank}I", what)
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(4 * count, what)
        (crc,) = r.unpack("<I", what)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in array {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=_F32).reshape(shape).astype(np.float32)
    (n_ties,) = r.unpack("<I", "tie count")
    ties = {}
    for _ in range(n_ties):
        alias = r.string("<H", "tie record")
        target = r.string("<H", "tie record")
        if target not in arrays:
            raise CheckpointError(f"tie {alias!r} points at missing array {target!r}")
        ties[alias] = target
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(arrays, ties, meta, config_text, seeds)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# -- parameter sets <-> containers ----------------------------------------

def _pack_weights(weights: dict[str, Tensor], prefix: str = "") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    arrays, ties, seen = {}, {}, {}
    for name, t in weights.items():
        key = prefix + name
        if id(t) in seen:
            ties[key] = seen[id(t)]
            continue
        seen[id(t)] = key
        arrays[key] = t.data
    return arrays, ties


def _unpack_weights(ckpt: Checkpoint, prefix: str = "") -> dict[str, Tensor]:
    w = {}
    order = [k for k in ckpt.meta.get("weight_order", []) if k.startswith(prefix)]
    for key in order:
        name = key[len(prefix):]
        if key in ckpt.ties:
            w[name] = w[ckpt.ties[key][len(prefix):]]
        else:
            if key not in ckpt.arrays:
                raise CheckpointError(f"array {key!r} missing from checkpoint")
            w[name] = nd.parameter(ckpt.arrays[key].copy(), name)
    return w


def _weights_ckpt(kind: str, weights: dict[str, Tensor], meta: dict, config_text: str, seeds) -> Checkpoint:
    arrays, ties = _pack_weights(weights, "w.")
    meta = {"kind": kind, **meta, "weight_order": ["w." + k for k in weights]}
    return Checkpoint(arrays, ties, meta, config_text, list(seeds))


def _expect(ckpt: Checkpoint, kind: str) -> None:
    got = ckpt.meta.get("kind")
    if got != kind:
        raise CheckpointError(f"checkpoint holds {got!r}, expected {kind!r}")


def codec_to_checkpoint(p: CodecParams, config_text: str = "", seeds=()) -> Checkpoint:
    ck = _weights_ckpt("codec", p.weights, {"res_blocks": p.res_blocks, "beta": p.beta,
                                             "depth": p.rvq.depth, "dropout_q": p.rvq.dropout_q},
                       config_text, seeds)
    ck.arrays["feature_mean"] = p.feature_mean
    ck.arrays["feature_std"] = p.feature_std
    for v, book in enumerate(p.rvq.layers):
        ck.arrays[f"rvq.{v}.codes"] = book.codes
        ck.arrays[f"rvq.{v}.ema_count"] = book.ema_count
        ck.arrays[f"rvq.{v}.ema_sum"] = book.ema_sum
    return ck


def codec_from_checkpoint(ck: Checkpoint) -> CodecParams:
    _expect(ck, "codec")
    books = []
    for v in range(ck.meta["depth"]):
        try:
            books.append(Codebook(ck.arrays[f"rvq.{v}.codes"].copy(), ck.arrays[f"rvq.{v}.ema_count"].copy(),
                                  ck.arrays[f"rvq.{v}.ema_sum"].copy()))
        except KeyError as exc:
            raise CheckpointError(f"array {exc.args[0]!r} missing from checkpoint") from None
    return CodecParams(_unpack_weights(ck, "w."), RvqStack(books, ck.meta["dropout_q"]),
                       ck.arrays["feature_mean"].copy(), ck.arrays["feature_std"].copy(),
                       ck.meta["res_blocks"], ck.meta["beta"])


_TF_FIELDS = ("codebook_size", "num_labels", "hidden", "layers", "heads", "max_len")


def mformer_to_checkpoint(p: MTransformerParams, config_text: str = "", seeds=()) -> Checkpoint:
    return _weights_ckpt("mformer", p.weights, {k: getattr(p, k) for k in _TF_FIELDS}, config_text, seeds)


def mformer_from_checkpoint(ck: Checkpoint) -> MTransformerParams:
    _expect(ck, "mformer")
    return MTransformerParams(_unpack_weights(ck, "w."), *(ck.meta[k] for k in _TF_FIELDS))


def rformer_to_checkpoint(p: RTransformerParams, config_text: str = "", seeds=()) -> Checkpoint:
    meta = {k: getattr(p, k) for k in _TF_FIELDS}
    meta["depth"] = p.depth
    return _weights_ckpt("rformer", p.weights, meta, config_text, seeds)


def rformer_from_checkpoint(ck: Checkpoint) -> RTransformerParams:
    _expect(ck, "rformer")
    m = ck.meta
    return RTransformerParams(_unpack_weights(ck, "w."), m["codebook_size"], m["depth"], m["num_labels"],
                              m["hidden"], m["layers"], m["heads"], m["max_len"])


def oracle_to_checkpoint(p: OracleParams, config_text: str = "", seeds=()) -> Checkpoint:
    ck = _weights_ckpt("oracle", p.weights, {"n_classes": p.n_classes}, config_text, seeds)
    ck.arrays["feature_mean"] = p.feature_mean
    ck.arrays["feature_std"] = p.feature_std
    return ck


def oracle_from_checkpoint(ck: Checkpoint) -> OracleParams:
    _expect(ck, "oracle")
    return OracleParams(_unpack_weights(ck, "w."), ck.arrays["feature_mean"].copy(),
                        ck.arrays["feature_std"].copy(), ck.meta["n_classes"])


TO_CHECKPOINT = {
    CodecParams: codec_to_checkpoint,
    MTransformerParams: mformer_to_checkpoint,
    RTransformerParams: rformer_to_checkpoint,
    OracleParams: oracle_to_checkpoint,
}
FROM_CHECKPOINT = {
    "codec": codec_from_checkpoint,
    "mformer": mformer_from_checkpoint,
    "rformer": rformer_from_checkpoint,
    "oracle": oracle_from_checkpoint,
}


def save_params(path, params, config_text: str = "", seeds=()) -> None:
    save_checkpoint(path, TO_CHECKPOINT[type(params)](params, config_text, seeds))


def load_params(path, kind: str | None = None):
    ck = load_checkpoint(path)
    k = ck.meta.get("kind")
    if kind is not None and k != kind:
        raise CheckpointError(f"{path} holds {k!r}, expected {kind!r}")
    if k not in FROM_CHECKPOINT:
        raise CheckpointError(f"unknown checkpoint kind {k!r}")
    return FROM_CHECKPOINT[k](ck)
