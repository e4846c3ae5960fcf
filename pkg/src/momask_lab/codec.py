"""Motion RVQ-VAE: convolutional encoder/decoder around an :class:`RvqStack`.

The encoder halves the time axis twice (stride-2 convolutions, each
followed by residual blocks), so ``n = N / 4`` latent vectors come out of
``N`` frames. The decoder mirrors it with nearest-neighbour upsampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .ndmath import Rng, Tape, Tensor
from .rvq import (
    RvqStack,
    commitment_loss,
    draw_dropout_layers,
    ema_update,
    lookup_codes,
    residual_quantize,
    straight_through,
)

log = logging.getLogger(__name__)

DOWNSCALE = 4


class LengthError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TokenStack:
    rows: np.ndarray  # (V+1, n) int64

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def depth(self) -> int:
        return self.rows.shape[0]

    def copy(self) -> "TokenStack":
        return TokenStack(self.rows.copy())


@dataclass
class CodecParams:
    weights: dict[str, Tensor]
    rvq: RvqStack
    feature_mean: np.ndarray
    feature_std: np.ndarray
    res_blocks: int = 2
    beta: float = 0.25

    @property
    def code_dim(self) -> int:
        return self.rvq.layers[0].dim

    @property
    def feature_dim(self) -> int:
        return self.feature_mean.shape[0]


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    commit: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


# -- parameters ------------------------------------------------------------

def _conv(weights, name, c_out, c_in, k, rng: Rng, gain=1.0):
    std = gain * math.sqrt(2.0 / (c_in * k))
    weights[f"{name}.w"] = nd.parameter(rng.normal(0, std, size=(c_out, c_in, k)), f"{name}.w")
    weights[f"{name}.b"] = nd.parameter(np.zeros(c_out), f"{name}.b")


def _resblock_params(weights, name, width, rng: Rng):
    _conv(weights, f"{name}.c1", width, width, 3, rng.stream(name, "c1"))
    _conv(weights, f"{name}.c2", width, width, 1, rng.stream(name, "c2"), gain=0.3)


def init_codec(feature_dim: int, code_dim: int, depth: int, codebook_size: int, rng: Rng,
               width: int = 64, res_blocks: int = 2, dropout_q: float = 0.2, beta: float = 0.25,
               feature_mean=None, feature_std=None) -> CodecParams:
    w: dict[str, Tensor] = {}
    _conv(w, "enc.in", width, feature_dim, 3, rng.stream("enc.in"))
    for s in range(2):
        _conv(w, f"enc.down{s}", width, width, 4, rng.stream("enc.down", s))
        for r in range(res_blocks):
            _resblock_params(w, f"enc.res{s}.{r}", width, rng)
    _conv(w, "enc.out", code_dim, width, 3, rng.stream("enc.out"), gain=0.5)
    _conv(w, "dec.in", width, code_dim, 3, rng.stream("dec.in"))
    for s in range(2):
        for r in range(res_blocks):
            _resblock_params(w, f"dec.res{s}.{r}", width, rng)
        _conv(w, f"dec.up{s}", width, width, 3, rng.stream("dec.up", s))
    _conv(w, "dec.out", feature_dim, width, 3, rng.stream("dec.out"), gain=0.5)
    rvq = RvqStack.init(depth, codebook_size, code_dim, rng.stream("rvq"), dropout_q)
    mean = np.zeros(feature_dim, np.float32) if feature_mean is None else np.asarray(feature_mean, np.float32)
    std = np.ones(feature_dim, np.float32) if feature_std is None else np.asarray(feature_std, np.float32)
    return CodecParams(w, rvq, mean, std, res_blocks, beta)


# -- networks --------------------------------------------------------------

def _c(x, p, name, stride=1, pad=None):
    k = p[f"{name}.w"].shape[2]
    if pad is None:
        pad = (k - 1) // 2
    return nd.conv1d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, pad=pad)


def _resblock(x, p, name):
    h = _c(nd.relu(x), p, f"{name}.c1")
    h = _c(nd.relu(h), p, f"{name}.c2")
    return x + h


def check_length(n_frames: int) -> None:
    if n_frames < DOWNSCALE:
        raise LengthError(f"motion has {n_frames} frames; at least {DOWNSCALE} required")
    if n_frames % DOWNSCALE:
        raise LengthError(f"motion length {n_frames} is not a multiple of {DOWNSCALE}; pad it first")


def encoder_forward(x: Tensor, params: CodecParams) -> Tensor:
    """(B, N, D) normalised frames -> (B, N/4, d) latents."""
    p = params.weights
    check_length(x.shape[1])
    h = nd.transpose(x, (0, 2, 1))
    h = nd.relu(_c(h, p, "enc.in"))
    for s in range(2):
        h = _c(h, p, f"enc.down{s}", stride=2, pad=1)
        for r in range(params.res_blocks):
            h = _resblock(h, p, f"enc.res{s}.{r}")
    h = _c(nd.relu(h), p, "enc.out")
    return nd.transpose(h, (0, 2, 1))


def decoder_forward(z: Tensor, params: CodecParams) -> Tensor:
    """(B, n, d) latents -> (B, 4n, D) normalised frames."""
    p = params.weights
    h = nd.transpose(z, (0, 2, 1))
    h = nd.relu(_c(h, p, "dec.in"))
    for s in range(2):
        for r in range(params.res_blocks):
            h = _resblock(h, p, f"dec.res{s}.{r}")
        h = nd.repeat_time(h, 2)
        h = nd.relu(_c(h, p, f"dec.up{s}"))
    h = _c(h, p, "dec.out")
    return nd.transpose(h, (0, 2, 1))


# -- public operations -------------------------------------------------------

def pad_to_multiple(motion: np.ndarray, multiple: int = DOWNSCALE) -> tuple[np.ndarray, int]:
    """Repeat the last frame until the length is a multiple of ``multiple``."""
    n = motion.shape[0]
    if n < 1:
        raise LengthError("empty motion")
    extra = (-n) % multiple
    if n + extra < DOWNSCALE:
        extra = DOWNSCALE - n
    if extra:
        motion = np.concatenate([motion, np.repeat(motion[-1:], extra, axis=0)], axis=0)
    return motion, n


def normalize(motion: np.ndarray, params: CodecParams) -> np.ndarray:
    return ((motion - params.feature_mean) / params.feature_std).astype(np.float32)


def denormalize(motion: np.ndarray, params: CodecParams) -> np.ndarray:
    return (motion * params.feature_std + params.feature_mean).astype(np.float32)


def encode(motion: np.ndarray, params: CodecParams) -> np.ndarray:
    """Raw (N, D) motion with N a multiple of 4 -> (N/4, d) latent array."""
    motion = np.asarray(motion, dtype=np.float32)
    check_length(motion.shape[0])
    return encoder_forward(Tensor(normalize(motion, params)[None]), params).data[0]


def tokenize(motion: np.ndarray, params: CodecParams) -> TokenStack:
    """Encode and residual-quantize with all layers active; pads the tail."""
    padded, _ = pad_to_multiple(np.asarray(motion, dtype=np.float32))
    latents = encode(padded, params)
    return TokenStack(residual_quantize(latents, params.rvq).token_rows.astype(np.int64))


def detokenize(tokens: TokenStack | np.ndarray, params: CodecParams, layers_used: int | None = None) -> np.ndarray:
    """Decode the sum of the first ``layers_used`` code rows to (4n, D) frames."""
    rows = tokens.rows if isinstance(tokens, TokenStack) else np.asarray(tokens)
    layers_used = params.rvq.depth if layers_used is None else layers_used
    z = lookup_codes(rows, params.rvq, layers_used)
    out = decoder_forward(Tensor(z[None]), params).data[0]
    return denormalize(out, params)


def reconstruct(motion: np.ndarray, params: CodecParams, layers_used: int | None = None) -> np.ndarray:
    padded, n = pad_to_multiple(np.asarray(motion, dtype=np.float32))
    return detokenize(tokenize(padded, params), params, layers_used)[:n]


def codec_loss(batch: np.ndarray, params: CodecParams, active_layers: int, frame_mask: np.ndarray | None = None):
    """L1 reconstruction + beta-weighted commitment on a normalised batch.

    Returns (loss tensor, recon tensor, commit tensor, latents, QuantizeResult).
    ``frame_mask`` (B, N) excludes padded frames from the L1 term.
    """
    x = Tensor(batch, dtype=batch.dtype)
    lat = encoder_forward(x, params)
    b, n, d = lat.shape
    flat = nd.reshape(lat, (b * n, d))
    result = residual_quantize(flat.data, params.rvq, active_layers)
    q = nd.reshape(straight_through(flat, result), (b, n, d))
    recon = decoder_forward(q, params)
    err = nd.abs_(recon - x)
    if frame_mask is None:
        rec = err.mean()
    else:
        w = np.broadcast_to(frame_mask[:, :, None], err.shape).astype(err.dtype)
        rec = (err * Tensor(w)).sum() * (1.0 / float(w.sum()))
    com = commitment_loss(flat, result, params.beta)
    return rec + com, rec, com, flat, result


def _sample_windows(motions: list[np.ndarray], batch_size: int, window: int, rng: Rng) -> np.ndarray:
    ids = rng.integers(0, len(motions), size=batch_size)
    out = np.empty((batch_size, window, motions[0].shape[1]), dtype=np.float32)
    for k, i in enumerate(ids):
        m = motions[i]
        start = 0
        if m.shape[0] < window:
            m = pad_to_multiple(m, window)[0]
        elif m.shape[0] > window:
            start = int(rng.integers(0, m.shape[0] - window + 1))
        out[k] = m[start:start + window]
    return out


def train_rvqvae(motions: list[np.ndarray], cfg, rng: Rng, progress=None) -> tuple[CodecParams, TrainLog]:
    """Train the codec on a list of raw (N_i, D) motions.

    ``cfg`` is a :class:`~momask_lab.toolkit.config.RunConfig`.
    """
    if not motions:
        raise ValueError("empty training corpus")
    allf = np.concatenate(motions, axis=0).astype(np.float64)
    mean = allf.mean(0)
    # one shared scale: per-feature scaling would blow near-static joints' noise up to unit variance
    std = np.full_like(mean, max(float((allf - mean).std()), 1e-3))
    rc, cc = cfg.rvq, cfg.codec
    params = init_codec(motions[0].shape[1], rc.code_dim, rc.layers, rc.codebook_size, rng.stream("init"),
                        width=cc.width, res_blocks=cc.res_blocks, dropout_q=rc.dropout_q, beta=rc.beta,
                        feature_mean=mean, feature_std=std)
    normed = [normalize(m, params) for m in motions]
    names = list(params.weights)
    tensors = [params.weights[k] for k in names]
    state = nd.AdamState()
    tlog = TrainLog()
    data_rng = rng.stream("batches")
    drop_rng = rng.stream("dropout")
    reset_rng = rng.stream("reset")
    for step in range(1, cc.steps + 1):
        batch = _sample_windows(normed, cc.batch_size, cc.window, data_rng)
        active = draw_dropout_layers(params.rvq, drop_rng)
        with Tape() as tape:
            loss, rec, com, flat, result = codec_loss(batch, params, active)
        lval = loss.item()
        if not math.isfinite(lval):
            raise TrainingDiverged(f"codec loss became {lval} at step {step}")
        grads = tape.gradient(loss, tensors)
        lr = nd.warmup_lr(step, cc.lr, cc.warmup)
        if cc.decay_at and step > cc.decay_at * cc.steps:
            lr *= cc.decay_gamma
        nd.adam_step(params.weights, dict(zip(names, grads)), state, lr)
        ema_update(
            params.rvq,
            {v: (result.residuals[v], result.token_rows[v]) for v in range(active)},
            rc.ema_decay, rc.reset_threshold, reset_rng,
        )
        if step % 50 == 0 or step == 1 or step == cc.steps:
            tlog.steps.append(step)
            tlog.loss.append(lval)
            tlog.recon.append(rec.item())
            tlog.commit.append(com.item())
            tlog.lr.append(lr)
            log.info("codec step %d loss %.4f recon %.4f commit %.4f", step, lval, rec.item(), com.item())
            if progress:
                progress(step, lval)
    return params, tlog


def mpjpe(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-joint L2 distance for (N, 48) skeleton frames."""
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)).reshape(a.shape[0], -1, 3)
    return float(np.linalg.norm(d, axis=-1).mean())
