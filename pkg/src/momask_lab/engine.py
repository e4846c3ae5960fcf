"""Inference: confidence-ranked base decoding, guided residual filling,
generation and temporal inpainting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import CodecParams, LengthError, TokenStack, detokenize, pad_to_multiple, tokenize
from .mformer import MTransformerParams, mformer_forward
from .ndmath import Rng, sample_categorical_rows
from .rformer import RTransformerParams, rformer_forward
from .schedule import mask_count
from .transformer import Condition

FRAMES_PER_TOKEN = 4


@dataclass(frozen=True)
class Guidance:
    s_masked: float = 4.0
    s_residual: float = 5.0
    temperature: float = 1.0
    gumbel_anneal: bool = False

    def __post_init__(self):
        if self.s_masked < 0 or self.s_residual < 0:
            raise ValueError("guidance scales must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_config(cls, ecfg) -> "Guidance":
        return cls(ecfg.s_masked, ecfg.s_residual, ecfg.temperature, ecfg.gumbel_anneal)


@dataclass
class Models:
    codec: CodecParams
    mformer: MTransformerParams
    rformer: RTransformerParams


@dataclass
class DecodeState:
    row: np.ndarray
    fixed: np.ndarray
    confidence: np.ndarray
    iteration: int = 0


@dataclass
class TraceStep:
    iteration: int
    masked: int
    locked: int
    mean_conf: float
    tokens: np.ndarray


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def masked_counts(self) -> list[int]:
        return [s.masked for s in self.steps]

    def to_text(self) -> str:
        return "".join(f"iter={s.iteration} masked={s.masked} locked={s.locked} mean_conf={s.mean_conf:.6f}\n"
                       for s in self.steps)


def cfg_logits(cond: np.ndarray, uncond: np.ndarray, s: float) -> np.ndarray:
    """(1 + s) * cond - s * uncond, written as cond + s * (cond - uncond).

    The second form is exact when cond == uncond, which the first is not in
    floating point.
    """
    cond = np.asarray(cond)
    uncond = np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"logit shapes differ: {cond.shape} vs {uncond.shape}")
    if s == 0:
        return cond.copy()
    return cond + s * (cond - uncond)


def _as_condition(c) -> Condition:
    if isinstance(c, Condition):
        return c
    return Condition(None if c is None else int(c))


def _guided_base_logits(row: np.ndarray, cond: Condition, mp: MTransformerParams, s: float) -> np.ndarray:
    if s == 0:
        return mformer_forward(row[None], [cond], mp).data[0]
    out = mformer_forward(np.stack([row, row]), [cond, Condition.null()], mp).data
    return cfg_logits(out[0], out[1], s)


def decode_base(n: int, condition, mparams: MTransformerParams, iterations: int, guidance: Guidance, rng: Rng,
                locked_row: np.ndarray | None = None, locked: np.ndarray | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Fill a base row of ``n`` tokens in ``iterations`` confidence-ranked passes.

    ``locked_row``/``locked`` pin tokens that are never sampled or remasked;
    the remask schedule then runs over the free positions only.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    if n > mparams.max_len:
        raise LengthError(f"{n} tokens exceed the masked transformer's max_len {mparams.max_len}")
    cond = _as_condition(condition)
    fixed = np.zeros(n, bool) if locked is None else np.asarray(locked, bool).copy()
    row = np.full(n, mparams.mask_id, np.int64)
    if fixed.any():
        row[fixed] = np.asarray(locked_row, np.int64)[fixed]
    state = DecodeState(row, fixed, np.where(fixed, np.inf, -np.inf))
    n_free = int((~fixed).sum())
    trace = DecodeTrace()
    for l in range(1, iterations + 1):
        state.iteration = l
        open_ = state.row == mparams.mask_id
        if not open_.any():
            trace.steps.append(TraceStep(l, 0, int(state.fixed.sum()), 0.0, state.row.copy()))
            continue
        logits = _guided_base_logits(state.row, cond, mparams, guidance.s_masked)
        idx, logp = sample_categorical_rows(logits[open_], guidance.temperature, rng)
        state.row[open_] = idx
        conf = logp.copy()
        if guidance.gumbel_anneal:
            conf = conf + rng.gumbel(size=conf.shape) * (1.0 - l / iterations)
        state.confidence[open_] = conf
        remask = mask_count(l / iterations, n_free) if n_free else 0
        if remask:
            order = np.argsort(np.where(state.fixed, np.inf, state.confidence), kind="stable")
            state.row[order[:remask]] = mparams.mask_id
        state.fixed = state.row != mparams.mask_id
        state.confidence[~state.fixed] = -np.inf
        trace.steps.append(TraceStep(l, remask, int(state.fixed.sum()), float(np.mean(logp)), state.row.copy()))
    return state.row, trace


def fill_residuals(base_row: np.ndarray, condition, rparams: RTransformerParams, guidance: Guidance,
                   mode: str = "greedy", rng: Rng | None = None, reference: TokenStack | None = None,
                   locked: np.ndarray | None = None) -> TokenStack:
    """Predict layers 1..V one at a time, each from every row below it.

    With ``reference`` and ``locked``, locked positions copy the reference
    token at every layer instead of taking the prediction.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown residual mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    cond = _as_condition(condition)
    base_row = np.asarray(base_row, np.int64)
    rows = np.zeros((rparams.depth + 1, len(base_row)), np.int64)
    rows[0] = base_row
    for j in range(1, rparams.depth + 1):
        below = rows[:j]
        if guidance.s_residual == 0:
            logits = rformer_forward(below, j, [cond], rparams).data[0]
        else:
            out = rformer_forward(np.stack([below, below]), j, [cond, Condition.null()], rparams).data
            logits = cfg_logits(out[0], out[1], guidance.s_residual)
        if mode == "greedy":
            rows[j] = logits.argmax(-1)
        else:
            rows[j], _ = sample_categorical_rows(logits, guidance.temperature, rng)
        if reference is not None and locked is not None:
            rows[j, locked] = reference.rows[j, locked]
    return TokenStack(rows)


def generate_tokens(condition, n_tokens: int, models: Models, iterations: int, guidance: Guidance, rng: Rng,
                    residual_mode: str = "greedy") -> tuple[TokenStack, DecodeTrace]:
    base, trace = decode_base(n_tokens, condition, models.mformer, iterations, guidance, rng.stream("base"))
    stack = fill_residuals(base, condition, models.rformer, guidance, residual_mode, rng.stream("residual"))
    return stack, trace


def generate(condition, n_frames: int, models: Models, iterations: int, guidance: Guidance, rng: Rng,
             residual_mode: str = "greedy", layers_used: int | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Motion of exactly ``n_frames`` frames; lengths off the 4-frame grid are padded then trimmed."""
    if n_frames < 1:
        raise LengthError("n_frames must be positive")
    n_tokens = -(-n_frames // FRAMES_PER_TOKEN)
    stack, trace = generate_tokens(condition, n_tokens, models, iterations, guidance, rng, residual_mode)
    return detokenize(stack, models.codec, layers_used)[:n_frames], trace


@dataclass
class InpaintSpec:
    reference: np.ndarray
    ranges: list[tuple[int, int]]  # [start, end) in token coordinates

    def validate(self, n_tokens: int) -> None:
        last = 0
        for start, end in sorted(self.ranges):
            if not 0 <= start < end <= n_tokens:
                raise ValueError(f"edit range [{start}, {end}) outside [0, {n_tokens})")
            if start < last:
                raise ValueError("edit ranges overlap")
            last = end

    def edit_mask(self, n_tokens: int) -> np.ndarray:
        m = np.zeros(n_tokens, bool)
        for start, end in self.ranges:
            m[start:end] = True
        return m


@dataclass
class InpaintResult:
    motion: np.ndarray
    tokens: TokenStack
    reference_tokens: TokenStack
    reference_recon: np.ndarray
    trace: DecodeTrace


def inpaint(spec: InpaintSpec, condition, models: Models, iterations: int, guidance: Guidance, rng: Rng,
            residual_mode: str = "greedy") -> InpaintResult:
    """Regenerate the edit ranges of a reference motion, locking everything else.

    Frames outside the edited token spans are taken from the reference
    reconstruction, since the decoder's receptive field crosses edit
    boundaries and would otherwise nudge flank frames slightly.
    """
    padded, n_frames = pad_to_multiple(np.asarray(spec.reference, np.float32))
    ref = tokenize(padded, models.codec)
    recon = detokenize(ref, models.codec)
    spec.validate(ref.n)
    edit = spec.edit_mask(ref.n)
    if not edit.any():
        return InpaintResult(recon[:n_frames], ref, ref, recon[:n_frames], DecodeTrace())
    locked = ~edit
    base, trace = decode_base(ref.n, condition, models.mformer, iterations, guidance, rng.stream("base"),
                              locked_row=ref.rows[0], locked=locked)
    stack = fill_residuals(base, condition, models.rformer, guidance, residual_mode, rng.stream("residual"),
                           reference=ref, locked=locked)
    out = detokenize(stack, models.codec)
    frame_locked = np.repeat(locked, FRAMES_PER_TOKEN)
    out[frame_locked] = recon[frame_locked]
    return InpaintResult(out[:n_frames], stack, ref, recon[:n_frames], trace)
