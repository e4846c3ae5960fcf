"""Evaluation harness: reconstruction sweeps and oracle-scored generation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..codec import CodecParams, detokenize, mpjpe, pad_to_multiple, tokenize
from ..corpus import OracleParams, oracle_classify
from ..engine import Guidance, Models, generate_tokens
from ..ndmath import Rng
from ..rvq import usage_stats

THREADS_ENV = "MOMASK_LAB_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map(fn, items):
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass
class ReconReport:
    layers: list[int]
    mpjpe: list[float]
    l1: list[float]
    per_sequence: np.ndarray  # (S, len(layers)) mpjpe
    usage: list[tuple[float, float]]  # (used fraction, perplexity) per quantizer layer

    def violation_rate(self) -> float:
        """Fraction of sequences whose error rises anywhere along the layer sweep."""
        rises = np.diff(self.per_sequence, axis=1) > 0
        return float(rises.any(axis=1).mean())

    def to_tsv(self) -> str:
        lines = ["layers_used\tmpjpe\tl1"]
        lines += [f"{k}\t{e:.6f}\t{l:.6f}" for k, e, l in zip(self.layers, self.mpjpe, self.l1)]
        return "\n".join(lines) + "\n"

    def usage_tsv(self) -> str:
        lines = ["layer\tused_fraction\tperplexity"]
        lines += [f"{v}\t{u:.6f}\t{p:.6f}" for v, (u, p) in enumerate(self.usage)]
        return "\n".join(lines) + "\n"


def eval_reconstruction(codec: CodecParams, motions, layers=None) -> ReconReport:
    """Per layers_used: mean per-joint L2 and mean L1 on held-out motions."""
    if len(motions) == 0:
        raise ValueError("empty evaluation split")
    layers = list(range(1, codec.rvq.depth + 1)) if layers is None else list(layers)
    for k in layers:
        if not 1 <= k <= codec.rvq.depth:
            raise ValueError(f"layers_used {k} outside [1, {codec.rvq.depth}]")

    def one(m):
        padded, n = pad_to_multiple(np.asarray(m, np.float32))
        stack = tokenize(padded, codec)
        outs = [detokenize(stack, codec, k)[:n] for k in layers]
        return stack.rows, [mpjpe(o, m) for o in outs], [float(np.abs(o - m).mean()) for o in outs]

    results = _map(one, motions)
    per_seq = np.array([r[1] for r in results])
    l1 = np.array([r[2] for r in results])
    usage = []
    for v in range(codec.rvq.depth):
        toks = np.concatenate([r[0][v] for r in results])
        usage.append(usage_stats(toks, codec.rvq.layers[v].size))
    return ReconReport(layers, per_seq.mean(0).tolist(), l1.mean(0).tolist(), per_seq, usage)


@dataclass
class GenerationReport:
    labels: list[int]
    full: dict[int, float]
    base_only: dict[int, float]
    cfg_sweep: dict[float, float] = field(default_factory=dict)
    iter_sweep: dict[int, float] = field(default_factory=dict)
    traces: list[str] = field(default_factory=list)

    @property
    def full_accuracy(self) -> float:
        return float(np.mean(list(self.full.values())))

    @property
    def base_accuracy(self) -> float:
        return float(np.mean(list(self.base_only.values())))

    def to_tsv(self, class_names=None) -> str:
        lines = ["label\tname\tfull_stack\tbase_only"]
        for lid in self.labels:
            name = class_names[lid] if class_names else str(lid)
            lines.append(f"{lid}\t{name}\t{self.full[lid]:.6f}\t{self.base_only[lid]:.6f}")
        lines.append(f"all\tall\t{self.full_accuracy:.6f}\t{self.base_accuracy:.6f}")
        return "\n".join(lines) + "\n"

    def sweep_tsv(self) -> str:
        lines = ["sweep\tvalue\taccuracy"]
        lines += [f"cfg_scale\t{s:g}\t{a:.6f}" for s, a in self.cfg_sweep.items()]
        lines += [f"iterations\t{l}\t{a:.6f}" for l, a in self.iter_sweep.items()]
        return "\n".join(lines) + "\n"


def generation_accuracy(models: Models, oracle: OracleParams, labels, per_label: int, n_frames: int,
                        iterations: int, guidance: Guidance, rng: Rng, residual_mode: str = "greedy",
                        keep_traces: bool = False):
    """Oracle accuracy per label for full-stack and base-only decodes of the same samples."""
    jobs = [(int(lid), i) for lid in labels for i in range(per_label)]
    n_tokens = -(-n_frames // 4)

    def one(job):
        lid, i = job
        stack, trace = generate_tokens(lid, n_tokens, models, iterations, guidance, rng.stream("sample", lid, i),
                                       residual_mode)
        full = detokenize(stack, models.codec)[:n_frames]
        base = detokenize(stack, models.codec, 1)[:n_frames]
        return full, base, trace.to_text()

    results = _map(one, jobs)
    pred_full = oracle_classify([r[0] for r in results], oracle)
    pred_base = oracle_classify([r[1] for r in results], oracle)
    truth = np.array([lid for lid, _ in jobs])
    full, base = {}, {}
    for lid in labels:
        sel = truth == lid
        full[int(lid)] = float((pred_full[sel] == lid).mean())
        base[int(lid)] = float((pred_base[sel] == lid).mean())
    traces = [r[2] for r in results] if keep_traces else []
    return full, base, traces


def eval_generation(models: Models, oracle: OracleParams, labels, per_label: int, n_frames: int, iterations: int,
                    guidance: Guidance, rng: Rng, residual_mode: str = "greedy",
                    cfg_scales=(0.0, 2.0, 4.0, 6.0, 8.0), iteration_counts=(1, 10, 20),
                    sweep_per_label: int | None = None) -> GenerationReport:
    """Main accuracy table plus CFG-scale and iteration-count sweeps."""
    labels = [int(l) for l in labels]
    full, base, traces = generation_accuracy(models, oracle, labels, per_label, n_frames, iterations, guidance,
                                             rng.stream("main"), residual_mode, keep_traces=True)
    report = GenerationReport(labels, full, base, traces=traces)
    k = per_label if sweep_per_label is None else sweep_per_label
    for s in cfg_scales:
        g = Guidance(float(s), guidance.s_residual, guidance.temperature, guidance.gumbel_anneal)
        f, _, _ = generation_accuracy(models, oracle, labels, k, n_frames, iterations, g, rng.stream("cfg", str(s)),
                                      residual_mode)
        report.cfg_sweep[float(s)] = float(np.mean(list(f.values())))
    for it in iteration_counts:
        f, _, _ = generation_accuracy(models, oracle, labels, k, n_frames, int(it), guidance,
                                      rng.stream("iters", int(it)), residual_mode)
        report.iter_sweep[int(it)] = float(np.mean(list(f.values())))
    return report


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
