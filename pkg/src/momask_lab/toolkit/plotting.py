"""PNG figures for evaluation reports (Agg backend, no timestamps)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_reconstruction(report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report.layers, report.mpjpe, marker="o", label="MPJPE")
    ax.plot(report.layers, report.l1, marker="s", label="mean L1")
    ax.set_xlabel("quantization layers used")
    ax.set_ylabel("held-out error")
    ax.set_xticks(report.layers)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_usage(report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    layers = list(range(len(report.usage)))
    ax.bar(layers, [p for _, p in report.usage])
    ax.set_xlabel("quantization layer")
    ax.set_ylabel("code perplexity")
    fig.tight_layout()
    return _save(fig, path)


def plot_generation(report, path: Path, class_names=None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(report.labels))
    names = [class_names[l] if class_names else str(l) for l in report.labels]
    ax.bar([x - 0.2 for x in xs], [report.full[l] for l in report.labels], width=0.4, label="full stack")
    ax.bar([x + 0.2 for x in xs], [report.base_only[l] for l in report.labels], width=0.4, label="base only")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("oracle accuracy")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_sweeps(report, path: Path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    s = sorted(report.cfg_sweep)
    a.plot(s, [report.cfg_sweep[x] for x in s], marker="o")
    a.set_xlabel("guidance scale")
    a.set_ylabel("oracle accuracy")
    it = sorted(report.iter_sweep)
    b.plot(it, [report.iter_sweep[x] for x in it], marker="o")
    b.set_xlabel("decoding iterations")
    fig.tight_layout()
    return _save(fig, path)


def plot_training(log, path: Path, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(log.steps, log.loss)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
