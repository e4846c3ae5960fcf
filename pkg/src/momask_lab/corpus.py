"""Deterministic synthetic motion-text corpus.

Each sample is a 16-joint skeleton (48 features per frame). Joint 0 holds
the root as (x-velocity, height, z-velocity); joints 1..15 are positions
relative to the root. Every class is a small composition of sinusoids and
ramps over a rest pose, jittered per sample and corrupted with Gaussian
noise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion_io import read_motion, write_motion
from .ndmath import Rng

N_JOINTS = 16
FEATURE_DIM = N_JOINTS * 3
FPS = 20

JOINTS = (
    "root", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_hand",
    "r_shoulder", "r_elbow", "r_hand",
    "l_hip", "l_knee", "l_foot",
    "r_hip", "r_knee", "r_foot",
)
J = {name: i for i, name in enumerate(JOINTS)}

# root-relative rest pose (x forward, y up, z left)
REST_POSE = np.array([
    [0.0, 0.9, 0.0],
    [0.0, 0.25, 0.0], [0.0, 0.55, 0.0], [0.0, 0.7, 0.0],
    [0.0, 0.5, 0.2], [0.0, 0.25, 0.25], [0.0, 0.0, 0.25],
    [0.0, 0.5, -0.2], [0.0, 0.25, -0.25], [0.0, 0.0, -0.25],
    [0.0, -0.05, 0.1], [0.0, -0.45, 0.1], [0.0, -0.85, 0.1],
    [0.0, -0.05, -0.1], [0.0, -0.45, -0.1], [0.0, -0.85, -0.1],
])

ROOT_HEIGHT = 0.9


@dataclass(frozen=True)
class MotionClass:
    name: str
    verb: str
    frequency: float  # Hz
    amplitude: float
    speed: float  # root displacement per frame
    templates: tuple[str, ...]


DEFAULT_CLASSES = (
    MotionClass("walk", "walk", 1.0, 0.3, 0.06, ("a person walks forward", "someone walks straight ahead", "a man is walking forward")),
    MotionClass("run", "run", 1.8, 0.45, 0.15, ("a person runs forward", "someone jogs quickly ahead", "a man is running fast")),
    MotionClass("jump", "jump", 0.8, 0.3, 0.0, ("a person jumps in place", "someone hops up and down", "a man jumps repeatedly")),
    MotionClass("wave", "wave", 1.5, 0.2, 0.0, ("a person waves with the right hand", "someone waves hello", "a man raises his arm and waves")),
    MotionClass("turn-left", "turn", 0.8, 0.1, 0.05, ("a person turns to the left", "someone walks in a circle to the left", "a man turns left")),
    MotionClass("turn-right", "turn", 0.8, 0.1, 0.05, ("a person turns to the right", "someone walks in a circle to the right", "a man turns right")),
    MotionClass("crouch", "crouch", 0.5, 0.35, 0.0, ("a person crouches down and stands up", "someone squats low", "a man bends his knees and crouches")),
    MotionClass("kick", "kick", 0.7, 0.6, 0.0, ("a person kicks with the right leg", "someone kicks forward", "a man performs a front kick")),
)
CLASS_INDEX = {c.name: i for i, c in enumerate(DEFAULT_CLASSES)}


@dataclass
class CorpusManifest:
    n_samples: int = 2000
    frames_min: int = 32
    frames_max: int = 64
    noise: float = 0.002
    fps: int = FPS
    split: tuple[float, float, float] = (0.8, 0.15, 0.05)
    seed: int = 0
    classes: tuple[str, ...] = field(default_factory=lambda: tuple(c.name for c in DEFAULT_CLASSES))

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.split}")
        if not 4 <= self.frames_min <= self.frames_max:
            raise ValueError("need 4 <= frames_min <= frames_max")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        unknown = [c for c in self.classes if c not in CLASS_INDEX]
        if unknown:
            raise ValueError(f"unknown motion classes: {unknown}")


def class_by_name(name: str) -> MotionClass:
    try:
        return DEFAULT_CLASSES[CLASS_INDEX[name]]
    except KeyError:
        raise ValueError(f"unknown motion class {name!r}") from None


def synth_motion(cls: MotionClass | str, length: int, noise: float, rng: Rng, fps: int = FPS, jitter: bool = True) -> np.ndarray:
    """Render ``length`` frames of ``cls`` as a (length, 48) float32 array."""
    if isinstance(cls, str):
        cls = class_by_name(cls)
    if length < 1:
        raise ValueError("length must be positive")
    phase = rng.uniform(0, 2 * math.pi)
    if jitter:
        fscale, ascale, vscale = rng.uniform(0.9, 1.1, size=3)
    else:
        fscale = ascale = vscale = 1.0
    t = np.arange(length) / fps
    theta = 2 * math.pi * cls.frequency * fscale * t + phase
    a = cls.amplitude * ascale
    v = cls.speed * vscale
    s, c = np.sin(theta), np.cos(theta)
    pose = np.broadcast_to(REST_POSE, (length, N_JOINTS, 3)).copy()
    vel = np.zeros((length, 2))  # x, z root velocity
    height = np.full(length, ROOT_HEIGHT)

    def off(joint, axis, values):
        pose[:, J[joint], axis] += values

    name = cls.name
    if name in ("walk", "run"):
        lean = 0.0 if name == "walk" else 0.12
        for j in ("spine", "neck", "head"):
            off(j, 0, lean * (1 + J[j] / 3))
        off("l_knee", 0, 0.6 * a * s)
        off("l_foot", 0, a * s)
        off("r_knee", 0, -0.6 * a * s)
        off("r_foot", 0, -a * s)
        off("l_foot", 1, 0.5 * a * np.maximum(0, c))
        off("r_foot", 1, 0.5 * a * np.maximum(0, -c))
        off("l_hand", 0, -0.6 * a * s)
        off("r_hand", 0, 0.6 * a * s)
        off("l_elbow", 0, -0.3 * a * s)
        off("r_elbow", 0, 0.3 * a * s)
        vel[:, 0] = v
        height += 0.1 * a * np.cos(2 * theta)
    elif name == "jump":
        lift = np.maximum(0, s) ** 2
        squat = np.maximum(0, -s)
        height += 1.0 * a * lift - 0.4 * a * squat
        for j in ("l_knee", "r_knee"):
            off(j, 0, 0.6 * a * squat)
        for j in ("l_hand", "r_hand"):
            off(j, 1, 1.2 * a * lift)
        for j in ("l_elbow", "r_elbow"):
            off(j, 1, 0.6 * a * lift)
    elif name == "wave":
        off("r_elbow", 1, 0.35)
        off("r_elbow", 2, -0.1)
        off("r_hand", 1, 0.8)
        off("r_hand", 2, 2.0 * a * s)
        off("r_hand", 0, 0.5 * a * c)
    elif name in ("turn-left", "turn-right"):
        sign = 1.0 if name == "turn-left" else -1.0
        omega = sign * 1.2  # rad / s
        heading = omega * t + (phase - math.pi)
        vel[:, 0] = v * np.cos(heading)
        vel[:, 1] = v * np.sin(heading)
        twist = sign * 0.15
        off("l_shoulder", 0, -twist)
        off("r_shoulder", 0, twist)
        off("l_hand", 0, -twist)
        off("r_hand", 0, twist)
        off("l_foot", 0, 0.5 * a * s)
        off("r_foot", 0, -0.5 * a * s)
        off("l_foot", 2, sign * 0.5 * a * np.maximum(0, c))
        off("r_foot", 2, sign * 0.5 * a * np.maximum(0, -c))
    elif name == "crouch":
        depth = a * (0.5 - 0.5 * c)
        height -= depth
        for j in ("l_knee", "r_knee"):
            off(j, 0, 0.9 * depth)
        for j in ("l_foot", "r_foot"):
            off(j, 1, depth)
        for j in ("l_hip", "r_hip"):
            off(j, 0, -0.3 * depth)
        for j in ("l_hand", "r_hand"):
            off(j, 0, 0.6 * depth)
    elif name == "kick":
        pulse = np.maximum(0, s) ** 3
        off("r_foot", 0, a * pulse)
        off("r_foot", 1, 0.6 * a * pulse)
        off("r_knee", 0, 0.5 * a * pulse)
        off("r_knee", 1, 0.3 * a * pulse)
        off("l_hand", 2, 0.3 * a * pulse)
        off("r_hand", 2, -0.3 * a * pulse)
    else:  # pragma: no cover - guarded by class_by_name
        raise ValueError(name)

    pose[:, 0, 0] = vel[:, 0]
    pose[:, 0, 1] = height
    pose[:, 0, 2] = vel[:, 1]
    frames = pose.reshape(length, FEATURE_DIM)
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return frames.astype(np.float32)


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_test = int(round(n * ratios[1]))
    return n_train, n_test, n - n_train - n_test


@dataclass
class Corpus:
    """An in-memory corpus: motions, label ids, captions, and split ids."""

    motions: list[np.ndarray]
    labels: np.ndarray
    captions: list[str]
    splits: dict[str, np.ndarray]
    class_names: tuple[str, ...]
    manifest: CorpusManifest

    def subset(self, split: str) -> tuple[list[np.ndarray], np.ndarray]:
        ids = self.splits[split]
        return [self.motions[i] for i in ids], self.labels[ids]


def generate_corpus(manifest: CorpusManifest) -> Corpus:
    manifest.validate()
    root = Rng(manifest.seed).stream("corpus")
    classes = manifest.classes
    plan = root.stream("plan")
    labels = np.arange(manifest.n_samples) % len(classes)
    labels = labels[plan.permutation(manifest.n_samples)]
    lengths = 4 * plan.integers(manifest.frames_min // 4 + (manifest.frames_min % 4 > 0), manifest.frames_max // 4 + 1, size=manifest.n_samples)
    motions, captions = [], []
    for i in range(manifest.n_samples):
        cls = class_by_name(classes[labels[i]])
        srng = root.stream("sample", i)
        motions.append(synth_motion(cls, int(lengths[i]), manifest.noise, srng, fps=manifest.fps))
        captions.append(cls.templates[int(srng.integers(0, len(cls.templates)))])
    order = root.stream("split").permutation(manifest.n_samples)
    n_train, n_test, _ = split_sizes(manifest.n_samples, manifest.split)
    splits = {
        "train": np.sort(order[:n_train]),
        "test": np.sort(order[n_train:n_train + n_test]),
        "val": np.sort(order[n_train + n_test:]),
    }
    return Corpus(motions, labels.astype(np.int64), captions, splits, tuple(classes), manifest)


# -- on-disk layout ------------------------------------------------------

def manifest_text(manifest: CorpusManifest) -> str:
    lines = [
        f"corpus.n_samples = {manifest.n_samples}",
        f"corpus.frames_min = {manifest.frames_min}",
        f"corpus.frames_max = {manifest.frames_max}",
        f"corpus.noise = {manifest.noise!r}",
        f"corpus.fps = {manifest.fps}",
        f"corpus.split = {', '.join(repr(r) for r in manifest.split)}",
        f"corpus.seed = {manifest.seed}",
        f"corpus.classes = {', '.join(manifest.classes)}",
    ]
    return "\n".join(lines) + "\n"


def build_corpus(manifest: CorpusManifest, out_dir: str | os.PathLike) -> Corpus:
    """Generate the corpus and write it under ``out_dir``.

    Layout: ``manifest.cfg``, ``labels.tsv``, ``captions.tsv``,
    ``motions/<id>.motion`` and ``splits/{train,test,val}.txt``.
    """
    corpus = generate_corpus(manifest)
    out = Path(out_dir)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    (out / "manifest.cfg").write_text(manifest_text(manifest))
    with open(out / "labels.tsv", "w") as fh:
        for lid, name in enumerate(corpus.class_names):
            fh.write(f"{lid}\t{name}\t{' | '.join(class_by_name(name).templates)}\n")
    with open(out / "captions.tsv", "w") as fh:
        for i, (lid, cap) in enumerate(zip(corpus.labels, corpus.captions)):
            fh.write(f"{i:06d}\t{lid}\t{cap}\n")
    for i, m in enumerate(corpus.motions):
        write_motion(out / "motions" / f"{i:06d}.motion", m, fps=manifest.fps)
    for name, ids in corpus.splits.items():
        (out / "splits" / f"{name}.txt").write_text("".join(f"{i:06d}\n" for i in ids))
    return corpus


def load_corpus(corpus_dir: str | os.PathLike) -> Corpus:
    from .toolkit.config import parse_flat

    root = Path(corpus_dir)
    values = parse_flat((root / "manifest.cfg").read_text())
    manifest = CorpusManifest(
        n_samples=int(values["corpus.n_samples"]),
        frames_min=int(values["corpus.frames_min"]),
        frames_max=int(values["corpus.frames_max"]),
        noise=float(values["corpus.noise"]),
        fps=int(values["corpus.fps"]),
        split=tuple(float(x) for x in values["corpus.split"]),
        seed=int(values["corpus.seed"]),
        classes=tuple(values["corpus.classes"]),
    )
    class_names = []
    for line in (root / "labels.tsv").read_text().splitlines():
        lid, name, _ = line.split("\t")
        assert int(lid) == len(class_names)
        class_names.append(name)
    labels, captions = [], []
    for line in (root / "captions.tsv").read_text().splitlines():
        _, lid, cap = line.split("\t")
        labels.append(int(lid))
        captions.append(cap)
    motions = [read_motion(root / "motions" / f"{i:06d}.motion")[0] for i in range(len(labels))]
    splits = {
        name: np.array([int(x) for x in (root / "splits" / f"{name}.txt").read_text().split()], dtype=np.int64)
        for name in ("train", "test", "val")
    }
    return Corpus(motions, np.array(labels, dtype=np.int64), captions, splits, tuple(class_names), manifest)


# -- oracle classifier ---------------------------------------------------

class OracleError(RuntimeError):
    pass


@dataclass
class OracleParams:
    weights: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    n_classes: int


ORACLE_WINDOW = 32
ORACLE_MIN_ACCURACY = 0.95


def _oracle_logits(x: np.ndarray, params: OracleParams):
    from . import ndmath as nd

    w = params.weights
    h = nd.Tensor(((x - params.feature_mean) / params.feature_std).astype(np.float32))
    h = nd.transpose(h, (0, 2, 1))
    h = nd.relu(nd.conv1d(h, w["c1.w"], w["c1.b"], pad=2))
    h = nd.relu(nd.conv1d(h, w["c2.w"], w["c2.b"], stride=2, pad=2))
    h = nd.mean(h, axis=2)
    return nd.linear(h, w["fc.w"], w["fc.b"])


def oracle_classify(motions, params: OracleParams) -> np.ndarray:
    """Predicted label id per motion (any length >= 4 frames)."""
    out = []
    for m in motions:
        out.append(int(np.argmax(_oracle_logits(np.asarray(m, np.float32)[None], params).data[0])))
    return np.asarray(out, dtype=np.int64)


def oracle_accuracy(motions, labels, params: OracleParams) -> float:
    return float(np.mean(oracle_classify(motions, params) == np.asarray(labels)))


def train_oracle(motions, labels, n_classes: int, rng: Rng, width: int = 32, steps: int = 400,
                 batch_size: int = 64, lr: float = 3e-3) -> OracleParams:
    """Small conv classifier on random fixed-length crops, mean-pooled over time."""
    from . import ndmath as nd

    allf = np.concatenate(motions, axis=0)
    mean = allf.mean(0)
    std = np.maximum(allf.std(0), 1e-3)
    d = allf.shape[1]
    init = rng.stream("init")

    def conv(name, c_out, c_in, k):
        scale = math.sqrt(2.0 / (c_in * k))
        return {f"{name}.w": nd.parameter(init.stream(name).normal(0.0, scale, size=(c_out, c_in, k)), f"{name}.w"),
                f"{name}.b": nd.parameter(np.zeros(c_out), f"{name}.b")}

    w = {**conv("c1", width, d, 5), **conv("c2", width, width, 5)}
    w["fc.w"] = nd.parameter(init.stream("fc").normal(0.0, math.sqrt(1.0 / width), size=(width, n_classes)), "fc.w")
    w["fc.b"] = nd.parameter(np.zeros(n_classes), "fc.b")
    params = OracleParams(w, mean.astype(np.float32), std.astype(np.float32), n_classes)
    labels = np.asarray(labels)
    names = list(w)
    state = nd.AdamState()
    brng = rng.stream("batches")
    for step in range(1, steps + 1):
        ids = brng.integers(0, len(motions), size=batch_size)
        batch = np.empty((batch_size, ORACLE_WINDOW, d), np.float32)
        for b, i in enumerate(ids):
            m = motions[i]
            if len(m) <= ORACLE_WINDOW:
                m = np.concatenate([m, np.repeat(m[-1:], ORACLE_WINDOW - len(m), 0)])
            s = int(brng.integers(0, len(m) - ORACLE_WINDOW + 1))
            batch[b] = m[s:s + ORACLE_WINDOW]
        with nd.Tape() as tape:
            loss = nd.cross_entropy(_oracle_logits(batch, params), labels[ids])
        grads = tape.gradient(loss, [w[k] for k in names])
        nd.adam_step(w, dict(zip(names, grads)), state, lr)
    return params


def oracle_classifier(corpus: Corpus, rng: Rng, ocfg=None, check: bool = True) -> tuple[OracleParams, float]:
    """Train on the train split; returns params and held-out (test) accuracy.

    Raises :class:`OracleError` when held-out accuracy falls below 95%.
    """
    kw = {} if ocfg is None else dict(width=ocfg.width, steps=ocfg.steps, batch_size=ocfg.batch_size, lr=ocfg.lr)
    tr, ytr = corpus.subset("train")
    te, yte = corpus.subset("test")
    params = train_oracle(tr, ytr, len(corpus.class_names), rng, **kw)
    acc = oracle_accuracy(te, yte, params)
    if check and acc < ORACLE_MIN_ACCURACY:
        raise OracleError(f"oracle held-out accuracy {acc:.3f} below {ORACLE_MIN_ACCURACY}")
    return params, acc
