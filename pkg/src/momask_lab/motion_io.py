"""Plain-text motion files.

First line ``#momask-motion D=<int> fps=<int>``, then one frame per row with
D whitespace-separated values. Values are written with 9 significant digits
so float32 data survives a round trip exactly.
"""

from __future__ import annotations

import os
import re

import numpy as np

_HEADER = re.compile(r"^#momask-motion D=(\d+) fps=(\d+)\s*$")


class MotionFormatError(ValueError):
    pass


def format_motion(frames: np.ndarray, fps: int = 20) -> str:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise MotionFormatError(f"motion must be (N, D), got {frames.shape}")
    rows = [" ".join(f"{x:.9g}" for x in row) for row in frames.tolist()]
    return f"#momask-motion D={frames.shape[1]} fps={fps}\n" + "\n".join(rows) + "\n"


def write_motion(path: str | os.PathLike, frames: np.ndarray, fps: int = 20) -> None:
    with open(path, "w") as fh:
        fh.write(format_motion(frames, fps))


def parse_motion(text: str) -> tuple[np.ndarray, int]:
    lines = text.splitlines()
    if not lines:
        raise MotionFormatError("empty motion file")
    m = _HEADER.match(lines[0])
    if not m:
        raise MotionFormatError(f"bad motion header: {lines[0]!r}")
    dim, fps = int(m.group(1)), int(m.group(2))
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    for i, r in enumerate(rows):
        if len(r) != dim:
            raise MotionFormatError(f"frame {i} has {len(r)} values, header says D={dim}")
    frames = np.array(rows, dtype=np.float32).reshape(len(rows), dim)
    return frames, fps


def read_motion(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path) as fh:
        return parse_motion(fh.read())
