"""RandAugment-style input noise for student training.

A plan is sampled once per video and applied identically to every frame and
all nine channels. Magnitude maps (m is an integer in [0, 9], s = +/-1):

=============  ===============================================================
brightness     x + s * 0.05 * m
contrast       mu + (x - mu) * (1 + s * 0.09 * m), mu = per-frame, per-region mean
translate_x/y  shift by s * round(m / 9 * 0.1 * side) pixels, edge padding
sharpness      blend (1 - m/9) * x + (m/9) * sharpen3x3(x)
horizontal_flip  mirror columns when m > 0
=============  ===============================================================

Every op clamps to [0, 1] and is the exact identity at m = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Rng

OPS = ("brightness", "contrast", "translate_x", "translate_y", "sharpness", "horizontal_flip")
SIGNED_OPS = frozenset({"brightness", "contrast", "translate_x", "translate_y"})

# unsharp mask 2*x - mean(8 neighbours): the usual image-library sharpen kernel.
# The harsher Laplacian form (centre 5) amplifies pixel noise about 5x and
# wipes out the class signal on 8 x 8 crops.
_SHARPEN = np.array([[-2.0, -2.0, -2.0], [-2.0, 32.0, -2.0], [-2.0, -2.0, -2.0]]) / 16.0


@dataclass(frozen=True)
class NoiseSpec:
    enabled: bool = True
    augment: bool = True
    op_count_range: tuple[int, int] = (2, 4)
    magnitude_range: tuple[int, int] = (0, 9)
    ops: tuple[str, ...] = OPS
    dropout_p: float = 0.5

    @property
    def augment_active(self) -> bool:
        return self.enabled and self.augment

    @property
    def dropout_active(self) -> float:
        return self.dropout_p if self.enabled else 0.0

    def disabled(self) -> "NoiseSpec":
        return replace(self, enabled=False)


NO_NOISE = NoiseSpec(enabled=False)


@dataclass(frozen=True)
class AugmentPlan:
    steps: tuple[tuple[str, int], ...] = ()

    def __len__(self):
        return len(self.steps)


def sample_plan(spec: NoiseSpec, rng: Rng) -> AugmentPlan:
    """Draw n ops with replacement, one magnitude per op, a sign for signed ops."""
    lo, hi = spec.op_count_range
    n = int(rng.integers(lo, hi + 1))
    mlo, mhi = spec.magnitude_range
    steps = []
    for _ in range(n):
        op = spec.ops[int(rng.integers(0, len(spec.ops)))]
        m = int(rng.integers(mlo, mhi + 1))
        if op in SIGNED_OPS and rng.random() < 0.5:
            m = -m
        steps.append((op, m))
    return AugmentPlan(tuple(steps))


def _shift(x: np.ndarray, t: int, axis: int) -> np.ndarray:
    if t == 0:
        return x
    n = x.shape[axis]
    src = np.clip(np.arange(n) - t, 0, n - 1)
    return np.take(x, src, axis=axis)


def _sharpen(x: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="edge")
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            k = _SHARPEN[di, dj]
            if k:
                out += k * xp[..., di : di + h, dj : dj + w]
    return out


def apply_op(frames: np.ndarray, op: str, m: int) -> np.ndarray:
    """Apply one op to an ``n x 9 x S x S`` (or ``9 x S x S``) array."""
    if m == 0:
        return frames
    s = 1 if m > 0 else -1
    a = abs(m)
    if op == "brightness":
        out = frames + s * 0.05 * a
    elif op == "contrast":
        lead = frames.shape[:-3]
        grouped = frames.reshape(lead + (3, 3) + frames.shape[-2:])
        mu = grouped.mean(axis=(-3, -2, -1), keepdims=True)
        out = (mu + (grouped - mu) * (1.0 + s * 0.09 * a)).reshape(frames.shape)
    elif op in ("translate_x", "translate_y"):
        axis = -1 if op == "translate_x" else -2
        t = int(np.rint(a / 9.0 * 0.1 * frames.shape[axis]))
        out = _shift(frames, s * t, axis)
    elif op == "sharpness":
        f = a / 9.0
        out = (1.0 - f) * frames + f * _sharpen(frames)
    elif op == "horizontal_flip":
        out = frames[..., ::-1]
    else:
        raise ValueError(f"unknown augmentation op {op!r}")
    return np.clip(out, 0.0, 1.0)


def apply_plan(video, plan: AugmentPlan):
    """Apply ``plan`` to every frame of ``video``; labels are carried over untouched.

    Accepts a ``VideoSample`` or a raw frames array.
    """
    frames = video if isinstance(video, np.ndarray) else video.frames
    out = frames
    for op, m in plan.steps:
        out = apply_op(out, op, m)
    if isinstance(video, np.ndarray):
        return out
    return replace(video, frames=np.ascontiguousarray(out))
