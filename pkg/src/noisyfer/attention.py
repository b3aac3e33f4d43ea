"""Spatial, channel and frame attention.

Shapes use a leading ``...`` for any batch axes (frames, regions).

* spatial: ``L`` is ``... x R x D`` (R spatial positions, D filters);
  ``M = softmax(Ws2 tanh(Ws1 L^T))`` is ``... x h x R`` and the hop outputs
  ``M L`` are merged to length D (mean) or h*D (concat).
* channel: three region vectors fused by sigmoid-gated weighted average.
* frame: per-frame vectors of one video fused the same way.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Tensor, as_tensor, frobenius_norm, matmul, segment_sum, softmax_rows, sorted_sum, stack

HOP_MODES = ("mean", "concat")


def spatial_attention(L: Tensor, w_s1: Tensor, w_s2: Tensor, hop_mode: str = "mean"):
    """Multi-hop self-attention pooling over spatial positions.

    Returns ``(v, penalty, M)`` where ``penalty = ||M M^T - I||_F`` per instance.
    """
    L = as_tensor(L)
    if L.ndim < 2:
        raise InputError(f"spatial_attention expects ... x R x D, got {L.shape}")
    if w_s1.shape[1] != L.shape[-1] or w_s2.shape[1] != w_s1.shape[0]:
        raise InputError(f"attention weights {w_s1.shape}, {w_s2.shape} do not fit L of shape {L.shape}")
    hidden = matmul(w_s1, L.swap_last()).tanh()  # ... x U x R
    M = softmax_rows(matmul(w_s2, hidden))  # ... x h x R
    hops = matmul(M, L)  # ... x h x D
    penalty = hop_penalty(M)
    if hop_mode == "mean":
        v = hops.mean(axis=-2)
    elif hop_mode == "concat":
        v = hops.reshape(hops.shape[:-2] + (hops.shape[-2] * hops.shape[-1],))
    else:
        raise ConfigError(f"hop_mode must be one of {HOP_MODES}, got {hop_mode!r}")
    return v, penalty, M


def hop_penalty(M: Tensor) -> Tensor:
    """``||M M^T - I_h||_F`` over the last two axes."""
    M = as_tensor(M)
    h = M.shape[-2]
    gram = matmul(M, M.swap_last())
    return frobenius_norm(gram - np.eye(h))


def _gate(x: Tensor, W: Tensor, w: Tensor) -> Tensor:
    """sigmoid(w^T relu(W^T x)) for each row of x; returns ``... x 1``.

    Each row goes through its own 1 x l product: a single GEMM over all rows
    can round a row differently depending on where it sits in the block.
    """
    rows = x.reshape(x.shape + (1,)).swap_last()  # ... x 1 x l
    hidden = matmul(rows, W).relu()  # ... x 1 x h
    z = matmul(hidden, w.reshape(w.shape[0], 1))  # ... x 1 x 1
    return z.reshape(x.shape[:-1] + (1,)).sigmoid()


def channel_attention(regions, W: Tensor, w: Tensor):
    """Fuse region vectors. ``regions`` is ``... x K x l`` or a sequence of K vectors.

    Returns ``(fused [... x l], alpha [... x K])``.
    """
    if isinstance(regions, Sequence) and not isinstance(regions, Tensor):
        regions = stack([as_tensor(r) for r in regions], axis=-2)
    if regions.shape[-1] != W.shape[0]:
        raise InputError(f"region vectors of length {regions.shape[-1]} do not match W {W.shape}")
    alpha = _gate(regions, W, w)  # ... x K x 1
    fused = (alpha * regions).sum(axis=-2) / alpha.sum(axis=-2)
    return fused, alpha.reshape(alpha.shape[:-1])


def frame_attention(frames, W: Tensor, w: Tensor):
    """Fuse the n frame vectors of one video (``n x l``) into one vector.

    Returns ``(fused [l], alpha_hat [n])``.
    """
    if isinstance(frames, Sequence) and not isinstance(frames, Tensor):
        if len(frames) == 0:
            raise InputError("frame_attention needs at least one frame")
        frames = stack([as_tensor(f) for f in frames], axis=0)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputError(f"frame_attention expects n x l with n >= 1, got {frames.shape}")
    fused, alpha = frame_attention_segments(frames, [0, frames.shape[0]], W, w)
    return fused[0], alpha


def frame_attention_segments(frames: Tensor, bounds, W: Tensor, w: Tensor):
    """Frame attention for several videos stacked along axis 0.

    ``bounds`` delimit each video's rows. Sums run over sorted terms, so any
    reordering of a video's frames gives bit-identical output.
    """
    if len(bounds) < 2 or any(hi <= lo for lo, hi in zip(bounds[:-1], bounds[1:])):
        raise InputError("every video needs at least one frame")
    alpha = _gate(frames, W, w)  # N x 1
    fused = segment_sum(alpha * frames, bounds) / segment_sum(alpha, bounds)
    return fused, alpha.reshape(alpha.shape[0])


def mean_frames(frames: Tensor) -> Tensor:
    """Unweighted, order-independent mean over the frame axis."""
    return sorted_sum(frames, axis=0) * (1.0 / frames.shape[0])
