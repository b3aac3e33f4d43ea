"""Small residual network with 3-way grouped convolution.

Input frames carry nine channels: face RGB, eyes RGB, mouth RGB. Every
convolution uses ``groups=3`` so each region is processed by its own filters
from input to the last block, and each block's output is exposed as a tap.

Normalization is a learnable per-channel scale and shift (no running stats).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Rng, Tensor, grouped_conv2d, parameter

REGIONS = ("face", "eyes", "mouth")
GROUPS = 3


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    channels_per_block: tuple[int, ...] = (24, 48, 96, 192)
    input_side: int = 32
    groups: int = GROUPS

    def __post_init__(self):
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        if self.groups != GROUPS:
            raise ConfigError(f"backbone groups is fixed at {GROUPS}")
        if len(self.channels_per_block) != self.num_blocks:
            raise ConfigError(
                f"channels_per_block has {len(self.channels_per_block)} entries for {self.num_blocks} blocks"
            )
        bad = [c for c in self.channels_per_block if c < self.groups or c % self.groups]
        if bad:
            raise ConfigError(f"channel counts {bad} not divisible by groups={self.groups}")
        if self.input_side < 2 ** (self.num_blocks - 1):
            raise ConfigError(f"input_side {self.input_side} too small for {self.num_blocks} stride-2 stages")

    def region_dims(self) -> list[int]:
        """Per-region descriptor length D for each block."""
        return [c // self.groups for c in self.channels_per_block]

    def tap_sides(self) -> list[int]:
        sides, s = [], self.input_side
        for b in range(self.num_blocks):
            if b > 0:
                s = (s + 2 - 3) // 2 + 1
            sides.append(s)
        return sides

    def covers(self, other: "BackboneConfig") -> bool:
        """True when this config is at least as large as ``other`` block-for-block."""
        if self.num_blocks < other.num_blocks:
            return False
        return all(a >= b for a, b in zip(self.channels_per_block, other.channels_per_block))


DESK_CONFIG = BackboneConfig(num_blocks=2, channels_per_block=(12, 24), input_side=8)


@dataclass
class ResidualFeatureMap:
    """Output of one residual block, ``N x C x H x W`` with C = 3 * D."""

    block_index: int
    tensor: Tensor
    groups: int = GROUPS

    @property
    def depth(self) -> int:
        return self.tensor.shape[1] // self.groups

    def region(self, r: int) -> Tensor:
        d = self.depth
        return self.tensor[:, r * d : (r + 1) * d]


def init_params(config: BackboneConfig, rng: Rng, prefix: str = "backbone") -> dict[str, Tensor]:
    """He-style fan-in initialization; scales start at 1, shifts at 0.

    One group's filters are drawn and copied to all groups, so the three
    regions start with statistically identical feature scales. Unequal
    starting scales let the shared channel gate lock one region out early.
    """
    params: dict[str, Tensor] = {}
    g = config.groups
    c_in = 3 * g
    for b, c_out in enumerate(config.channels_per_block):
        stride = 1 if b == 0 else 2
        p = f"{prefix}.block{b}"

        def conv(name, cin, cout, k):
            fan_in = (cin // g) * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout // g, cin // g, k, k))
            params[f"{p}.{name}"] = parameter(np.concatenate([w] * g, axis=0))

        conv("conv1", c_in, c_out, 3)
        params[f"{p}.scale1"] = parameter(np.ones((c_out, 1, 1)))
        params[f"{p}.shift1"] = parameter(np.zeros((c_out, 1, 1)))
        conv("conv2", c_out, c_out, 3)
        params[f"{p}.scale2"] = parameter(np.ones((c_out, 1, 1)))
        params[f"{p}.shift2"] = parameter(np.zeros((c_out, 1, 1)))
        if c_in != c_out or stride != 1:
            conv("shortcut", c_in, c_out, 1)
        c_in = c_out
    return params


def residual_block(x: Tensor, params: dict[str, Tensor], prefix: str, stride: int, groups: int = GROUPS) -> Tensor:
    """relu(shortcut(x) + affine(conv(relu(affine(conv(x))))))."""
    h = grouped_conv2d(x, params[f"{prefix}.conv1"], groups, stride=stride, padding=1)
    h = (h * params[f"{prefix}.scale1"] + params[f"{prefix}.shift1"]).relu()
    h = grouped_conv2d(h, params[f"{prefix}.conv2"], groups, stride=1, padding=1)
    h = h * params[f"{prefix}.scale2"] + params[f"{prefix}.shift2"]
    key = f"{prefix}.shortcut"
    if key in params:
        skip = grouped_conv2d(x, params[key], groups, stride=stride, padding=0)
    else:
        skip = x
    if skip.shape != h.shape:
        raise ConfigError(f"residual branches disagree: shortcut {skip.shape} vs conv path {h.shape}")
    return (skip + h).relu()


def forward_frames(x: Tensor, params: dict[str, Tensor], config: BackboneConfig, prefix: str = "backbone"):
    """Run ``N x 9 x S x S`` frames through every block; return one tap per block."""
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3 * config.groups:
        raise InputError(f"expected frames of shape N x 9 x S x S, got {x.shape}")
    taps = []
    h = x
    for b in range(config.num_blocks):
        h = residual_block(h, params, f"{prefix}.block{b}", 1 if b == 0 else 2, config.groups)
        taps.append(ResidualFeatureMap(b, h, config.groups))
    return taps


def forward_frame(frame: Tensor, params: dict[str, Tensor], config: BackboneConfig, prefix: str = "backbone"):
    """Single ``9 x S x S`` frame; taps keep a leading batch axis of 1."""
    if frame.ndim != 3:
        raise InputError(f"expected a 9 x S x S frame, got {frame.shape}")
    return forward_frames(frame, params, config, prefix)


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
