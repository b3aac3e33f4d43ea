"""Video classifier: grouped residual backbone + spatial/channel/frame attention + linear head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention
from .augment import NO_NOISE, NoiseSpec
from .backbone import DESK_CONFIG, BackboneConfig, forward_frames, init_params
from .errors import ConfigError, InputError, NumericError
from .tensor import Rng, Tensor, concat, dropout, matmul, parameter, segment_sum

NUM_CLASSES = 7


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hops: int = 2
    attn_hidden: int = 32
    channel_hidden: int = 64
    frame_hidden: int = 64
    num_classes: int = NUM_CLASSES
    hop_mode: str = "mean"
    # component toggles, used by the ablation ladder
    all_blocks: bool = True
    spatial_attention: bool = True
    regions: tuple[int, ...] = (0, 1, 2)
    channel_attention: bool = True
    frame_attention: bool = True
    # fixed input standardization (x - center) / scale before the backbone
    input_center: float = 0.5
    input_scale: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(int(r) for r in self.regions))
        if self.hops < 1 or self.attn_hidden < 1 or self.channel_hidden < 1 or self.frame_hidden < 1:
            raise ConfigError("hops, attn_hidden, channel_hidden and frame_hidden must all be >= 1")
        if self.hop_mode not in attention.HOP_MODES:
            raise ConfigError(f"hop_mode must be one of {attention.HOP_MODES}")
        if not self.regions or any(r not in (0, 1, 2) for r in self.regions) or len(set(self.regions)) != len(self.regions):
            raise ConfigError(f"regions must be a non-empty subset of (0, 1, 2), got {self.regions}")
        if not self.input_scale > 0:
            raise ConfigError("input_scale must be positive")

    def blocks_used(self) -> list[int]:
        n = self.backbone.num_blocks
        return list(range(n)) if self.all_blocks else [n - 1]

    def feature_length(self) -> int:
        dims = self.backbone.region_dims()
        per_hop = self.hops if (self.spatial_attention and self.hop_mode == "concat") else 1
        return per_hop * sum(dims[b] for b in self.blocks_used())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["channels_per_block"] = list(self.backbone.channels_per_block)
        d["regions"] = list(self.regions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = BackboneConfig(**d.pop("backbone"))
        return cls(backbone=bb, **d)


DESK_MODEL = ModelConfig(backbone=DESK_CONFIG)


def init_model_params(config: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    params = init_params(config.backbone, rng)
    dims = config.backbone.region_dims()
    U, h = config.attn_hidden, config.hops
    for b in range(config.backbone.num_blocks):
        D = dims[b]
        params[f"spatial.block{b}.Ws1"] = parameter(rng.normal(0.0, 1.0 / np.sqrt(D), (U, D)))
        params[f"spatial.block{b}.Ws2"] = parameter(rng.normal(0.0, 1.0 / np.sqrt(U), (h, U)))
    l = config.feature_length()
    r, rh = config.channel_hidden, config.frame_hidden
    params["channel.W"] = parameter(rng.normal(0.0, np.sqrt(2.0 / l), (l, r)))
    # gate output vectors start at zero: every weight is 0.5, i.e. plain mean
    # pooling, and no region or frame begins in a saturated sigmoid
    params["channel.w"] = parameter(np.zeros(r))
    params["frame.W"] = parameter(rng.normal(0.0, np.sqrt(2.0 / l), (l, rh)))
    params["frame.w"] = parameter(np.zeros(rh))
    params["head.W"] = parameter(rng.normal(0.0, 1.0 / np.sqrt(l), (l, config.num_classes)))
    params["head.b"] = parameter(np.zeros(config.num_classes))
    return params


@dataclass
class ForwardResult:
    logits: Tensor  # B x K
    penalty: Tensor  # B, mean hop penalty per video
    channel_weights: list[np.ndarray]  # per video: n x regions
    frame_weights: list[np.ndarray]  # per video: n

    def diagnostics(self, video_ids=None) -> list[dict]:
        ids = video_ids or list(range(len(self.frame_weights)))
        return [
            {
                "video_id": vid,
                "channel_alpha": self.channel_weights[i].tolist(),
                "frame_alpha": self.frame_weights[i].tolist(),
                "penalty": float(self.penalty.data[i]),
            }
            for i, vid in enumerate(ids)
        ]


class Model:
    """Parameters plus configuration; ``forward`` maps a list of videos to logits."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_model_params(config, Rng(seed))

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in sorted(self.params)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise InputError(f"checkpoint parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise InputError(f"checkpoint {k} has shape {v.shape}, model expects {self.params[k].shape}")
            self.params[k] = parameter(v)

    def copy(self) -> "Model":
        return Model(self.config, {k: parameter(v.data) for k, v in self.params.items()})

    def forward(self, videos, training: bool = False, noise: NoiseSpec = NO_NOISE, rng: Rng | None = None) -> ForwardResult:
        """``videos`` is a list of ``n_i x 9 x S x S`` arrays (or VideoSample objects)."""
        cfg = self.config
        P = self.params
        arrays = [np.asarray(getattr(v, "frames", v), dtype=np.float64) for v in videos]
        if not arrays:
            raise InputError("forward needs at least one video")
        side = cfg.backbone.input_side
        for a in arrays:
            if a.ndim != 4 or a.shape[0] < 1 or a.shape[1:] != (9, side, side):
                raise InputError(f"video frames must be n x 9 x {side} x {side} with n >= 1, got {a.shape}")
        counts = [a.shape[0] for a in arrays]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        x = Tensor((np.concatenate(arrays, axis=0) - cfg.input_center) / cfg.input_scale)
        taps = forward_frames(x, P, cfg.backbone)
        n = x.shape[0]
        k = len(cfg.regions)
        region_idx = list(cfg.regions)

        vecs, pens = [], []
        for b in cfg.blocks_used():
            t = taps[b].tensor
            D = t.shape[1] // 3
            R = t.shape[2] * t.shape[3]
            L = t.reshape(n, 3, D, R).swap_last()  # N x 3 x R x D
            if k < 3:
                L = L[:, region_idx]
            if cfg.spatial_attention:
                v, pen, _ = attention.spatial_attention(L, P[f"spatial.block{b}.Ws1"], P[f"spatial.block{b}.Ws2"], cfg.hop_mode)
                pens.append(pen)
            else:
                v = L.mean(axis=-2)
            vecs.append(v)
        f = concat(vecs, axis=-1) if len(vecs) > 1 else vecs[0]  # N x k x l

        if cfg.channel_attention and k > 1:
            fused, alpha = attention.channel_attention(f, P["channel.W"], P["channel.w"])
            alpha_np = alpha.data
        else:
            fused = f.mean(axis=-2)
            alpha_np = np.full((n, k), 1.0 / k)

        bounds_list = [int(b) for b in bounds]
        if cfg.frame_attention:
            fv, ahat = attention.frame_attention_segments(fused, bounds_list, P["frame.W"], P["frame.w"])
            ahat_np = ahat.data
        else:
            fv = segment_sum(fused, bounds_list) * Tensor(1.0 / np.asarray(counts, dtype=np.float64)[:, None])
            ahat_np = np.concatenate([np.full(c, 1.0 / c) for c in counts])
        frame_w = [ahat_np[bounds_list[i] : bounds_list[i + 1]] for i in range(len(arrays))]
        if pens:
            pen_all = concat(pens, axis=-1) if len(pens) > 1 else pens[0]  # N x (k * blocks)
            per_video = segment_sum(pen_all, bounds_list).sum(axis=-1)
            scale = 1.0 / (np.asarray(counts, dtype=np.float64) * pen_all.shape[-1])
            penalty = per_video * Tensor(scale)
        else:
            penalty = Tensor(np.zeros(len(arrays)))
        fv = dropout(fv, noise.dropout_active, rng, training)
        logits = matmul(fv, P["head.W"]) + P["head.b"]
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits in forward pass")
        chan_w = [alpha_np[int(bounds[i]) : int(bounds[i + 1])] for i in range(len(arrays))]
        return ForwardResult(logits, penalty, chan_w, frame_w)

    def classify_video(self, sample, noise: NoiseSpec = NO_NOISE, training: bool = False, rng: Rng | None = None):
        """Logits (length K) and diagnostics for a single video."""
        frames = getattr(sample, "frames", sample)
        if len(frames) == 0:
            raise InputError("empty video")
        res = self.forward([frames], training=training, noise=noise, rng=rng)
        diag = {
            "channel_alpha": res.channel_weights[0],
            "frame_alpha": res.frame_weights[0],
            "penalty": float(res.penalty.data[0]),
            "penalty_tensor": res.penalty[0],
        }
        return res.logits[0], diag

    def predict_proba(self, videos, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(videos), batch_size):
            logits = self.forward(videos[i : i + batch_size]).logits.data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(out, axis=0)


def config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
