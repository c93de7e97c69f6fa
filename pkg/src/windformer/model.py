"""End-to-end forecasting model over gridded turbine scenes.

Pipeline: normalize -> bidirectional conv recurrence -> per-cell time
embedding -> pad to a window multiple -> three stages of paired attention
blocks (plain, then shifted) with 2x2 turbine merging between stages and a
channel-fusion gate closing each stage -> dense prediction head emitting one
wind speed per turbine.

Every architectural choice that a config can reach lives in ``ModelConfig``;
ablation variants swap the temporal encoder, the spatial blocks, or the
fusion branches while keeping the same outer interface.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .attention import (
    WindowAttention,
    build_key_padding_mask,
    build_shift_mask,
    combine_masks,
    cyclic_shift,
    reverse_cyclic_shift,
    window_partition,
    window_reverse,
)
from .data import FeatureStats, SceneSequence, TurbineLayout, stack_sequences
from .errors import ConfigError
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Mlp, Module, ModuleList
from .temporal import TEMPORAL_VARIANTS, TurbineEmbed, make_temporal_encoder

log = logging.getLogger(__name__)

SPATIAL_VARIANTS = ("empty", "cnn", "window", "shift-window")
FUSION_VARIANTS = ("empty", "global-only", "detail-only", "full")


@dataclass
class ModelConfig:
    """Every architectural hyperparameter, explicit and serializable."""

    in_channels: int = 6
    T: int = 4
    hidden_channels: int = 32
    gru_kernel: int = 3
    embed_dim: int = 48
    embed_layernorm: bool = True
    n_stages: int = 3
    depth: int = 2
    heads: tuple = (3, 6, 12)
    window_size: int = 4
    mlp_ratio: int = 4
    rel_pos_bias: bool = True
    fusion_reduction: int = 4
    temporal_variant: str = "bi-convgru"
    spatial_variant: str = "shift-window"
    fusion_variant: str = "full"

    def __post_init__(self):
        self.heads = tuple(self.heads)
        self.validate()

    def validate(self):
        if self.T < 1:
            raise ConfigError("sequence length T must be >= 1")
        if self.depth != 2:
            raise ConfigError(
                "stage depth must be 2: one plain block then one shifted block"
            )
        if self.n_stages < 1:
            raise ConfigError("n_stages must be >= 1")
        if len(self.heads) != self.n_stages:
            raise ConfigError(
                f"heads has {len(self.heads)} entries for {self.n_stages} stages"
            )
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.gru_kernel % 2 == 0:
            raise ConfigError(f"gru_kernel must be odd, got {self.gru_kernel}")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be >= 1")
        for s, h in enumerate(self.heads):
            dim = self.stage_dim(s)
            if dim % h:
                raise ConfigError(
                    f"stage {s + 1}: embed dim {dim} not divisible by {h} heads"
                )
        if self.temporal_variant not in TEMPORAL_VARIANTS:
            raise ConfigError(f"unknown temporal variant {self.temporal_variant!r}")
        if self.spatial_variant not in SPATIAL_VARIANTS:
            raise ConfigError(f"unknown spatial variant {self.spatial_variant!r}")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.fusion_variant!r}")

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * (2 ** s)

    @property
    def pad_multiple(self) -> int:
        if self.spatial_variant == "empty":
            return 1
        scale = 2 ** (self.n_stages - 1)
        if self.spatial_variant == "cnn":
            return scale
        return self.window_size * scale

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["heads"] = list(self.heads)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        bad = set(doc) - known
        if bad:
            raise ConfigError(f"unknown model config keys: {sorted(bad)}")
        return cls(**doc)

    @classmethod
    def from_json_file(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Prediction:
    """Per-turbine forecast in physical units (m/s) plus horizon metadata."""

    values: np.ndarray
    horizon_minutes: int
    timestamp: int
    turbine_ids: tuple


def pad_to_window_multiple(x, multiple, pad_mask=None):
    """Zero-pad [B, H, W, C] on the bottom/right so H, W divide ``multiple``.

    Returns the padded map and a boolean [Hp, Wp] mask marking added cells;
    those cells are excluded from attention via key masking downstream.
    """
    b, h, w, c = x.shape
    hp = -(-h // multiple) * multiple
    wp = -(-w // multiple) * multiple
    if pad_mask is None:
        pad_mask = np.zeros((h, w), dtype=bool)
    if (hp, wp) == (h, w):
        return x, pad_mask
    out = T.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    full = np.ones((hp, wp), dtype=bool)
    full[:h, :w] = pad_mask
    return out, full


class ShiftWindowBlock(Module):
    """Pre-norm attention + MLP with two residual connections.

    ``x <- x + Attn(LN(x))`` using plain windows (shifted=False) or windows
    displaced by half a window (shifted=True), then ``x <- x + MLP(LN(x))``.
    """

    def __init__(self, dim, n_heads, window, shift, hw, pad_mask, mlp_ratio, rng,
                 rel_pos_bias=True):
        super().__init__()
        self.window = window
        self.shift = shift
        self.hw = hw
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, n_heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)
        h, w = hw
        shift_mask = build_shift_mask(h, w, window, shift) if shift else None
        key_mask = build_key_padding_mask(pad_mask, window, shift)
        self.mask = combine_masks(shift_mask, key_mask)

    def forward(self, x):
        b, h, w, _ = x.shape
        y = cyclic_shift(self.norm1(x), self.shift)
        wins = window_partition(y, self.window)
        wins = self.attn(wins, self.mask)
        y = reverse_cyclic_shift(window_reverse(wins, self.window, b, h, w), self.shift)
        x = T.add(x, y)
        return T.add(x, self.mlp(self.norm2(x)))


class ConvBlock(Module):
    """Spatial-ablation twin of the attention block: the attention sublayer is
    replaced by a 3x3 bottleneck conv pair of matched parameter budget."""

    def __init__(self, dim, mlp_ratio, rng):
        super().__init__()
        mid = max(dim // 4, 1)
        self.norm1 = LayerNorm(dim)
        self.conv1 = Conv2d(dim, mid, 3, rng)
        self.conv2 = Conv2d(mid, dim, 3, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, rng)

    def forward(self, x):
        y = T.transpose(self.norm1(x), (0, 3, 1, 2))
        y = self.conv2(T.relu(self.conv1(y)))
        x = T.add(x, T.transpose(y, (0, 2, 3, 1)))
        return T.add(x, self.mlp(self.norm2(x)))


class TurbineMerge(Module):
    """Aggregate each 2x2 cell neighborhood: concatenate the four feature
    vectors (4C), LayerNorm, then project 4C -> 2C."""

    def __init__(self, dim, rng):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ConfigError(f"turbine merge needs even dims, got {h}x{w}")
        parts = [
            x[:, 0::2, 0::2, :],
            x[:, 1::2, 0::2, :],
            x[:, 0::2, 1::2, :],
            x[:, 1::2, 1::2, :],
        ]
        return self.reduce(self.norm(T.concat(parts, axis=-1)))


def merge_pad_mask(pad_mask: np.ndarray) -> np.ndarray:
    # a merged cell still carries signal if any source cell was real
    return (
        pad_mask[0::2, 0::2] & pad_mask[1::2, 0::2]
        & pad_mask[0::2, 1::2] & pad_mask[1::2, 1::2]
    )


class ChannelFusion(Module):
    """Sigmoid gate combining a pointwise-conv detail branch with a pooled
    global branch; the gate multiplies the input elementwise, so output
    magnitude never exceeds input magnitude.

        detail(x) = BN(Conv(ReLU(BN(Conv(x)))))      1x1 convs, C -> C/r -> C
        global(x) = BN(Lin(ReLU(BN(Lin(pool(x))))))  broadcast over H x W
        out       = x * sigmoid(detail(x) + global(x))

    Branch ablations drop the removed branch entirely (its parameters never
    exist), leaving the gate driven by the survivor.
    """

    def __init__(self, channels, rng, reduction=4, variant="full"):
        super().__init__()
        if variant not in ("full", "global-only", "detail-only"):
            raise ConfigError(f"unknown fusion variant {variant!r}")
        self.variant = variant
        mid = channels // reduction
        if mid < 1:
            log.warning(
                "channel fusion: %d channels < reduction %d; clamping to 1",
                channels, reduction,
            )
            mid = 1
        if variant in ("full", "detail-only"):
            self.detail_conv1 = Conv2d(channels, mid, 1, rng)
            self.detail_bn1 = BatchNorm(mid)
            self.detail_conv2 = Conv2d(mid, channels, 1, rng)
            self.detail_bn2 = BatchNorm(channels)
        if variant in ("full", "global-only"):
            self.global_fc1 = Linear(channels, mid, rng)
            self.global_bn1 = BatchNorm(mid)
            self.global_fc2 = Linear(mid, channels, rng)
            self.global_bn2 = BatchNorm(channels)

    def forward(self, x):
        # x: [B, C, H, W]
        gate_logit = None
        if self.variant in ("full", "detail-only"):
            d = self.detail_bn1(self.detail_conv1(x))
            d = self.detail_bn2(self.detail_conv2(T.relu(d)))
            gate_logit = d
        if self.variant in ("full", "global-only"):
            g = self.global_bn1(self.global_fc1(T.global_avg_pool(x)))
            g = self.global_bn2(self.global_fc2(T.relu(g)))
            g = T.reshape(g, g.shape + (1, 1))
            gate_logit = g if gate_logit is None else T.add(gate_logit, g)
        return T.mul(x, T.sigmoid(gate_logit))


class Stage(Module):
    """Two blocks, then (optionally) a 2x2 merge, then channel fusion."""

    def __init__(self, dim, hw, pad_mask, n_heads, window, mlp_ratio, rng,
                 spatial_variant, shifted_pair, with_merge, fusion_variant,
                 fusion_reduction, rel_pos_bias):
        super().__init__()
        h, w = hw
        if spatial_variant == "cnn":
            blocks = [ConvBlock(dim, mlp_ratio, rng) for _ in range(2)]
        else:
            single_window = (h == window and w == window)
            shift = window // 2 if (shifted_pair and not single_window) else 0
            blocks = [
                ShiftWindowBlock(dim, n_heads, window, 0, hw, pad_mask, mlp_ratio,
                                 rng, rel_pos_bias),
                ShiftWindowBlock(dim, n_heads, window, shift, hw, pad_mask,
                                 mlp_ratio, rng, rel_pos_bias),
            ]
        self.blocks = ModuleList(blocks)
        self.out_hw = hw
        self.out_dim = dim
        self.out_pad_mask = pad_mask
        if with_merge:
            self.merge = TurbineMerge(dim, rng)
            self.out_hw = (h // 2, w // 2)
            self.out_dim = 2 * dim
            self.out_pad_mask = merge_pad_mask(pad_mask)
        else:
            self.merge = None
        if fusion_variant != "empty":
            self.fusion = ChannelFusion(self.out_dim, rng, fusion_reduction,
                                        fusion_variant)
        else:
            self.fusion = None

    def tail(self, x):
        """Merge + fusion, the part of the stage after its blocks."""
        if self.merge is not None:
            x = self.merge(x)
        if self.fusion is not None:
            x = T.transpose(self.fusion(T.transpose(x, (0, 3, 1, 2))), (0, 2, 3, 1))
        return x

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.tail(x)


class PredictionHead(Module):
    """Flatten the final feature map and project to one output per turbine."""

    def __init__(self, in_features, n_outputs, rng):
        super().__init__()
        self.proj = Linear(in_features, n_outputs, rng)

    def forward(self, x):
        return self.proj(T.reshape(x, (x.shape[0], -1)))


class Windformer(Module):
    """The full forecaster; built for one layout, owns its normalizer stats.

    ``forward_arrays`` maps normalized inputs [B, T, F, H, W] to normalized
    per-turbine outputs [B, L] and is what training differentiates through.
    ``predict`` wraps it with normalization and denormalization for use on
    raw scene sequences.
    """

    def __init__(self, config: ModelConfig, layout: TurbineLayout, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.layout = layout
        self.stats: FeatureStats | None = None

        self.encoder = make_temporal_encoder(
            config.temporal_variant, config.in_channels, config.hidden_channels,
            config.gru_kernel, rng,
        )
        self.embed = TurbineEmbed(config.T, self.encoder.out_channels,
                                  config.embed_dim, rng)
        self.embed_norm = LayerNorm(config.embed_dim) if config.embed_layernorm else None

        h, w = layout.grid_height, layout.grid_width
        multiple = config.pad_multiple
        self.pad_multiple = multiple
        hp = -(-h // multiple) * multiple
        wp = -(-w // multiple) * multiple
        pad_mask = np.zeros((hp, wp), dtype=bool)
        pad_mask[h:, :] = True
        pad_mask[:, w:] = True
        self.input_pad_mask = pad_mask

        stages = []
        dim, hw, mask = config.embed_dim, (hp, wp), pad_mask
        if config.spatial_variant != "empty":
            for s in range(config.n_stages):
                stage = Stage(
                    dim, hw, mask, config.heads[s], config.window_size,
                    config.mlp_ratio, rng,
                    spatial_variant=config.spatial_variant,
                    shifted_pair=(config.spatial_variant == "shift-window"),
                    with_merge=(s < config.n_stages - 1),
                    fusion_variant=config.fusion_variant,
                    fusion_reduction=config.fusion_reduction,
                    rel_pos_bias=config.rel_pos_bias,
                )
                stages.append(stage)
                dim, hw, mask = stage.out_dim, stage.out_hw, stage.out_pad_mask
        self.stages = ModuleList(stages)
        self.final_hw = hw
        self.final_dim = dim
        self.head = PredictionHead(hw[0] * hw[1] * dim, layout.n_turbines, rng)

    # -- pipeline segments (also used by the finite-difference checker) --
    def _seg_temporal(self, x):
        xs = [x[:, t] for t in range(x.shape[1])]
        feat = self.embed(self.encoder(xs))
        if self.embed_norm is not None:
            feat = self.embed_norm(feat)
        padded, _ = pad_to_window_multiple(feat, self.pad_multiple)
        return padded

    def segment_functions(self):
        return [fn for _, fn in self._segment_plan()]

    def _segment_plan(self):
        """(name prefix, callable) per pipeline segment, finest first match.

        The gradient checker re-runs only the segments from a parameter's
        own segment onward, so finer segments make the check cheaper."""
        plan = [("", self._seg_temporal)]
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks):
                plan.append((f"stages.{i}.blocks.{j}.", block))
            plan.append((f"stages.{i}.", stage.tail))
        plan.append(("head.", self.head))
        return plan

    def segment_of_param(self, name: str) -> int:
        best, best_len = 0, -1
        for k, (prefix, _) in enumerate(self._segment_plan()):
            if name.startswith(prefix) and len(prefix) > best_len:
                best, best_len = k, len(prefix)
        return best

    def forward_arrays(self, x):
        """Normalized [B, T, F, H, W] -> normalized predictions [B, L]."""
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x)
        if x.shape[2] != self.config.in_channels or x.shape[1] != self.config.T:
            raise ConfigError(
                f"model expects [B, {self.config.T}, {self.config.in_channels}, H, W], "
                f"got {x.shape}"
            )
        out = x
        for seg in self.segment_functions():
            out = seg(out)
        return out

    forward = forward_arrays

    def set_normalizer(self, stats: FeatureStats):
        self.stats = stats

    def predict(self, sequences, batch_size=64):
        """Raw scene sequences -> per-turbine Predictions in m/s."""
        if self.stats is None:
            raise ConfigError("normalizer stats not set; call set_normalizer first")
        if isinstance(sequences, SceneSequence):
            sequences = [sequences]
        mask = self.layout.valid_mask()
        was_training = self.training
        self.eval()
        preds = []
        with T.no_grad():
            for lo in range(0, len(sequences), batch_size):
                chunk = sequences[lo:lo + batch_size]
                x, _ = stack_sequences(chunk)
                xn = self.stats.apply_features(x, mask)
                out = self.forward_arrays(xn).data
                values = self.stats.denormalize_prediction(out)
                for seq, v in zip(chunk, values):
                    preds.append(
                        Prediction(
                            values=v.copy(),
                            horizon_minutes=seq.horizon_minutes,
                            timestamp=seq.target_timestamp,
                            turbine_ids=self.layout.turbine_ids,
                        )
                    )
        if was_training:
            self.train()
        return preds


def build_model(config: ModelConfig, layout: TurbineLayout, seed=0) -> Windformer:
    return Windformer(config, layout, seed=seed)
