"""Windowed multi-head self-attention over the turbine grid.

The grid is split into non-overlapping windows and attention runs inside each
window. Alternate blocks cyclically shift the grid by half a window before
partitioning, which lets information cross window boundaries; an additive
mask then forbids attention between tokens that were not neighbors before
the shift (the wrapped regions). Mask entries are 0 or -1e9: large enough to
zero out softmax weights, finite for numerical safety.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Linear, Module
from .tensor import Parameter

MASK_VALUE = -1e9


def window_partition(x, window):
    """[B, H, W, C] -> [B * nW, window*window, C]; lossless reshape."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    x = T.reshape(x, (b, h // window, window, w // window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // window) * (w // window), window * window, c))


def window_reverse(wins, window, b, h, w):
    """Inverse of ``window_partition``."""
    c = wins.shape[-1]
    x = T.reshape(wins, (b, h // window, w // window, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def cyclic_shift(x, shift):
    """Roll rows and columns up-left by ``shift`` (axes 1, 2 of [B, H, W, C])."""
    if shift == 0:
        return x
    return T.roll(x, (-shift, -shift), axis=(1, 2))


def reverse_cyclic_shift(x, shift):
    if shift == 0:
        return x
    return T.roll(x, (shift, shift), axis=(1, 2))


def shift_region_ids(h, w, window, shift) -> np.ndarray:
    """Region ids in the rolled frame; tokens whose ids differ were not
    spatial neighbors before the cyclic shift."""
    ids = np.zeros((h, w), dtype=np.int64)
    slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    count = 0
    for hs in slices:
        for ws in slices:
            ids[hs, ws] = count
            count += 1
    return ids


def _partition_grid(grid: np.ndarray, window) -> np.ndarray:
    h, w = grid.shape
    return (
        grid.reshape(h // window, window, w // window, window)
        .transpose(0, 2, 1, 3)
        .reshape(-1, window * window)
    )


def build_shift_mask(h, w, window, shift) -> np.ndarray:
    """Additive attention mask [nW, N, N]: -1e9 between tokens of distinct
    pre-shift regions, 0 otherwise. All zeros when ``shift`` is 0."""
    n = window * window
    n_windows = (h // window) * (w // window)
    if shift == 0:
        return np.zeros((n_windows, n, n), dtype=np.float32)
    ids = _partition_grid(shift_region_ids(h, w, window, shift), window)
    diff = ids[:, :, None] != ids[:, None, :]
    return np.where(diff, np.float32(MASK_VALUE), np.float32(0.0))


def build_key_padding_mask(pad_mask: np.ndarray, window, shift) -> np.ndarray | None:
    """Additive key mask [nW, 1, N] excluding padded cells from attention.

    The padding mask lives in the unshifted frame; it is rolled exactly like
    the feature map before windows are cut. Windows made entirely of padding
    are left unmasked: no real token can reach them, and skipping the mask
    there avoids pushing every logit through a +/-1e9 round-trip (which
    would quantize them at the float ulp of 1e9).
    """
    if not pad_mask.any():
        return None
    rolled = np.roll(pad_mask, (-shift, -shift), axis=(0, 1)) if shift else pad_mask
    wins = _partition_grid(rolled, window).copy()
    wins[wins.all(axis=1)] = False
    return np.where(wins, np.float32(MASK_VALUE), np.float32(0.0))[:, None, :]


def combine_masks(shift_mask, key_mask):
    if key_mask is None:
        return shift_mask
    if shift_mask is None:
        return key_mask
    return shift_mask + key_mask


class RelativePositionBias(Module):
    """Learned bias indexed by the in-window (dy, dx) offset of each pair;
    (2*window - 1)^2 entries per head."""

    def __init__(self, window, n_heads, rng):
        super().__init__()
        self.n_heads = n_heads
        self.window = window
        span = 2 * window - 1
        self.table = Parameter(
            np.asarray(rng.normal(0.0, 0.02, size=(span * span, n_heads)),
                       dtype=T.DEFAULT_DTYPE)
        )
        coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                      indexing="ij")).reshape(2, -1)
        rel = coords[:, :, None] - coords[:, None, :]
        self.index = ((rel[0] + window - 1) * span + (rel[1] + window - 1)).reshape(-1)

    def forward(self):
        n = self.window * self.window
        bias = self.table[self.index]  # [N*N, heads]
        return T.transpose(T.reshape(bias, (n, n, self.n_heads)), (2, 0, 1))


class WindowAttention(Module):
    """Multi-head self-attention inside windows: per window and head,
    softmax(Q K^T / sqrt(d_h) + bias + mask) V, heads concatenated, then an
    output projection."""

    def __init__(self, dim, n_heads, window, rng, rel_pos_bias=True):
        super().__init__()
        if dim % n_heads:
            raise ConfigError(
                f"attention dim {dim} not divisible by head count {n_heads}"
            )
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.bias = RelativePositionBias(window, n_heads, rng) if rel_pos_bias else None

    def forward(self, wins, mask=None, return_weights=False):
        nw, n, c = wins.shape
        qkv = T.reshape(self.qkv(wins), (nw, n, 3, self.n_heads, self.head_dim))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, nW, heads, N, d_h]
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        if self.bias is not None:
            attn = T.add(attn, self.bias())
        if mask is not None:
            n_masks = mask.shape[0]
            if nw % n_masks:
                raise ShapeError(
                    f"{nw} windows incompatible with mask for {n_masks} windows"
                )
            attn = T.reshape(attn, (nw // n_masks, n_masks, self.n_heads, n, n))
            attn = T.add(attn, mask[None, :, None])
            attn = T.reshape(attn, (nw, self.n_heads, n, n))
        weights = T.softmax(attn, axis=-1)
        out = T.matmul(weights, v)  # [nW, heads, N, d_h]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, n, c))
        out = self.proj(out)
        if return_weights:
            return out, weights.data
        return out
