"""Multi-resolution parallel transformer encoder producing the flow's conditioning.

Input construction (numpy, not differentiated): ``[x, histeq(x), CR(histeq(x)),
normalized maxgrad(CR(histeq(x)))]``, 10 channels at LR.

Network: a stem conv, two parallel streams (LR and LR/2), stages of
window attention + depth-wise FFN blocks on each stream with feature blending
between stages, a softmax color-ratio head and per-level 1x1 conditioning heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .crmap import cr_map
from .layout import FlowLayout
from .ndtensor import (
    ShapeError,
    Tensor,
    avgpool,
    conv2d,
    matmul,
    mul,
    pad2d,
    reshape,
    silu,
    softmax,
    transpose,
    upsample_nearest,
)
from .params import Conv, ParamStore, rng_for

LUMA = np.array([0.299, 0.587, 0.114])
HIST_BINS = 256


@dataclass
class CondFeatures:
    per_level: list
    cr_pred: Tensor


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 48
    stages: int = 2
    blocks: int = 2
    window: int = 8
    heads: int = 4
    streams: int = 2


# -- input construction -------------------------------------------------------

def histeq(x: np.ndarray) -> np.ndarray:
    """Luminance histogram equalization with one gain shared by all channels.

    Images whose luminance range is below one 8-bit step pass through unchanged.
    """
    x = np.asarray(x)
    out = np.empty_like(x)
    for i, img in enumerate(x):
        lum = np.tensordot(LUMA, img, axes=(0, 0))
        if lum.max() - lum.min() < 1.0 / 255:
            out[i] = img
            continue
        bins = np.minimum((lum * HIST_BINS).astype(np.int64), HIST_BINS - 1)
        hist = np.bincount(bins.ravel(), minlength=HIST_BINS)
        cdf = np.cumsum(hist) / bins.size
        target = cdf[bins]
        gain = np.divide(target, lum, out=np.zeros_like(lum), where=lum > 0)
        out[i] = np.clip(img * gain[None], 0.0, 1.0)
    return out


def maxgrad(m: np.ndarray) -> np.ndarray:
    """Per-pixel max over channels and both axes of the absolute forward difference."""
    m = np.asarray(m)
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[..., :, :-1] = np.abs(m[..., :, 1:] - m[..., :, :-1])
    dy[..., :-1, :] = np.abs(m[..., 1:, :] - m[..., :-1, :])
    return np.maximum(dx, dy).max(axis=1, keepdims=True)


def build_cond_input(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected N x 3 x h x w input, got {x.shape}")
    eq = histeq(x)
    cr = cr_map(eq)
    g = maxgrad(cr)
    peak = g.max(axis=(1, 2, 3), keepdims=True)
    g = np.divide(g, peak, out=np.zeros_like(g), where=peak > 0)
    return np.concatenate([x, eq, cr, g], axis=1)


# -- building blocks ------------------------------------------------------------

class WindowAttention:
    """Non-overlapping window multi-head self-attention with a residual."""

    def __init__(self, store: ParamStore, name: str, channels: int, window: int, heads: int, rng):
        if channels % heads:
            raise ValueError("channels must divide evenly into heads")
        self.qkv = Conv(store, f"{name}/qkv", channels, 3 * channels, 1, rng=rng)
        self.proj = Conv(store, f"{name}/proj", channels, channels, 1, rng=rng, gain=0.5)
        self.window, self.heads, self.channels = window, heads, channels

    def __call__(self, x: Tensor) -> Tensor:
        return window_attention(x, self.window, self.heads, self)


def window_attention(x: Tensor, window: int, heads: int, params) -> Tensor:
    n, c, h, w = x.shape
    ph, pw = (-h) % window, (-w) % window
    xp = pad2d(x, (0, ph), (0, pw)) if (ph or pw) else x
    hp, wp = h + ph, w + pw
    nh, nw = hp // window, wp // window
    d = c // heads
    t = window * window

    qkv = params.qkv(xp)  # (n, 3c, hp, wp)
    qkv = reshape(qkv, (n, 3, heads, d, nh, window, nw, window))
    # -> (3, n, nh, nw, heads, t, d)
    qkv = transpose(qkv, (1, 0, 4, 6, 2, 5, 7, 3))
    qkv = reshape(qkv, (3, n * nh * nw * heads, t, d))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d)), axis=-1)
    o = matmul(att, v)  # (B, t, d)
    o = reshape(o, (n, nh, nw, heads, window, window, d))
    o = transpose(o, (0, 3, 6, 1, 4, 2, 5))
    o = reshape(o, (n, c, hp, wp))
    o = params.proj(o)
    if ph or pw:
        o = o[:, :, :h, :w]
    return x + o


class FFNDWConv:
    """1x1 expand (x2) -> depth-wise 3x3 -> SiLU -> 1x1 project, with a residual."""

    def __init__(self, store, name, channels, rng, zero_proj: bool = False):
        self.expand = Conv(store, f"{name}/expand", channels, 2 * channels, 1, rng=rng)
        self.dw = Conv(store, f"{name}/dw", 2 * channels, 2 * channels, 3, groups=2 * channels, rng=rng)
        self.proj = Conv(store, f"{name}/proj", 2 * channels, channels, 1, rng=rng, zero=zero_proj, gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.proj(silu(self.dw(self.expand(x))))


def ffn_dwconv(x: Tensor, params: FFNDWConv) -> Tensor:
    return params(x)


class FeatureBlend:
    """Adds resampled projections of every other stream to each stream.

    Coarser sources: 1x1 conv then nearest upsampling. Finer sources: a chain
    of stride-2 3x3 convs.
    """

    def __init__(self, store, name, channels, count, rng, zero: bool = False):
        self.count = count
        self.paths = {}
        for i in range(count):
            for j in range(count):
                if i == j:
                    continue
                key = f"{name}/{i}from{j}"
                if j > i:
                    self.paths[i, j] = [Conv(store, key, channels, channels, 1, rng=rng, zero=zero, gain=0.5)]
                else:
                    self.paths[i, j] = [Conv(store, f"{key}/{s}", channels, channels, 3, stride=2,
                                             rng=rng, zero=zero, gain=0.5) for s in range(i - j)]

    def __call__(self, levels: list) -> list:
        return feature_blend(levels, self)


def feature_blend(levels: list, params: FeatureBlend | None = None) -> list:
    if len(levels) == 1:
        return list(levels)
    for a, b in zip(levels, levels[1:]):
        if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ShapeError(f"feature_blend needs dyadic fine-to-coarse levels, got {a.shape} then {b.shape}")
    out = []
    for i, xi in enumerate(levels):
        acc = xi
        for j, xj in enumerate(levels):
            if i == j:
                continue
            y = xj
            if j > i:
                y = upsample_nearest(params.paths[i, j][0](y), 2 ** (j - i))
            else:
                for conv in params.paths[i, j]:
                    y = conv(y)
            acc = acc + y
        out.append(acc)
    return out


# -- encoder ------------------------------------------------------------------------

class Encoder:
    def __init__(self, layout: FlowLayout, scale: int, config: EncoderConfig = EncoderConfig(),
                 seed: int = 0, store: ParamStore | None = None, dtype=np.float32,
                 prefix: str = "encoder"):
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        self.layout, self.scale, self.config = layout, scale, config
        self.store = store if store is not None else ParamStore(dtype)
        rng = rng_for(seed, "encoder-init")
        wd = config.width
        self.stem = Conv(self.store, f"{prefix}/stem", 10, wd, 3, rng=rng)
        self.down = [Conv(self.store, f"{prefix}/down{s}", wd, wd, 3, stride=2, rng=rng)
                     for s in range(1, config.streams)]
        self.stages = []
        for st in range(config.stages):
            blocks = []
            for s in range(config.streams):
                blocks.append([
                    (WindowAttention(self.store, f"{prefix}/st{st}/s{s}/b{b}/attn", wd, config.window, config.heads, rng),
                     FFNDWConv(self.store, f"{prefix}/st{st}/s{s}/b{b}/ffn", wd, rng))
                    for b in range(config.blocks)
                ])
            blend = FeatureBlend(self.store, f"{prefix}/st{st}/blend", wd, config.streams, rng)
            self.stages.append((blocks, blend))
        self.cr_head = Conv(self.store, f"{prefix}/cr_head", wd, 3, 1, rng=rng)
        self.cond_heads = [Conv(self.store, f"{prefix}/cond{l}", wd, layout.level_channels(l), 1, rng=rng)
                           for l in range(layout.levels)]

    def lr_size(self) -> tuple:
        h, w = self.layout.hr_size
        return h // self.scale, w // self.scale

    def __call__(self, x) -> CondFeatures:
        return encoder_forward(x, self)


def _resample_to(feats: list, lr_h: int, target_h: int) -> Tensor:
    """Pick the stream closest to ``target_h`` and resample by a power of two."""
    for s, f in enumerate(feats):
        if f.shape[2] == target_h:
            return f
    if target_h > lr_h:
        return upsample_nearest(feats[0], target_h // lr_h)
    coarsest = feats[-1]
    return avgpool(coarsest, coarsest.shape[2] // target_h)


def encoder_forward(x, enc: Encoder) -> CondFeatures:
    x_np = np.asarray(x.data if isinstance(x, Tensor) else x)
    lr_h, lr_w = enc.lr_size()
    if x_np.shape[2:] != (lr_h, lr_w):
        raise ShapeError(f"LR input {x_np.shape[2:]} does not match layout HR {enc.layout.hr_size} / {enc.scale}")
    if lr_h % 2 ** (enc.config.streams - 1) or lr_w % 2 ** (enc.config.streams - 1):
        raise ShapeError("LR dims must be divisible by the stream downsampling factor")
    dtype = enc.store.dtype
    inp = Tensor(build_cond_input(x_np).astype(dtype))

    s0 = silu(enc.stem(inp))
    feats = [s0]
    for conv in enc.down:
        feats.append(silu(conv(feats[-1])))
    for blocks, blend in enc.stages:
        for s, stream_blocks in enumerate(blocks):
            f = feats[s]
            for attn, ffn in stream_blocks:
                f = ffn(attn(f))
            feats[s] = f
        feats = blend(feats)

    cr_pred = softmax(enc.cr_head(feats[0]), axis=1)
    per_level = []
    for lvl, head in enumerate(enc.cond_heads):
        gh, _ = enc.layout.level_grid(lvl)
        per_level.append(head(silu(_resample_to(feats, lr_h, gh))))
    return CondFeatures(per_level, cr_pred)
