"""Color-ratio maps, prior-mean pyramids and the latent Gaussian density."""

from __future__ import annotations

import math

import numpy as np

from .layout import FlowLayout, split, squeeze, unsplit, unsqueeze
from .ndtensor import ShapeError, Tensor, mul, square, sub, tsum

CR_EPS = 1e-6
ENC_MEAN_PROB = 0.2  # odds 1:4 between the encoder mean and CR(y)


def cr_map(image, eps: float = CR_EPS) -> np.ndarray:
    """Per-pixel channel values divided by the channel sum.

    Pixels whose sum is at most ``eps`` (including all-zero pixels) map to
    (0, 0, 0). Elsewhere the ratio is exact, so ``cr_map(k * I) == cr_map(I)``
    whenever ``k * sum > eps``.
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    if np.any(image < 0):
        raise ValueError("cr_map expects non-negative values")
    s = image.sum(axis=1, keepdims=True)
    return np.divide(image, s, out=np.zeros_like(image), where=s > eps)


def nearest_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    return image[..., ::factor, ::factor]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def rearrange_to_pyramid(mean_image, layout: FlowLayout) -> list:
    """Cut an image-shaped mean into latent-shaped pieces.

    Uses exactly the flow's squeezes and splits, so every latent element
    (including interior split outputs) gets a mean.
    """
    x = _as_tensor(mean_image)
    n, c, h, w = x.shape
    if c != layout.base_channels or (h, w) != layout.hr_size:
        raise ShapeError(f"mean image {x.shape} does not match layout {layout.hr_size}")
    pieces = []
    for lvl in range(layout.levels):
        x = squeeze(x)
        if lvl < layout.levels - 1:
            x, emitted = split(x)
            pieces.append(emitted)
    pieces.append(x)
    return pieces


def unrearrange_pyramid(pieces: list, layout: FlowLayout) -> Tensor:
    x = pieces[-1]
    for lvl in reversed(range(layout.levels)):
        if lvl < layout.levels - 1:
            x = unsplit(x, pieces[lvl])
        x = unsqueeze(x)
    return x


def select_prior_mean(enc_mean: list, cr_mean: list, rng: np.random.Generator,
                      return_choice: bool = False):
    """Per-sample random choice between two mean pyramids (P(cr_mean) = 0.8)."""
    if len(enc_mean) != len(cr_mean) or any(a.shape != b.shape for a, b in zip(enc_mean, cr_mean)):
        raise ShapeError("prior mean pyramids differ in shape")
    n = enc_mean[0].shape[0]
    use_cr = rng.random(n) >= ENC_MEAN_PROB
    out = []
    for e, c in zip(enc_mean, cr_mean):
        e, c = _as_tensor(e), _as_tensor(c)
        m = use_cr.astype(e.dtype).reshape(n, 1, 1, 1)
        out.append(mul(e, Tensor(1.0 - m)) + mul(c, Tensor(m)))
    return (out, use_cr) if return_choice else out


def latent_log_density(z: list, mean: list) -> Tensor:
    """Sum over every element (and sample) of the unit-variance Gaussian log-pdf."""
    if len(z) != len(mean):
        raise ShapeError("latent and mean pyramids have different lengths")
    total = None
    count = 0
    for zi, mi in zip(z, mean):
        zi, mi = _as_tensor(zi), _as_tensor(mi)
        if zi.shape != mi.shape:
            raise ShapeError(f"latent piece {zi.shape} vs mean {mi.shape}")
        term = tsum(square(sub(zi, mi)))
        total = term if total is None else total + term
        count += zi.size
    return mul(total, -0.5) - 0.5 * math.log(2 * math.pi) * count
