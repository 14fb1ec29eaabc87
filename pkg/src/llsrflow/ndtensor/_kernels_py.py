"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np


def im2col(x, k, stride, pad, ho, wo):
    """(N, C, H, W) -> (C, K, K, N, Ho, Wo) patches of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    n, c = x.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def col2im(cols, h, w, stride, pad):
    """Adjoint of im2col: scatter-add patches back onto an (N, C, H, W) grid."""
    c, k, _, n, ho, wo = cols.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp
