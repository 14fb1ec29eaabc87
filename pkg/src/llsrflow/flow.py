"""Invertible conditional flow: layers, multi-level model and NLL.

Every layer maps ``(x, cond) -> (y, logdet)`` where ``logdet`` is a per-sample
tensor of shape ``(N,)`` (or a 0-d tensor when it does not depend on the
sample), and has an exact ``inverse(y, cond)``.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .crmap import latent_log_density
from .layout import FlowLayout, check_image_dims, split, squeeze, unsplit, unsqueeze
from .ndtensor import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    exp,
    inverse,
    log,
    matmul,
    mul,
    no_grad,
    reshape,
    sigmoid,
    silu,
    tsum,
)
from .params import Conv, ParamStore

SCALE_EPS = 1e-3
SCALE_OFFSET = 2.0
# dividing by the zero-input scale makes a zero-initialized subnet exactly the identity
_SCALE_NORM = 1.0 / (1.0 / (1.0 + math.exp(-SCALE_OFFSET)) + SCALE_EPS)


def positive_scale(raw: Tensor) -> Tensor:
    """Bounded positive scale, equal to 1 at ``raw == 0``."""
    return mul(sigmoid(raw + SCALE_OFFSET) + SCALE_EPS, _SCALE_NORM)


class ActNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.bias = store.add(f"{name}/bias", np.zeros((1, channels, 1, 1)))
        self.logs = store.add(f"{name}/logs", np.zeros((1, channels, 1, 1)))
        self.initialized = False

    def initialize(self, x: np.ndarray) -> None:
        """Data-dependent init: zero mean, unit variance per channel on ``x``."""
        m = x.mean(axis=(0, 2, 3), keepdims=True)
        std = x.std(axis=(0, 2, 3), keepdims=True)
        self.bias.data = (-m).astype(self.bias.dtype)
        self.logs.data = (-np.log(std + 1e-6)).astype(self.logs.dtype)
        self.initialized = True

    def forward(self, x: Tensor, cond=None):
        if not self.initialized:
            self.initialize(x.data)
        h, w = x.shape[2:]
        y = mul(x + self.bias, exp(self.logs))
        return y, mul(tsum(self.logs), float(h * w))

    def inverse(self, y: Tensor, cond=None) -> Tensor:
        return mul(y, exp(-self.logs)) - self.bias


class InvConv1x1:
    """Channel mixing ``W = P L (U + diag(sign * exp(log_s)))`` with fixed ``P`` and sign."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng):
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        p, lower, upper = scipy.linalg.lu(q)
        diag = np.diag(upper)
        self.perm = p
        self.sign = np.sign(diag)
        self.lmask = np.tril(np.ones((channels, channels)), -1)
        self.umask = np.triu(np.ones((channels, channels)), 1)
        self.eye = np.eye(channels)
        self.lower = store.add(f"{name}/lower", lower * self.lmask)
        self.upper = store.add(f"{name}/upper", upper * self.umask)
        self.log_s = store.add(f"{name}/log_s", np.log(np.abs(diag)))
        self.channels = channels

    def _factors(self):
        dt = self.lower.dtype
        c = self.channels
        lmat = mul(self.lower, Tensor(self.lmask, dtype=dt)) + Tensor(self.eye, dtype=dt)
        diag = mul(Tensor(self.eye, dtype=dt), reshape(mul(exp(self.log_s), Tensor(self.sign, dtype=dt)), (1, c)))
        umat = mul(self.upper, Tensor(self.umask, dtype=dt)) + diag
        return Tensor(self.perm, dtype=dt), lmat, umat

    def weight(self) -> Tensor:
        p, lmat, umat = self._factors()
        return matmul(p, matmul(lmat, umat))

    def inverse_weight(self) -> Tensor:
        p, lmat, umat = self._factors()
        return matmul(inverse(umat, lower=False), matmul(inverse(lmat, lower=True), Tensor(p.data.T)))

    def forward(self, x: Tensor, cond=None):
        c = self.channels
        h, w = x.shape[2:]
        y = conv2d(x, reshape(self.weight(), (c, c, 1, 1)))
        return y, mul(tsum(self.log_s), float(h * w))

    def inverse(self, y: Tensor, cond=None) -> Tensor:
        c = self.channels
        return conv2d(y, reshape(self.inverse_weight(), (c, c, 1, 1)))


class _Subnet:
    """conv3x3 -> SiLU -> conv1x1 -> SiLU -> zero-initialized conv3x3."""

    def __init__(self, store, name, cin, cout, hidden, rng):
        self.c1 = Conv(store, f"{name}/c1", cin, hidden, 3, rng=rng)
        self.c2 = Conv(store, f"{name}/c2", hidden, hidden, 1, rng=rng)
        self.c3 = Conv(store, f"{name}/c3", hidden, cout, 3, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.c3(silu(self.c2(silu(self.c1(x)))))


class CondAffineCoupling:
    def __init__(self, store, name, channels, cond_channels, hidden, rng):
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        self.net = _Subnet(store, f"{name}/net", self.c1 + cond_channels, 2 * self.c2, hidden, rng)

    def _scale_shift(self, x1, cond):
        if cond.shape[2:] != x1.shape[2:] or cond.shape[0] != x1.shape[0]:
            raise ShapeError(f"conditioning {cond.shape} does not match activation {x1.shape}")
        h = self.net(concat([x1, cond], axis=1))
        return positive_scale(h[:, :self.c2]), h[:, self.c2:]

    def forward(self, x: Tensor, cond: Tensor):
        x1, x2 = x[:, :self.c1], x[:, self.c1:]
        s, t = self._scale_shift(x1, cond)
        y2 = mul(s, x2) + t
        return concat([x1, y2], axis=1), tsum(log(s), axis=(1, 2, 3))

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        y1, y2 = y[:, :self.c1], y[:, self.c1:]
        s, t = self._scale_shift(y1, cond)
        return concat([y1, (y2 - t) / s], axis=1)


class AffineInjector:
    def __init__(self, store, name, channels, cond_channels, hidden, rng):
        self.channels = channels
        self.net = _Subnet(store, f"{name}/net", cond_channels, 2 * channels, hidden, rng)

    def _scale_shift(self, x, cond):
        if cond.shape[2:] != x.shape[2:] or cond.shape[0] != x.shape[0]:
            raise ShapeError(f"conditioning {cond.shape} does not match activation {x.shape}")
        h = self.net(cond)
        return positive_scale(h[:, :self.channels]), h[:, self.channels:]

    def forward(self, x: Tensor, cond: Tensor):
        s, t = self._scale_shift(x, cond)
        return mul(s, x) + t, tsum(log(s), axis=(1, 2, 3))

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        s, t = self._scale_shift(y, cond)
        return (y - t) / s


class FlowStep:
    """actnorm -> invertible 1x1 -> conditional coupling -> affine injector."""

    def __init__(self, store, name, channels, cond_channels, hidden, rng):
        self.layers = [
            ActNorm(store, f"{name}/actnorm", channels),
            InvConv1x1(store, f"{name}/invconv", channels, rng),
            CondAffineCoupling(store, f"{name}/coupling", channels, cond_channels, hidden, rng),
            AffineInjector(store, f"{name}/injector", channels, cond_channels, hidden, rng),
        ]

    def forward(self, x, cond, log_terms=None):
        total = None
        for layer in self.layers:
            x, ld = layer.forward(x, cond)
            if log_terms is not None:
                log_terms.append(ld)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, y, cond):
        for layer in reversed(self.layers):
            y = layer.inverse(y, cond)
        return y


class FlowModel:
    """Multi-level conditional flow over HR images.

    Each level: squeeze, ``steps_per_level`` flow steps, then (except for the
    last level) split off half the channels as a latent piece. Conditioning
    for level ``i`` must have the level's channel count and grid.
    """

    def __init__(self, layout: FlowLayout, hidden: int = 64, seed: int = 0,
                 store: ParamStore | None = None, dtype=np.float32, prefix: str = "flow"):
        from .params import rng_for

        self.layout = layout
        self.hidden = hidden
        self.store = store if store is not None else ParamStore(dtype)
        rng = rng_for(seed, "flow-init")
        self.levels = []
        for lvl in range(layout.levels):
            c = layout.level_channels(lvl)
            steps = [FlowStep(self.store, f"{prefix}/L{lvl}/S{s}", c, c, hidden, rng)
                     for s in range(layout.steps_per_level)]
            self.levels.append(steps)

    @property
    def cond_channels(self) -> list:
        return [self.layout.level_channels(lvl) for lvl in range(self.layout.levels)]

    def actnorms(self) -> list:
        return [st.layers[0] for steps in self.levels for st in steps]

    @property
    def initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def mark_initialized(self) -> None:
        for a in self.actnorms():
            a.initialized = True

    def _check_cond(self, cond: list, n: int) -> None:
        if len(cond) != self.layout.levels:
            raise ShapeError(f"need {self.layout.levels} conditioning maps, got {len(cond)}")
        for lvl, cnd in enumerate(cond):
            want = (n, self.layout.level_channels(lvl)) + self.layout.level_grid(lvl)
            if tuple(cnd.shape) != want:
                raise ShapeError(f"conditioning for level {lvl} has shape {cnd.shape}, expected {want}")


def _cond_list(cond):
    return cond.per_level if hasattr(cond, "per_level") else list(cond)


def flow_forward(y, cond, model: FlowModel, log_terms: list | None = None):
    """Map an HR image to latent pieces; returns ``(pieces, total_logdet)``."""
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y))
    check_image_dims(model.layout, y.shape)
    cond = _cond_list(cond)
    model._check_cond(cond, y.shape[0])
    n = y.shape[0]
    total = Tensor(np.zeros(n, dtype=y.dtype))
    pieces = []
    x = y
    for lvl, steps in enumerate(model.levels):
        x = squeeze(x)
        for step in steps:
            x, ld = step.forward(x, cond[lvl], log_terms)
            total = total + ld
        if lvl < len(model.levels) - 1:
            x, emitted = split(x)
            pieces.append(emitted)
    pieces.append(x)
    return pieces, total


def flow_inverse(z: list, cond, model: FlowModel) -> Tensor:
    cond = _cond_list(cond)
    shapes = model.layout.latent_shapes()
    if len(z) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} latent pieces, got {len(z)}")
    z = [p if isinstance(p, Tensor) else Tensor(np.asarray(p)) for p in z]
    for p, s in zip(z, shapes):
        if tuple(p.shape[1:]) != s:
            raise ShapeError(f"latent piece {p.shape} does not match layout shape {s}")
    model._check_cond(cond, z[0].shape[0])
    x = z[-1]
    for lvl in reversed(range(len(model.levels))):
        if lvl < len(model.levels) - 1:
            x = unsplit(x, z[lvl])
        for step in reversed(model.levels[lvl]):
            x = step.inverse(x, cond[lvl])
        x = unsqueeze(x)
    return x


def nll(z: list, total_logdet: Tensor, mean: list) -> Tensor:
    """Negative log-likelihood per dimension, averaged over the batch."""
    n = z[0].shape[0]
    dims = sum(p.size for p in z)
    logp = latent_log_density(z, mean)
    return mul(-(logp + tsum(total_logdet)), 1.0 / dims)


def initialize_actnorm(model: FlowModel, y, cond) -> None:
    """Run one forward pass so every actnorm layer initializes from ``y``."""
    with no_grad():
        flow_forward(y, cond, model)
