"""Flow layout record and the value-preserving rearrangements it implies.

Squeeze maps channel ``c`` and the 2x2 block offset ``(dy, dx)`` to output
channel ``4*c + 2*dy + dx``. Split first applies a fixed channel shuffle
(even channels first, then odd) and keeps the first half.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .ndtensor import ShapeError, Tensor, concat, reshape, take, transpose


@dataclass(frozen=True)
class FlowLayout:
    levels: int = 3
    steps_per_level: int = 12
    base_channels: int = 3
    split_fraction: Fraction = Fraction(1, 2)
    hr_size: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "split_fraction", Fraction(self.split_fraction))
        object.__setattr__(self, "hr_size", tuple(int(v) for v in self.hr_size))
        if self.split_fraction != Fraction(1, 2):
            raise ValueError("only a one-half split is supported")
        h, w = self.hr_size
        div = 2 ** self.levels
        if h % div or w % div:
            raise ShapeError(f"HR size {h}x{w} not divisible by 2^{self.levels}")

    def with_size(self, hr_size) -> FlowLayout:
        return FlowLayout(self.levels, self.steps_per_level, self.base_channels,
                          self.split_fraction, tuple(hr_size))

    def level_channels(self, level: int) -> int:
        """Channel count inside level ``level`` (after its squeeze)."""
        c = self.base_channels
        for i in range(level + 1):
            c *= 4
            if i < level:
                c = c // 2
        return c

    def level_grid(self, level: int) -> tuple:
        h, w = self.hr_size
        f = 2 ** (level + 1)
        return h // f, w // f

    def latent_shapes(self) -> list:
        """Per-sample shapes of the latent pieces: interior splits, then the final latent."""
        shapes = []
        for lvl in range(self.levels):
            c = self.level_channels(lvl)
            gh, gw = self.level_grid(lvl)
            if lvl < self.levels - 1:
                shapes.append((c - c // 2, gh, gw))
            else:
                shapes.append((c, gh, gw))
        return shapes

    @property
    def dims(self) -> int:
        h, w = self.hr_size
        return self.base_channels * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fraction"] = str(self.split_fraction)
        d["hr_size"] = list(self.hr_size)
        return d


def squeeze(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even spatial dims, got {h}x{w}")
    x = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    x = transpose(x, (0, 1, 3, 5, 2, 4))
    return reshape(x, (n, 4 * c, h // 2, w // 2))


def unsqueeze(x: Tensor) -> Tensor:
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    x = reshape(x, (n, c, 2, 2, h, w))
    x = transpose(x, (0, 1, 4, 2, 5, 3))
    return reshape(x, (n, c, 2 * h, 2 * w))


def split_permutation(channels: int) -> np.ndarray:
    """The fixed channel shuffle applied before every split."""
    return np.concatenate([np.arange(0, channels, 2), np.arange(1, channels, 2)])


def split(x: Tensor) -> tuple:
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"split needs an even channel count, got {c}")
    shuffled = take(x, split_permutation(c), axis=1)
    half = c // 2
    return shuffled[:, :half], shuffled[:, half:]


def unsplit(kept: Tensor, emitted: Tensor) -> Tensor:
    merged = concat([kept, emitted], axis=1)
    return take(merged, np.argsort(split_permutation(merged.shape[1])), axis=1)


def check_image_dims(layout: FlowLayout, shape: tuple) -> None:
    if len(shape) != 4 or shape[1] != layout.base_channels or tuple(shape[2:]) != layout.hr_size:
        raise ShapeError(f"image shape {shape} does not match layout "
                         f"({layout.base_channels}, {layout.hr_size})")
