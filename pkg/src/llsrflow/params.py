"""Named parameter storage and the seeded RNG scheme shared by all modules."""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np

from .ndtensor import Tensor, conv2d


def rng_for(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, purpose tag, index)``.

    Streams never depend on call order, so serial and parallel runs (and
    resumed runs) draw identical numbers.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode()), int(index)])


class ParamStore:
    """Ordered ``name -> Tensor`` mapping with slash-separated prefixes."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype).type
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def tensors(self) -> list:
        return list(self._params.values())

    def numel(self) -> int:
        return sum(t.size for t in self._params.values())

    def state(self) -> dict:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, state: dict, strict: bool = True) -> None:
        for name, t in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=self.dtype)

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype).type
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)


class Conv:
    """A conv2d layer whose weights live in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, groups: int = 1, rng=None, zero: bool = False, gain: float = 1.0):
        fan_in = (cin // groups) * k * k
        if zero:
            w = np.zeros((cout, cin // groups, k, k))
        else:
            w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(cout, cin // groups, k, k))
        self.w = store.add(f"{name}/w", w)
        self.b = store.add(f"{name}/b", np.zeros(cout))
        self.stride, self.groups, self.pad = stride, groups, k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad, groups=self.groups)
