"""Parameterized conv layers and the named parameter store.

Parameter names follow the checkpoint grammar
``<network>.<scale|block>.<layer>.{weight|bias}`` documented in
docs/architecture.md. Iteration order of a ParamStore is insertion order
and is part of the determinism contract (optimizer updates and RNG draws
happen in that order).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import GradTape, Tensor


class ParamLoadError(ValueError):
    """Strict load failure: missing, extra, or shape-mismatched names."""


class ParamStore:
    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, t: Tensor, frozen: bool = False):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = t
        if frozen:
            self.frozen.add(name)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def trainable_names(self):
        return [n for n in self._entries if n not in self.frozen]

    def total_count(self):
        return sum(t.size for t in self._entries.values())

    def astype(self, dtype):
        out = ParamStore()
        for n, t in self._entries.items():
            out.add(n, t.astype(dtype), frozen=(n in self.frozen))
        return out

    def copy(self):
        out = ParamStore()
        for n, t in self._entries.items():
            out.add(n, t.copy(), frozen=(n in self.frozen))
        return out

    def load(self, other: "ParamStore"):
        """Replace values in place; names and shapes must match exactly."""
        mine, theirs = set(self._entries), set(other._entries)
        missing = sorted(mine - theirs)
        extra = sorted(theirs - mine)
        if missing or extra:
            raise ParamLoadError(
                f"strict load failed; missing={missing} extra={extra}")
        mismatched = [n for n in self._entries
                      if self._entries[n].shape != other._entries[n].shape]
        if mismatched:
            detail = {n: (self._entries[n].shape, other._entries[n].shape)
                      for n in mismatched}
            raise ParamLoadError(f"strict load failed; shape mismatch: {detail}")
        for n in self._entries:
            self._entries[n].data[...] = other._entries[n].data


class ConvLayer:
    """conv2d followed by an optional activation. Stride-1 layers use
    same-padding (p = (k-1)//2) so spatial size is preserved."""

    def __init__(self, weight: Tensor, bias: Tensor, stride: int, padding: int,
                 act: str | None):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.act = act

    @property
    def ci(self):
        return self.weight.shape[1]

    @property
    def co(self):
        return self.weight.shape[0]

    def __call__(self, x: Tensor, tape: GradTape | None = None) -> Tensor:
        out = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, tape)
        if self.act is not None:
            out = T.activation(out, self.act, tape)
        return out


def init_conv(ci: int, co: int, k: int, stride: int = 1, act: str | None = "relu",
              rng: np.random.Generator = None, dtype=np.float32,
              padding: int | None = None) -> ConvLayer:
    """Fan-in scaled uniform init: bound = sqrt(6 / (ci*k*k)). The weight
    draw consumes co*ci*k*k uniforms in C order; bias starts at zero."""
    bound = float(np.sqrt(6.0 / (ci * k * k)))
    w = rng.uniform(-bound, bound, size=(co, ci, k, k))
    layer_pad = (k - 1) // 2 if padding is None else padding
    return ConvLayer(
        Tensor(w.astype(dtype)),
        Tensor(np.zeros(co, dtype=dtype)),
        stride,
        layer_pad,
        act,
    )


def register_conv(store: ParamStore, prefix: str, layer: ConvLayer,
                  frozen: bool = False) -> ConvLayer:
    store.add(prefix + ".weight", layer.weight, frozen)
    store.add(prefix + ".bias", layer.bias, frozen)
    return layer
