"""Minimal layer containers on top of the tensor core.

A :class:`Module` discovers parameters by reflection: ``Tensor`` attributes
with ``requires_grad`` are parameters, ``np.ndarray`` attributes are
persistent buffers (running statistics), child modules and lists of modules
recurse.  Iteration order follows attribute definition order, so parameter
traversal is deterministic.

Forward passes thread a :class:`Ctx` through the graph: training flag, the rng
that feeds dropout, whether batch-norm may fold batch statistics into its
running buffers, and an optional capture dict for inspecting intermediates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Ctx:
    training: bool = False
    rng: np.random.Generator | None = None
    update_stats: bool | None = None
    capture: dict | None = None


EVAL = Ctx()


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameters and buffers from a name->array mapping."""
        from .errors import DataError

        for name, t in self.named_parameters(prefix):
            if name not in state:
                raise DataError(f"checkpoint is missing parameter {name}")
            if state[name].shape != t.shape:
                raise DataError(f"checkpoint shape {state[name].shape} != {t.shape} for {name}")
            t.data[...] = state[name].astype(t.dtype, copy=False)
        for name, buf in self.named_buffers(prefix):
            if name not in state:
                raise DataError(f"checkpoint is missing buffer {name}")
            buf[...] = state[name].astype(buf.dtype, copy=False)

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.named_parameters(prefix)}
        out.update({name: buf for name, buf in self.named_buffers(prefix)})
        return out


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, dilation: int = 1, padding: int = 0,
                 bias: bool = True, dtype=np.float32):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype) if bias else None

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, ctx.training, self.momentum,
                            self.eps, ctx.update_stats)


class ConvBNReLU(Module):
    """3x3 (or given k) convolution followed by batch norm and ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3,
                 stride: int = 1, dilation: int = 1, padding: int | None = None,
                 dtype=np.float32):
        if padding is None:
            padding = dilation * (k // 2)
        self.conv = Conv2d(cin, cout, k, rng, stride, dilation, padding, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return T.relu(self.bn.forward(self.conv.forward(x, ctx), ctx))


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p

    def forward(self, x: Tensor, ctx: Ctx = EVAL) -> Tensor:
        return T.dropout(x, self.p, ctx.training, ctx.rng)
