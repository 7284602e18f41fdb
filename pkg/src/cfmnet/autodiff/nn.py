"""Parameter containers built on the tensor primitives."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from ..errors import CheckpointError, StructuralError
from . import ops
from .tensor import Tensor, default_dtype


class Module:
    """Minimal module tree: parameters are ``Tensor`` attributes with
    ``requires_grad``; children are ``Module`` attributes or lists of them.
    Buffers are numpy arrays named in ``_buffer_names``.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad and value.is_leaf:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (float64 for gradient checks)."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad and value.is_leaf:
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays into this module; names and shapes must match exactly."""
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise CheckpointError(f"missing tensor {name!r}")
            if tuple(state[name].shape) != arr.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {tuple(state[name].shape)}, model expects {arr.shape}"
                )
        extra = [k for k in state if k not in own]
        if extra:
            raise CheckpointError(f"unexpected tensor {extra[0]!r}")
        params = dict(self.named_parameters())
        for m_prefix, m in self._buffer_owners():
            for bname in m._buffer_names:
                setattr(m, bname, np.array(state[m_prefix + bname], dtype=getattr(m, bname).dtype))
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)

    def _buffer_owners(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        if self._buffer_names:
            yield prefix, self
        for name, child in self.children():
            yield from child._buffer_owners(prefix + name + ".")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


class Conv2d(Module):
    """3x3 (or any odd) stride-1 convolution with bias, He-initialised."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3,
                 padding: str = "same"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.padding)


class ConvTranspose2x2(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        # every output pixel receives exactly in_channels contributions
        self.weight = Tensor(he_normal(rng, (out_channels, in_channels, 2, 2), in_channels), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2x2(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: Optional[float] = 0.1):
        dtype = default_dtype()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.num_batches = 0
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps, self.num_batches)
        if self.training:
            self.num_batches += 1
        return out


class ConvUnit(Module):
    """conv -> optional BN -> optional ReLU, the building block of every branch."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, bn: bool = True,
                 relu: bool = True, padding: str = "same"):
        self.conv = Conv2d(in_channels, out_channels, rng, padding=padding)
        self.bn: Optional[BatchNorm2d] = BatchNorm2d(out_channels) if bn else None
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return ops.relu(x) if self.relu else x

    def fuse(self) -> None:
        """Fold the eval-mode BN affine map into the conv weights and drop the BN."""
        if self.bn is None:
            raise StructuralError("no batch-norm layer follows this convolution")
        bn = self.bn
        scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        w = self.conv.weight.data.astype(np.float64) * scale[:, None, None, None]
        b = (self.conv.bias.data.astype(np.float64) - bn.running_mean) * scale + bn.beta.data
        self.conv.weight.data = w.astype(self.conv.weight.dtype)
        self.conv.bias.data = b.astype(self.conv.bias.dtype)
        self.bn = None
