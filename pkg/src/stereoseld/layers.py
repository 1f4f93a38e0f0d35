"""Parameter containers and common trainable layers built on the autodiff engine."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class tracking parameters, buffers, and train/eval mode.

    Child modules and parameters are discovered from instance attributes in
    insertion order, so parameter ordering (and therefore training) is
    deterministic.
    """

    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict missing entries: {sorted(missing)}")
        for name, param in expected.items():
            arr = np.asarray(state[name], dtype=param.data.dtype)
            if arr.shape != param.data.shape:
                raise ad.ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {param.data.shape}")
            param.data = arr.copy()
        for name, buf in buffers.items():
            arr = np.asarray(state[name], dtype=buf.dtype)
            if arr.shape != buf.shape:
                raise ad.ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != buffer shape {buf.shape}")
            buf[...] = arr

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map on the trailing dimension."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(_uniform(rng, (d_in, d_out), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        out = ad.matmul(ad.reshape(x, (-1, self.d_in)), self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return ad.reshape(out, lead + (self.d_out,))


class Conv2d(Module):
    """3x3-style 2-D convolution with 'same' zero padding, stride 1."""

    def __init__(self, c_in: int, c_out: int, kernel: tuple[int, int] = (3, 3),
                 bias: bool = True, padding: str = "same",
                 rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kt, kf = kernel
        bound = 1.0 / np.sqrt(c_in * kt * kf)
        self.weight = Tensor(_uniform(rng, (c_out, c_in, kt, kf), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Module):
    """Channel-wise batch normalization over [B,C,T,F].

    Training mode normalizes with batch statistics (biased variance) and
    updates running estimates; eval mode uses the running estimates, which
    start at mean 0 / var 1 so a freshly built model in eval mode is a
    pass-through up to the affine parameters.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps
        self.momentum = momentum
        self.channels = channels
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ad.ShapeError(f"batchnorm expects [B,{self.channels},T,F], got {x.shape}")
        shape = x.shape

        def expand(vec: Tensor) -> Tensor:
            return ad.broadcast_to(ad.reshape(vec, (1, self.channels, 1, 1)), shape)

        if self.training:
            mu = ad.tensor_mean(x, axis=(0, 2, 3))
            xc = ad.add(x, ad.mul(expand(mu), -1.0))
            var = ad.tensor_mean(ad.square(xc), axis=(0, 2, 3))
            m = self.momentum
            self._buffers["running_mean"] *= 1.0 - m
            self._buffers["running_mean"] += m * mu.data
            self._buffers["running_var"] *= 1.0 - m
            self._buffers["running_var"] += m * var.data
        else:
            mu = Tensor(self._buffers["running_mean"])
            var = Tensor(self._buffers["running_var"])
            xc = ad.add(x, ad.mul(expand(mu), -1.0))
        denom = expand(ad.sqrt(ad.add(var, Tensor(np.full(self.channels, self.eps)))))
        out = ad.div(xc, denom)
        return ad.add(ad.mul(out, expand(self.gamma)), expand(self.beta))
