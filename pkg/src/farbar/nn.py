"""Parameter containers and the layers the vocoder is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds parameters and child modules as plain attributes.

    Parameters are discovered in attribute insertion order, which makes the
    naming (and therefore checkpoints) deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_(self) -> "Module":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=T.DEFAULT_DTYPE) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, dilation: int = 1,
                 rng: np.random.Generator | None = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = uniform_fan_in(rng, (c_out, c_in, kernel_size), c_in * kernel_size)
        self.bias = _param(np.zeros(c_out), T.DEFAULT_DTYPE) if bias else None
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, dilation=self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, kernel_size: int | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel_size or 2 * stride
        self.weight = uniform_fan_in(rng, (c_in, c_out, k), c_in * k)
        self.bias = _param(np.zeros(c_out), T.DEFAULT_DTYPE)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose1d(x, self.weight, self.bias, stride=self.stride)


def dilation_cycle(n_layers: int, max_dilation: int = 32) -> list[int]:
    """``[1, 2, 4, ..., max, 1, 2, ...]`` truncated to ``n_layers``."""
    cycle = []
    d = 1
    while d <= max_dilation:
        cycle.append(d)
        d *= 2
    return [cycle[i % len(cycle)] for i in range(n_layers)]


class WN(Module):
    """Stack of dilated gated convolutions with local conditioning.

    Each layer computes ``gate = tanh(a) * sigmoid(b)`` where ``[a; b]`` is the
    dilated convolution of the residual stream plus a 1x1 projection of the
    conditioning sequence.  A 1x1 layer splits the gate output into a residual
    update and a skip contribution; the module returns the summed skips.
    """

    def __init__(self, channels: int, cond_channels: int, n_layers: int, kernel_size: int = 3,
                 max_dilation: int = 32, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.dilations = dilation_cycle(n_layers, max_dilation)
        self.in_layers = [Conv1d(channels, 2 * channels, kernel_size, d, rng) for d in self.dilations]
        self.cond_layers = [Conv1d(cond_channels, 2 * channels, 1, 1, rng) for _ in self.dilations]
        # the last layer only feeds the skip path
        self.res_skip_layers = [
            Conv1d(channels, 2 * channels if i < n_layers - 1 else channels, 1, 1, rng)
            for i in range(n_layers)
        ]

    @property
    def n_layers(self) -> int:
        return len(self.dilations)

    def condition(self, f: Tensor) -> list[Tensor]:
        """Per-layer conditioning projections; reusable across calls with the same ``f``."""
        return [layer(f) for layer in self.cond_layers]

    def __call__(self, x: Tensor, f: Tensor | None = None, cond: list[Tensor] | None = None) -> Tensor:
        if cond is None:
            cond = self.condition(f)
        c = self.channels
        skip = None
        for i in range(self.n_layers):
            acts = T.add(self.in_layers[i](x), cond[i])
            gate = T.gated_activation(T.slice_channels(acts, 0, c), T.slice_channels(acts, c, 2 * c))
            rs = self.res_skip_layers[i](gate)
            if i < self.n_layers - 1:
                x = T.add(x, T.slice_channels(rs, 0, c))
                part = T.slice_channels(rs, c, 2 * c)
            else:
                part = rs
            skip = part if skip is None else T.add(skip, part)
        return skip
