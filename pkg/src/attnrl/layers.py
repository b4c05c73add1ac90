"""Neural building blocks shared by every policy core."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat,
    conv2d,
    max_pool2d,
    relu,
    sigmoid,
    tanh,
)


class Module:
    """Container that discovers parameters by walking its attributes.

    Any ``Tensor`` attribute with ``requires_grad`` set counts as a parameter;
    sub-modules and lists of sub-modules are searched recursively.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def uniform_param(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_param(rng, (out_features, in_features), in_features)
        self.bias = zeros_param((out_features,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def zero_(self) -> "Linear":
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0
        return self


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"linear expects last dim {layer.in_features}, got shape {x.shape}")
    out = x @ layer.weight.T
    if layer.bias is not None:
        out = out + layer.bias
    return out


class MLP(Module):
    """Stack of linear layers with ReLU between them (and optionally after)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 final_activation: bool = False):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = relu(x)
        return x


class LstmCell(Module):
    """Fully connected LSTM cell with separate gate matrices over ``[h, x]``."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        fan = input_size + hidden_size
        for gate in "fico":
            setattr(self, f"W_{gate}", uniform_param(rng, (hidden_size, fan), fan))
            setattr(self, f"b_{gate}", zeros_param((hidden_size,)))

    def __call__(self, x, h_prev, c_prev):
        return lstm_step(self, x, h_prev, c_prev)


def lstm_step(cell: LstmCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One step; accepts unbatched ``[n]`` or batched ``[B, n]`` vectors."""
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != cell.hidden_size \
            or c_prev.shape[-1] != cell.hidden_size:
        raise DimensionError(
            f"lstm shapes x={x.shape} h={h_prev.shape} c={c_prev.shape} do not match cell "
            f"({cell.input_size}->{cell.hidden_size})")
    single = x.ndim == 1
    if single:
        x, h_prev, c_prev = x.reshape(1, -1), h_prev.reshape(1, -1), c_prev.reshape(1, -1)
    hx = concat([h_prev, x], axis=-1)
    f = sigmoid(hx @ cell.W_f.T + cell.b_f)
    i = sigmoid(hx @ cell.W_i.T + cell.b_i)
    c_tilde = tanh(hx @ cell.W_c.T + cell.b_c)
    o = sigmoid(hx @ cell.W_o.T + cell.b_o)
    c = f * c_prev + i * c_tilde
    h = o * tanh(c)
    if single:
        return h.reshape(-1), c.reshape(-1)
    return h, c


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan = in_ch * kernel * kernel
        self.weight = uniform_param(rng, (out_ch, in_ch, kernel, kernel), fan)
        self.bias = zeros_param((out_ch,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding, bias=self.bias)


class ResidualBlock(Module):
    """relu → conv → relu → conv, plus the skip connection."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(relu(self.conv1(relu(x))))
        return x + y


class ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, pool: int = 2):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.pool = pool
        self.res = [ResidualBlock(out_ch, rng), ResidualBlock(out_ch, rng)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.pool > 1:
            x = max_pool2d(x, self.pool)
        for block in self.res:
            x = block(x)
        return x


class VisionNet(Module):
    """Reduced-width residual stack in the IMPALA pattern.

    Each block is conv3x3 → max-pool → two residual sub-blocks. Input is
    ``[C,H,W]`` or ``[B,C,H,W]``; stacked frames arrive as channels.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator,
                 channels: Sequence[int] = (8, 16), pool: int = 2):
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.pool = pool
        chans = (in_channels,) + self.channels
        self.blocks = [ConvBlock(a, b, rng, pool) for a, b in zip(chans[:-1], chans[1:])]

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        scale = self.pool ** len(self.blocks)
        if height % scale or width % scale:
            raise DimensionError(
                f"frame {height}x{width} incompatible with {len(self.blocks)} pooling stages "
                f"of size {self.pool}")
        return self.channels[-1], height // scale, width // scale

    def __call__(self, frames: Tensor) -> Tensor:
        return vision_forward(self, frames)


def vision_forward(net: VisionNet, frames: Tensor) -> Tensor:
    if frames.shape[-3] != net.in_channels:
        raise DimensionError(
            f"vision net expects {net.in_channels} channels, got shape {frames.shape}")
    net.output_shape(frames.shape[-2], frames.shape[-1])
    x = frames
    for block in net.blocks:
        x = block(x)
    return x


def sinusoidal_encoding(max_pos: int, d_model: int) -> Tensor:
    """Fixed sin/cos table; rows are positions, columns alternate sin, cos."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    table = np.empty((max_pos, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return Tensor(table)


def gaussian_encoding(shape: Sequence[int], sigma: float,
                      rng: np.random.Generator) -> Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return Tensor(rng.normal(0.0, sigma, size=tuple(shape)), requires_grad=True)
