"""Layers of the network engine and their per-layer quantizer state."""

import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from cdl.quant import QuantGrid


@dataclass
class LayerQuantParams:
    """
    Trainable quantizer state of one weighted layer.

    Step sizes and sharpness values are stored as logs so unconstrained
    updates keep them strictly positive.
    """

    log_q: float
    log_s: float
    log_alpha: float
    log_beta: float
    bits: int
    quantize_activations: bool
    weight_count: int
    activation_count: int = 0

    @classmethod
    def from_values(cls, q: float, s: float, alpha: float, beta: float, bits: int,
                    quantize_activations: bool, weight_count: int, activation_count: int = 0) -> "LayerQuantParams":
        return cls(
            log_q=math.log(q),
            log_s=math.log(s),
            log_alpha=math.log(alpha),
            log_beta=math.log(beta),
            bits=bits,
            quantize_activations=quantize_activations,
            weight_count=weight_count,
            activation_count=activation_count,
        )

    @property
    def q(self) -> float:
        return math.exp(self.log_q)

    @property
    def s(self) -> float:
        return math.exp(self.log_s)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    @property
    def weight_grid(self) -> QuantGrid:
        return QuantGrid(self.bits, self.q, signed=True)

    @property
    def activation_grid(self) -> QuantGrid:
        return QuantGrid(self.bits, self.s, signed=False)


class Dense:
    """Fully connected layer: y = x W^T + b, weight shaped (out, in)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, name: str = "dense",
                 weight: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
                 exempt_8bit: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = np.zeros((out_features, in_features)) if weight is None else np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(out_features) if bias is None else np.asarray(bias, dtype=np.float64)
        self.exempt_8bit = exempt_8bit
        self.quant: Optional[LayerQuantParams] = None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (self.out_features,)

    def forward(self, x: np.ndarray, weight: np.ndarray):
        return x @ weight.T + self.bias, x

    def backward(self, dout: np.ndarray, cache: np.ndarray, weight: np.ndarray):
        """Returns (d input, d weight, d bias)."""
        x = cache
        return dout @ weight, dout.T @ x, dout.sum(axis=0)


class Conv2d:
    """
    Direct 2-D convolution over (batch, channels, height, width) inputs.

    Weight is shaped (out_channels, in_channels, k, k). The loop runs over
    the k*k kernel offsets; each offset is one channel-mixing contraction
    over a strided view of the padded input.
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: Literal["same", "valid"] = "same", name: str = "conv2d",
                 weight: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
                 exempt_8bit: bool = False):
        if padding not in ("same", "valid"):
            raise ValueError(f"Unsupported padding '{padding}'")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.name = name
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = np.zeros(shape) if weight is None else np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(out_channels) if bias is None else np.asarray(bias, dtype=np.float64)
        self.exempt_8bit = exempt_8bit
        self.quant: Optional[LayerQuantParams] = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def _spatial(self, size: int) -> tuple[int, int]:
        """Output size and leading pad along one spatial axis."""
        k, s = self.kernel_size, self.stride
        if self.padding == "valid":
            return (size - k) // s + 1, 0
        out = -(-size // s)
        total = max((out - 1) * s + k - size, 0)
        return out, total // 2

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        _, height, width = input_shape
        return (self.out_channels, self._spatial(height)[0], self._spatial(width)[0])

    def _pad(self, x: np.ndarray):
        height, width = x.shape[2], x.shape[3]
        out_h, top = self._spatial(height)
        out_w, left = self._spatial(width)
        k, s = self.kernel_size, self.stride
        bottom = max((out_h - 1) * s + k - height - top, 0)
        right = max((out_w - 1) * s + k - width - left, 0)
        padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        return padded, (top, left), (out_h, out_w)

    def forward(self, x: np.ndarray, weight: np.ndarray):
        padded, offsets, (out_h, out_w) = self._pad(x)
        s = self.stride
        out = np.zeros((x.shape[0], self.out_channels, out_h, out_w))
        for i in range(self.kernel_size):
            for j in range(self.kernel_size):
                patch = padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s]
                out += np.einsum("bchw,oc->bohw", patch, weight[:, :, i, j])
        out += self.bias[None, :, None, None]
        return out, (padded, offsets, x.shape)

    def backward(self, dout: np.ndarray, cache, weight: np.ndarray):
        """Returns (d input, d weight, d bias)."""
        padded, (top, left), input_shape = cache
        s = self.stride
        out_h, out_w = dout.shape[2], dout.shape[3]
        d_padded = np.zeros_like(padded)
        d_weight = np.zeros_like(weight)
        for i in range(self.kernel_size):
            for j in range(self.kernel_size):
                window = (slice(None), slice(None), slice(i, i + s * out_h, s), slice(j, j + s * out_w, s))
                d_weight[:, :, i, j] = np.einsum("bohw,bchw->oc", dout, padded[window])
                d_padded[window] += np.einsum("bohw,oc->bchw", dout, weight[:, :, i, j])
        height, width = input_shape[2], input_shape[3]
        d_input = d_padded[:, :, top:top + height, left:left + width]
        return d_input, d_weight, dout.sum(axis=(0, 2, 3))


class ReLU:
    kind = "relu"

    def __init__(self, name: str = "relu"):
        self.name = name

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
        return np.where(cache, dout, 0.0)


class Flatten:
    kind = "flatten"

    def __init__(self, name: str = "flatten"):
        self.name = name

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        return dout.reshape(cache)


WEIGHTED_KINDS = ("dense", "conv2d")
