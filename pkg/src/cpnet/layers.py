"""Parameterized layers: convolution, transposed convolution, pooling,
batch normalization and dropout, each registering its backward rule on
the autodiff graph."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, grad_enabled, make_node


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Cross-correlation with bias; weight layout (C_out, C_in, kH, kW)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        k = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * k * k
        self.weight = Tensor(he_uniform((out_channels, in_channels, k, k), fan_in, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv2d expects (N,{self.in_channels},H,W), got {x.shape}")
        w, b = self.weight, self.bias
        out = _kernels.conv2d_forward(x.data, w.data, b.data, self.stride, self.padding)

        def backward(g):
            dx, dw, db = _kernels.conv2d_backward(g, x.data, w.data, self.stride, self.padding)
            if w.requires_grad:
                w._accumulate(dw)
            if b.requires_grad:
                b._accumulate(db)
            if x.requires_grad:
                x._accumulate(dx)

        return make_node(out, (x, w, b), backward, "conv2d")

    def named_params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {}


class ConvTranspose2d:
    """Learned upsampling; adjoint of a strided convolution.

    Weight layout (C_in, C_out, kH, kW); with kernel 2 and stride 2 the
    output is exactly twice the input spatially.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 2,
                 stride: int = 2, *, rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        k = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = k
        self.stride = stride
        fan_in = in_channels * k * k
        self.weight = Tensor(he_uniform((in_channels, out_channels, k, k), fan_in, rng, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv_transpose2d expects (N,{self.in_channels},H,W), got {x.shape}")
        w, b = self.weight, self.bias
        out = _kernels.conv_transpose2d_forward(x.data, w.data, b.data, self.stride)

        def backward(g):
            dx, dw, db = _kernels.conv_transpose2d_backward(g, x.data, w.data, self.stride)
            if w.requires_grad:
                w._accumulate(dw)
            if b.requires_grad:
                b._accumulate(db)
            if x.requires_grad:
                x._accumulate(dx)

        return make_node(out, (x, w, b), backward, "conv_transpose2d")

    def named_params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {}


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; gradient goes to the first-found max."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2 expects an N,C,H,W tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    out, idx = _kernels.maxpool2_forward(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(_kernels.maxpool2_backward(g, idx))

    return make_node(out, (x,), backward, "maxpool2")


class BatchNorm2d:
    """Per-channel normalization over N,H,W.

    Train mode normalizes with batch statistics and updates running
    stats as ``running = momentum * running + (1 - momentum) * batch``;
    eval mode uses the running stats only, making outputs deterministic.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-3, *, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0,1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects (N,{self.channels},H,W), got {x.shape}")
        n, c, h, w = x.shape
        m = n * h * w
        if m == 0:
            raise ValueError("batchnorm on an empty batch")
        dt = x.data.dtype
        gamma, beta = self.gamma, self.beta
        eps = dt.type(self.eps)

        if self.training:
            if m < 2:
                raise ValueError("train-mode batchnorm needs at least 2 values per channel")
            mean = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            mom = self.running_mean.dtype.type(self.momentum)
            self.running_mean = mom * self.running_mean + (1 - mom) * mean.astype(self.running_mean.dtype)
            self.running_var = mom * self.running_var + (1 - mom) * var.astype(self.running_var.dtype)
        else:
            mean = self.running_mean.astype(dt)
            var = self.running_var.astype(dt)

        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * x_hat + beta.data.reshape(1, c, 1, 1)
        train_stats = self.training

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate((g * x_hat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gi = gamma.data.reshape(1, c, 1, 1) * inv_std.reshape(1, c, 1, 1)
                if train_stats:
                    # batch statistics are functions of x, so their
                    # derivatives re-enter the input gradient
                    g_mean = g.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx_mean = (g * x_hat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    x._accumulate(gi * (g - g_mean - x_hat * gx_mean))
                else:
                    x._accumulate(gi * g)

        return make_node(out, (x, gamma, beta), backward, "batchnorm")

    def named_params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "running_mean":
            self.running_mean = value.astype(self.running_mean.dtype)
        elif name == "running_var":
            self.running_var = value.astype(self.running_var.dtype)
        else:
            raise KeyError(name)


class Dropout:
    """Inverted dropout driven by an owned, seeded generator."""

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0,1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.training = True
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            def backward_id(g):
                if x.requires_grad:
                    x._accumulate(g)
            return make_node(x.data.copy(), (x,), backward_id, "dropout")

        dt = x.data.dtype
        keep = self.rng.random(x.shape) >= self.rate
        scale = dt.type(1.0 / (1.0 - self.rate))
        mask = keep.astype(dt) * scale

        def backward(g):
            if x.requires_grad:
                x._accumulate(g * mask)

        return make_node(x.data * mask, (x,), backward, "dropout")

    def named_params(self) -> dict[str, Tensor]:
        return {}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {}
