"""Context-preserving encoder-decoder segmentation network.

Six contracting blocks (two 3x3 convs, a channel-duplicating summation
shortcut, 2x2 max pooling on the first five), a single-conv bridge, five
expanding blocks (2x transposed conv, skip concatenation, two convs, a
summation shortcut against the concatenated tensor) and a 1x1 sigmoid
head. Channel widths double along the contracting path starting from
``base_width``; the first block reconciles its 3-channel input with a
1x1 projection shortcut instead of duplication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, maxpool2
from .tensor import Tensor, add, concat_channels, relu, sigmoid

SPATIAL_DIVISOR = 32  # five 2x pooling stages


@dataclass
class ModelConfig:
    base_width: int = 32
    input_channels: int = 3
    dropout_rate: float = 0.15

    def __post_init__(self):
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0,1)")

    def contracting_widths(self) -> list[int]:
        """Output channels of contr_B1..contr_B6."""
        return [self.base_width * (1 << k) for k in range(6)]


class SummationJoin:
    """Shortcut that re-adds a block's input to its conv output.

    The shortcut operand is chosen so channel counts line up:

    * ``duplicate``: the input is concatenated with itself (C -> 2C),
    * ``project``: a 1x1 convolution maps the input to the conv width
      (used where 2C cannot match, i.e. the first contracting block),
    * ``identity``: the operand already has the conv width (expanding
      blocks, where it is the concatenated skip tensor).

    Output is BN(ReLU(conv_output + shortcut)).
    """

    def __init__(self, mode: str, x_channels: int, h_channels: int, *,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if mode not in ("duplicate", "project", "identity"):
            raise ValueError(f"unknown summation mode {mode!r}")
        if mode == "duplicate" and h_channels != 2 * x_channels:
            raise ValueError(
                f"duplication shortcut needs h channels == 2x input channels, got {h_channels} vs {x_channels}")
        if mode == "identity" and h_channels != x_channels:
            raise ValueError(
                f"identity shortcut needs matching channels, got {h_channels} vs {x_channels}")
        self.mode = mode
        self.x_channels = x_channels
        self.h_channels = h_channels
        self.proj = Conv2d(x_channels, h_channels, 1, rng=rng, dtype=dtype) if mode == "project" else None
        self.bn = BatchNorm2d(h_channels, dtype=dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[1] != self.x_channels or h.shape[1] != self.h_channels:
            raise ValueError(
                f"summation join built for {self.x_channels}->{self.h_channels} channels, "
                f"got {x.shape[1]} and {h.shape[1]}")
        if self.mode == "duplicate":
            shortcut = concat_channels([x, x])
        elif self.mode == "project":
            shortcut = self.proj(x)
        else:
            shortcut = x
        return self.bn(relu(add(h, shortcut)))

    def components(self):
        if self.proj is not None:
            yield "proj", self.proj
        yield "bn", self.bn


class ContractBlock:
    def __init__(self, in_channels: int, out_channels: int, *, project_shortcut: bool = False,
                 with_summation: bool = True, dropout_rate: float | None = None,
                 dropout_seed: int = 0, rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv2d(in_channels, out_channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.join = None
        if with_summation:
            mode = "project" if project_shortcut else "duplicate"
            self.join = SummationJoin(mode, in_channels, out_channels, rng=rng, dtype=dtype)
        self.dropout = Dropout(dropout_rate, seed=dropout_seed) if dropout_rate else None

    def features(self, x: Tensor) -> Tensor:
        """Pre-pool block output (also the skip tensor for the decoder)."""
        h = self.bn1(relu(self.conv1(x)))
        h = self.bn2(relu(self.conv2(h)))
        if self.join is not None:
            h = self.join(x, h)
        if self.dropout is not None:
            h = self.dropout(h)
        return h

    def components(self):
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        if self.join is not None:
            for name, layer in self.join.components():
                yield f"join.{name}", layer


class ExpandBlock:
    def __init__(self, in_channels: int, skip_channels: int, *, with_summation: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if in_channels % 2:
            raise ValueError(f"expanding block input channels must be even, got {in_channels}")
        up = in_channels // 2
        z = up + skip_channels
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.out_channels = z
        self.upconv = ConvTranspose2d(in_channels, up, 2, 2, rng=rng, dtype=dtype)
        self.conv1 = Conv2d(z, z, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(z, dtype=dtype)
        self.conv2 = Conv2d(z, z, 3, 1, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(z, dtype=dtype)
        self.join = SummationJoin("identity", z, z, rng=rng, dtype=dtype) if with_summation else None

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.upconv(x)
        z = concat_channels([up, skip])
        h = self.bn1(relu(self.conv1(z)))
        h = self.bn2(relu(self.conv2(h)))
        if self.join is not None:
            h = self.join(z, h)
        return h

    def components(self):
        yield "upconv", self.upconv
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2
        if self.join is not None:
            for name, layer in self.join.components():
                yield f"join.{name}", layer


class CpnetModel:
    def __init__(self, config: ModelConfig, *, seed: int = 0, with_summation: bool = True,
                 dtype=np.float32):
        self.config = config
        self.with_summation = with_summation
        self.training = True
        rng = np.random.default_rng(seed)

        widths = config.contracting_widths()
        chain = [config.input_channels] + widths
        self.contracting: list[ContractBlock] = []
        for k in range(6):
            self.contracting.append(ContractBlock(
                chain[k], chain[k + 1],
                project_shortcut=(k == 0),
                with_summation=with_summation,
                dropout_rate=config.dropout_rate if k == 5 else None,
                dropout_seed=int(rng.integers(2 ** 63)) if k == 5 else 0,
                rng=rng, dtype=dtype))

        self.bridge_conv = Conv2d(widths[5], widths[5], 3, 1, 1, rng=rng, dtype=dtype)
        self.bridge_bn = BatchNorm2d(widths[5], dtype=dtype)

        self.expanding: list[ExpandBlock] = []
        c = widths[5]
        for j in range(5):
            blk = ExpandBlock(c, widths[4 - j], with_summation=with_summation, rng=rng, dtype=dtype)
            self.expanding.append(blk)
            c = blk.out_channels
        self.head = Conv2d(c, 1, 1, rng=rng, dtype=dtype)

    # -- structure ------------------------------------------------------

    def named_layers(self):
        for k, blk in enumerate(self.contracting, start=1):
            for name, layer in blk.components():
                yield f"contr_B{k}.{name}", layer
        yield "bridge.conv", self.bridge_conv
        yield "bridge.bn", self.bridge_bn
        for j, blk in enumerate(self.expanding, start=1):
            for name, layer in blk.components():
                yield f"exp_B{j}.{name}", layer
        yield "head", self.head

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, layer in self.named_layers():
            for pname, p in layer.named_params().items():
                out[f"{prefix}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, layer in self.named_layers():
            for bname, b in layer.named_buffers().items():
                out[f"{prefix}.{bname}"] = b
        return out

    def _walk_stateful(self):
        for blk in self.contracting:
            yield blk.bn1
            yield blk.bn2
            if blk.join is not None:
                yield blk.join.bn
            if blk.dropout is not None:
                yield blk.dropout
        yield self.bridge_bn
        for blk in self.expanding:
            yield blk.bn1
            yield blk.bn2
            if blk.join is not None:
                yield blk.join.bn
        return

    def train(self) -> "CpnetModel":
        self.training = True
        for layer in self._walk_stateful():
            layer.training = True
        return self

    def eval(self) -> "CpnetModel":
        self.training = False
        for layer in self._walk_stateful():
            layer.training = False
        return self

    def astype(self, dtype) -> "CpnetModel":
        """Switch parameter/buffer precision in place (64-bit verification mode)."""
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for prefix, layer in self.named_layers():
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # -- forward --------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"expected input (N,{self.config.input_channels},H,W), got {x.shape}")
        h_dim, w_dim = x.shape[2], x.shape[3]
        if h_dim % SPATIAL_DIVISOR or w_dim % SPATIAL_DIVISOR:
            raise ValueError(
                f"spatial dims must be divisible by {SPATIAL_DIVISOR}, got {h_dim}x{w_dim}")

        skips: list[Tensor] = []
        h = x
        for blk in self.contracting[:5]:
            s = blk.features(h)
            skips.append(s)
            h = maxpool2(s)
        h = self.contracting[5].features(h)
        h = self.bridge_bn(relu(self.bridge_conv(h)))
        for j, blk in enumerate(self.expanding):
            h = blk(h, skips[4 - j])
        return sigmoid(self.head(h))

    __call__ = forward


def build(config: ModelConfig, *, seed: int = 0, dtype=np.float32) -> CpnetModel:
    """Assemble the full network with summation shortcuts."""
    return CpnetModel(config, seed=seed, with_summation=True, dtype=dtype)


def build_baseline(config: ModelConfig, *, seed: int = 0, dtype=np.float32) -> CpnetModel:
    """Same widths and convolutions but no summation shortcuts (for
    parameter-overhead comparison)."""
    return CpnetModel(config, seed=seed, with_summation=False, dtype=dtype)


def count_parameters(model: CpnetModel) -> int:
    """Total learnable scalars (weights, biases, gamma, beta); running
    statistics are excluded."""
    return sum(p.size for p in model.named_parameters().values())
