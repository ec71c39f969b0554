"""Forward-only convolutional embedding network.

Four identical blocks (3x3 conv, batchnorm, ReLU, 2x2 max-pool) applied to
32x32 single-channel images. Parameters live in one flat float32 vector so
that an evolution-strategies population is just a stack of such vectors.

Tensors at the public boundary are NCHW. Internally the blocks run NHWC so
the 3x3 convolution becomes a single im2col matmul.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
INPUT_SIZE = 32
BLOCK_COUNT = 4
KERNEL = 3

CHECKPOINT_MAGIC = b"ESPN"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class ShapeError(ValueError):
    """Raised when a tensor or parameter slice does not fit a layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class ParameterSizeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class EmbeddingNet:
    channels: int = 64
    input_size: int = INPUT_SIZE
    block_count: int = BLOCK_COUNT
    in_channels: int = 1

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.input_size % (2**self.block_count):
            raise ValueError(
                f"input size {self.input_size} is not divisible by 2**{self.block_count}"
            )

    @property
    def final_size(self) -> int:
        return self.input_size // 2**self.block_count

    @property
    def embedding_dim(self) -> int:
        return self.channels * self.final_size**2

    def spatial_trace(self) -> list[int]:
        """Spatial size after each block, e.g. [16, 8, 4, 2] for 32x32 input."""
        return [self.input_size // 2 ** (k + 1) for k in range(self.block_count)]

    def layout(self) -> list[LayoutEntry]:
        entries = []
        offset = 0
        cin = self.in_channels
        for k in range(self.block_count):
            for name, shape in (
                (f"block{k}.conv", (self.channels, cin, KERNEL, KERNEL)),
                (f"block{k}.bn_gain", (self.channels,)),
                (f"block{k}.bn_bias", (self.channels,)),
            ):
                entries.append(LayoutEntry(name, offset, shape))
                offset += math.prod(shape)
            cin = self.channels
        return entries

    @property
    def param_count(self) -> int:
        return self.layout()[-1].stop


def closed_form_param_count(channels: int) -> int:
    c = channels
    return (9 * 1 * c + 2 * c) + 3 * (9 * c * c + 2 * c)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: list[LayoutEntry] = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise ParameterSizeError("parameter values must be a flat vector")
        expected = self.layout[-1].stop if self.layout else 0
        if self.values.size != expected:
            raise ParameterSizeError(
                f"parameter vector has {self.values.size} entries, layout needs {expected}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def slice(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.stop].reshape(entry.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def init_params(net: EmbeddingNet, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    layout = net.layout()
    values = np.zeros(net.param_count, dtype=np.float32)
    for entry in layout:
        if entry.name.endswith(".conv"):
            fan_in = math.prod(entry.shape[1:])
            std = math.sqrt(2.0 / fan_in)
            values[entry.offset : entry.stop] = std * rng.standard_normal(
                entry.size, dtype=np.float32
            )
        elif entry.name.endswith(".bn_gain"):
            values[entry.offset : entry.stop] = 1.0
    return ParamVector(values, layout)


# -- forward ops -------------------------------------------------------------


def _im2col_nhwc(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=np.float32)
    xp[:, 1:-1, 1:-1] = x
    cols = np.concatenate(
        [xp[:, dy : dy + h, dx : dx + w] for dy in range(KERNEL) for dx in range(KERNEL)],
        axis=-1,
    )
    return cols.reshape(b * h * w, KERNEL * KERNEL * c)


def _pool_pair(y: np.ndarray, op) -> np.ndarray:
    # y: (b, h, w, c) -> (b, h/2, w/2, c)
    b, h, w, c = y.shape
    rows = y.reshape(b, h // 2, 2, w * c)
    r = op(rows[:, :, 0], rows[:, :, 1]).reshape(b, h // 2, w // 2, 2, c)
    return op(r[:, :, :, 0], r[:, :, :, 1])


def batchnorm_stats(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel batch mean and (biased) variance of a (rows, channels) matrix."""
    n = y.shape[0]
    mean = (np.ones(n, dtype=np.float32) @ y) / np.float32(n)
    centered = y - mean
    var = np.einsum("ij,ij->j", centered, centered) / np.float32(n)
    return mean, var


def batchnorm_normalize(y: np.ndarray) -> np.ndarray:
    """Normalize a (rows, channels) matrix with its own batch statistics, no affine."""
    mean, var = batchnorm_stats(y)
    return (y - mean) / np.sqrt(var + np.float32(BN_EPS))


def _block_nhwc(x, kernel, gain, bias, layer):
    b, h, w, c = x.shape
    cout, cin = kernel.shape[:2]
    if c != cin:
        raise ShapeError(layer, f"expected {cin} input channels, got {c}")
    if h % 2 or w % 2:
        raise ShapeError(layer, f"spatial dims {h}x{w} are not divisible by 2")
    wmat = kernel.transpose(2, 3, 1, 0).reshape(KERNEL * KERNEL * cin, cout)
    y = _im2col_nhwc(x) @ wmat
    mean, var = batchnorm_stats(y)
    scale = gain / np.sqrt(var + np.float32(BN_EPS))
    shift = bias - mean * scale
    # max-pool commutes with a per-channel monotone affine map (min-pool when
    # the scale is negative), so pooling first is bit-identical and 4x cheaper
    y = y.reshape(b, h, w, cout)
    pooled = np.where(scale >= 0, _pool_pair(y, np.maximum), _pool_pair(y, np.minimum))
    out = pooled * scale + shift
    np.maximum(out, 0, out=out)
    return out


def _block_slices(params: ParamVector, k: int):
    return (
        params.slice(f"block{k}.conv"),
        params.slice(f"block{k}.bn_gain"),
        params.slice(f"block{k}.bn_bias"),
    )


def expected_block_input(net: EmbeddingNet, block: int) -> tuple[int, int, int]:
    """(channels, height, width) that block ``block`` of ``net`` consumes."""
    size = net.input_size // 2**block
    return (net.in_channels if block == 0 else net.channels, size, size)


def conv_block_forward(x: np.ndarray, block_params, layer: str = "block",
                       net: EmbeddingNet | None = None, block: int | None = None) -> np.ndarray:
    """Run one conv/batchnorm/ReLU/max-pool block on an NCHW batch.

    ``block_params`` is ``(kernel, gain, bias)`` with the kernel shaped
    ``(out_channels, in_channels, 3, 3)``. Passing ``net`` and ``block``
    also checks the input against that block's place in the shape chain.
    """
    kernel, gain, bias = block_params
    if x.ndim != 4:
        raise ShapeError(layer, f"expected a 4-d NCHW tensor, got shape {x.shape}")
    if net is not None and block is not None:
        want = expected_block_input(net, block)
        if x.shape[1:] != want:
            raise ShapeError(f"block{block}", f"expects input (batch, {want}), got {x.shape}")
    if gain.shape != (kernel.shape[0],) or bias.shape != (kernel.shape[0],):
        raise ShapeError(layer, "batchnorm gain/bias do not match conv output channels")
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=np.float32)
    out = _block_nhwc(x, kernel, gain, bias, layer)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def embed(net: EmbeddingNet, params: ParamVector, images: np.ndarray) -> np.ndarray:
    """Map a (batch, 1, 32, 32) image batch to (batch, embedding_dim) rows."""
    if params.size != net.param_count:
        raise ParameterSizeError(
            f"parameter vector has {params.size} entries, net with {net.channels} "
            f"channels needs {net.param_count}"
        )
    expected = (net.in_channels, net.input_size, net.input_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError("input", f"expected (batch, {expected}), got {images.shape}")
    x = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=np.float32)
    for k in range(net.block_count):
        x = _block_nhwc(x, *_block_slices(params, k), layer=f"block{k}")
    # flatten in NCHW order so embeddings match the channel-major convention
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).reshape(x.shape[0], -1)


def activation_bytes(net: EmbeddingNet, batch: int, bytes_per_scalar: int = 4) -> int:
    """Bytes of intermediate tensors produced by one forward pass.

    Counts the conv, batchnorm and ReLU outputs at full resolution plus the
    pooled output of every block.
    """
    total = 0
    size = net.input_size
    for _ in range(net.block_count):
        full = batch * net.channels * size * size
        size //= 2
        pooled = batch * net.channels * size * size
        total += 3 * full + pooled
    return total * bytes_per_scalar


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(path, net: EmbeddingNet, params: ParamVector) -> None:
    path = Path(path)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.channels, params.size)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(params.values.astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[EmbeddingNet, ParamVector]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, channels, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body = data[_HEADER.size :]
    if len(body) != 4 * count:
        raise CheckpointError(f"{path}: expected {count} floats, found {len(body) / 4:g}")
    net = EmbeddingNet(channels=channels)
    if net.param_count != count:
        raise CheckpointError(
            f"{path}: {count} parameters does not match a {channels}-channel net"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return net, ParamVector(values, net.layout())
