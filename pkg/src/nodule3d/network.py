"""The proposal network: residual down path, deconvolution up path, anchor head.

Topology for a crop of side ``m`` (channels from ``NetworkConfig``)::

    stem conv -> group1 -> pool -> group2 -> pool -> group3 -> pool -> group4
      -> pool -> group5 -> deconv x2 ++ group4 -> up group -> deconv x2 ++ group3
      -> up group -> 1x1x1 head conv -> (n, m/4, m/4, m/4, A, 5)

``++`` is channel concatenation (upsampled first, lateral second). Each deconv
is followed by BN and ReLU.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DataError, ShapeError
from .kernels import (BnScaleParams, ConvEngine, ConvWeights, batchnorm3d_backward, batchnorm3d_fused,
                      conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, maxpool3d,
                      maxpool3d_backward, relu, relu_backward)
from .tensor import DTYPE, ConvGeometry

HEAD_VALUES = 5


@dataclass
class NetworkConfig:
    group_channels: Tuple[int, ...] = (24, 32, 64, 64, 64)
    blocks_per_group: Tuple[int, ...] = (2, 2, 3, 3, 3)
    anchors_mm: Tuple[float, ...] = (10.0, 30.0, 60.0)
    crop_side: int = 128
    in_channels: int = 1
    head_values_per_anchor: int = HEAD_VALUES
    engine: str = "gemm"

    def __post_init__(self):
        self.group_channels = tuple(int(c) for c in self.group_channels)
        self.blocks_per_group = tuple(int(b) for b in self.blocks_per_group)
        self.anchors_mm = tuple(float(a) for a in self.anchors_mm)

    def validate(self) -> "NetworkConfig":
        if len(self.group_channels) != 5 or len(self.blocks_per_group) != 5:
            raise ConfigError("group_channels and blocks_per_group need exactly 5 entries")
        if min(self.group_channels) < 1 or min(self.blocks_per_group) < 1:
            raise ConfigError("channel and block counts must be >= 1")
        if not self.anchors_mm:
            raise ConfigError("at least one anchor is required")
        if min(self.anchors_mm) <= 0:
            raise ConfigError("anchor diameters must be positive")
        if self.crop_side < 16 or self.crop_side % 16:
            raise ConfigError(f"crop side {self.crop_side} must be a positive multiple of 16")
        if self.head_values_per_anchor != HEAD_VALUES:
            raise ConfigError("the head always emits 5 values per anchor")
        ConvEngine(self.engine)
        return self

    @property
    def n_anchors(self) -> int:
        return len(self.anchors_mm)

    @property
    def head_side(self) -> int:
        return self.crop_side // 4

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class HeadOutput:
    """Per-cell, per-anchor ``(logit, t_x, t_y, t_z, t_d)`` of shape (n, s, s, s, A, 5).

    Spatial axes are (z, y, x) grid cells.
    """

    grid: np.ndarray

    def __post_init__(self):
        if self.grid.ndim != 6 or self.grid.shape[-1] != HEAD_VALUES:
            raise ShapeError(f"head grid must be (n, s, s, s, A, 5), got {self.grid.shape}")

    @property
    def logits(self) -> np.ndarray:
        return self.grid[..., 0]

    @property
    def offsets(self) -> np.ndarray:
        return self.grid[..., 1:]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered named parameters, each with one gradient buffer, plus non-trainable buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.ascontiguousarray(value, dtype=DTYPE)
        return self.buffers[name]

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad.reshape(self.grads[name].shape)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters then buffers, in registration order."""
        return list(self.params.items()) + list(self.buffers.items())

    def astype(self, dtype) -> None:
        """Re-store every array with ``dtype`` in place of the current ones."""
        for store in (self.params, self.grads, self.buffers):
            for k in store:
                store[k] = store[k].astype(dtype)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.params[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        for k, v in self.buffers.items():
            out.buffers[k] = v.copy()
        return out

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> None:
        for name, target in self.named_arrays():
            if name not in arrays:
                if strict:
                    raise DataError(f"checkpoint is missing {name!r}")
                continue
            value = arrays[name]
            if value.shape != target.shape:
                raise DataError(f"checkpoint entry {name!r} has shape {value.shape}, expected {target.shape}")
            target[...] = value


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, store: ParamStore, name: str, g: ConvGeometry, rng: np.random.Generator,
                 engine: str = "gemm", init_gain: float = 1.0):
        self.store, self.name, self.g, self.engine = store, name, g, engine
        fan_in = g.in_channels * g.kernel_volume
        store.add(f"{name}.w", rng.normal(0.0, init_gain / np.sqrt(fan_in),
                                          (g.out_channels, g.in_channels) + g.kernel))
        store.add(f"{name}.b", np.zeros(g.out_channels))
        self._x = None

    def weights(self) -> ConvWeights:
        return ConvWeights(self.store[f"{self.name}.w"], self.store[f"{self.name}.b"])

    def forward(self, x, mode="train"):
        self._x = x
        return conv3d_forward(x, self.weights(), self.g, self.engine)

    def backward(self, gy):
        gx, gw = conv3d_backward(self._x, self.weights(), self.g, gy, self.engine)
        self.store.accumulate(f"{self.name}.w", gw.w)
        self.store.accumulate(f"{self.name}.b", gw.bias)
        return gx


class Deconv:
    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, kernel: int = 2, stride: int = 2):
        self.store, self.name, self.stride = store, name, stride
        fan_in = in_channels * kernel ** 3 // stride ** 3
        store.add(f"{name}.w", rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                          (in_channels, out_channels) + (kernel,) * 3))
        store.add(f"{name}.b", np.zeros(out_channels))
        self._x = None

    def weights(self) -> ConvWeights:
        return ConvWeights(self.store[f"{self.name}.w"], self.store[f"{self.name}.b"])

    def forward(self, x, mode="train"):
        self._x = x
        return deconv3d_forward(x, self.weights(), self.stride)

    def backward(self, gy):
        gx, gw = deconv3d_backward(self._x, self.weights(), gy, self.stride)
        self.store.accumulate(f"{self.name}.w", gw.w)
        self.store.accumulate(f"{self.name}.b", gw.bias)
        return gx


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, eps=1e-5, momentum=0.1):
        self.store, self.name, self.eps, self.momentum = store, name, eps, momentum
        store.add(f"{name}.gamma", np.ones(channels))
        store.add(f"{name}.beta", np.zeros(channels))
        store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        store.add_buffer(f"{name}.running_var", np.ones(channels))
        self._x = None
        self._mode = "train"

    def params(self) -> BnScaleParams:
        s, n = self.store, self.name
        return BnScaleParams(s[f"{n}.gamma"], s[f"{n}.beta"], s[f"{n}.running_mean"],
                             s[f"{n}.running_var"], self.eps, self.momentum)

    def forward(self, x, mode="train"):
        self._x, self._mode = x, mode
        return batchnorm3d_fused(x, self.params(), mode)

    def backward(self, gy):
        gx, gg, gb = batchnorm3d_backward(self._x, self.params(), gy, self._mode)
        self.store.accumulate(f"{self.name}.gamma", gg)
        self.store.accumulate(f"{self.name}.beta", gb)
        return gx


class ReLU:
    def forward(self, x, mode="train"):
        self._x = x
        return relu(x)

    def backward(self, gy):
        return relu_backward(self._x, gy)


class MaxPool:
    def __init__(self, window=2, stride=2):
        self.window, self.stride = window, stride

    def forward(self, x, mode="train"):
        y, self._arg = maxpool3d(x, self.window, self.stride)
        self._shape = x.shape
        return y

    def backward(self, gy):
        return maxpool3d_backward(self._arg, gy, self._shape)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, mode="train"):
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


class ResidualBlock:
    """``relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))``.

    The shortcut is the identity, or a 1x1x1 conv + BN projection when widths differ.
    """

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, engine: str = "gemm", project: Optional[bool] = None):
        self.branch = Sequential([
            Conv(store, f"{name}.conv1", ConvGeometry(in_channels, out_channels, 3, 1, 1), rng, engine),
            BatchNorm(store, f"{name}.bn1", out_channels),
            ReLU(),
            Conv(store, f"{name}.conv2", ConvGeometry(out_channels, out_channels, 3, 1, 1), rng, engine),
            BatchNorm(store, f"{name}.bn2", out_channels),
        ])
        if project is None:
            project = in_channels != out_channels
        if not project and in_channels != out_channels:
            raise ConfigError(f"block {name}: {in_channels} -> {out_channels} channels needs a projection")
        self.shortcut = Sequential([
            Conv(store, f"{name}.proj", ConvGeometry(in_channels, out_channels, 1), rng, engine),
            BatchNorm(store, f"{name}.proj_bn", out_channels),
        ]) if project else None
        self.out_relu = ReLU()
        self.in_channels = in_channels

    def forward(self, x, mode="train"):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"residual block expects {self.in_channels} channels, got {x.shape[1]}")
        s = x if self.shortcut is None else self.shortcut.forward(x, mode)
        return self.out_relu.forward(self.branch.forward(x, mode) + s, mode)

    def backward(self, gy):
        g = self.out_relu.backward(gy)
        gx = self.branch.backward(g)
        if self.shortcut is None:
            return gx + g
        return gx + self.shortcut.backward(g)


def residual_group(store, name, in_channels, out_channels, blocks, rng, engine) -> Sequential:
    return Sequential(
        ResidualBlock(store, f"{name}.block{i}", in_channels if i == 0 else out_channels,
                      out_channels, rng, engine)
        for i in range(blocks)
    )


def skip_combine(up: np.ndarray, lateral: np.ndarray) -> np.ndarray:
    """Concatenate along channels, upsampled operand first."""
    if up.shape[0] != lateral.shape[0] or up.shape[2:] != lateral.shape[2:]:
        raise ShapeError(f"cannot combine {up.shape} with lateral {lateral.shape}")
    return np.concatenate([up, lateral], axis=1)


def skip_split(grad: np.ndarray, up_channels: int) -> Tuple[np.ndarray, np.ndarray]:
    return grad[:, :up_channels], grad[:, up_channels:]


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class ProposalNetwork:
    """Executable graph bound to a :class:`ParamStore`. Not re-entrant."""

    def __init__(self, cfg: NetworkConfig, store: ParamStore, rng: np.random.Generator):
        self.cfg = cfg
        self.store = store
        c = cfg.group_channels
        b = cfg.blocks_per_group
        e = cfg.engine
        self.stem = Sequential([
            Conv(store, "stem.conv", ConvGeometry(cfg.in_channels, c[0], 3, 1, 1), rng, e),
            BatchNorm(store, "stem.bn", c[0]),
            ReLU(),
        ])
        self.down = []
        prev = c[0]
        for i in range(5):
            self.down.append(residual_group(store, f"group{i + 1}", prev, c[i], b[i], rng, e))
            prev = c[i]
        self.pools = [MaxPool(2, 2) for _ in range(4)]
        # each deconv is followed by BN + ReLU so the up path stays normalised
        self.deconv1 = Sequential([Deconv(store, "up1.deconv", c[4], c[4], rng),
                                   BatchNorm(store, "up1.deconv_bn", c[4]), ReLU()])
        self.up1 = residual_group(store, "up1", c[4] + c[3], c[3], b[3], rng, e)
        self.deconv2 = Sequential([Deconv(store, "up2.deconv", c[3], c[3], rng),
                                   BatchNorm(store, "up2.deconv_bn", c[3]), ReLU()])
        self.up2 = residual_group(store, "up2", c[3] + c[2], c[2], b[2], rng, e)
        # small head init keeps early logits/offsets near zero
        self.head = Conv(store, "head.conv",
                         ConvGeometry(c[2], cfg.n_anchors * HEAD_VALUES, 1), rng, e, init_gain=0.1)

    def forward(self, crop: np.ndarray, mode: str = "train") -> HeadOutput:
        m = self.cfg.crop_side
        if crop.ndim != 5 or crop.shape[1] != self.cfg.in_channels or crop.shape[2:] != (m, m, m):
            raise ShapeError(f"expected crops of shape (n, {self.cfg.in_channels}, {m}, {m}, {m}), got {crop.shape}")
        x = self.stem.forward(crop, mode)
        feats = []
        for i in range(5):
            x = self.down[i].forward(x, mode)
            feats.append(x)
            if i < 4:
                x = self.pools[i].forward(x, mode)
        x = self.up1.forward(skip_combine(self.deconv1.forward(x, mode), feats[3]), mode)
        x = self.up2.forward(skip_combine(self.deconv2.forward(x, mode), feats[2]), mode)
        y = self.head.forward(x, mode)
        n, _, s, _, _ = y.shape
        grid = y.reshape(n, self.cfg.n_anchors, HEAD_VALUES, s, s, s).transpose(0, 3, 4, 5, 1, 2)
        return HeadOutput(np.ascontiguousarray(grid))

    def backward(self, head_grad: np.ndarray) -> None:
        """Accumulate parameter gradients of ``sum(head.grid * head_grad)`` into the store."""
        n, s = head_grad.shape[:2]
        gy = np.ascontiguousarray(head_grad.transpose(0, 4, 5, 1, 2, 3)).reshape(
            n, self.cfg.n_anchors * HEAD_VALUES, s, s, s)
        c = self.cfg.group_channels
        g = self.up2.backward(self.head.backward(gy))
        g_up, g_lat3 = skip_split(g, c[3])
        g = self.up1.backward(self.deconv2.backward(g_up))
        g_up, g_lat4 = skip_split(g, c[4])
        g = self.deconv1.backward(g_up)
        lateral = {2: g_lat3, 3: g_lat4}
        for i in reversed(range(5)):
            if i < 4:
                g = self.pools[i].backward(g)
            if i in lateral:
                g = g + lateral[i]
            g = self.down[i].backward(g)
        self.stem.backward(g)

    def set_engine(self, engine: str) -> None:
        engine = ConvEngine(engine).value
        for layer in self._convs():
            layer.engine = engine
        self.cfg.engine = engine

    def _convs(self):
        def walk(obj):
            if isinstance(obj, Conv):
                yield obj
            elif isinstance(obj, Sequential):
                for layer in obj.layers:
                    yield from walk(layer)
            elif isinstance(obj, ResidualBlock):
                yield from walk(obj.branch)
                if obj.shortcut is not None:
                    yield from walk(obj.shortcut)
        yield from walk(self.stem)
        for grp in self.down:
            yield from walk(grp)
        yield from walk(self.up1)
        yield from walk(self.up2)
        yield self.head


def build_network(cfg: NetworkConfig, rng_seed: int = 0) -> Tuple[ProposalNetwork, ParamStore]:
    cfg.validate()
    store = ParamStore()
    net = ProposalNetwork(cfg, store, np.random.default_rng(rng_seed))
    return net, store


def head_shape(cfg: NetworkConfig, batch: int = 1) -> Tuple[int, ...]:
    cfg.validate()
    s = cfg.head_side
    return (batch, s, s, s, cfg.n_anchors, HEAD_VALUES)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VPCK"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, arrays: Sequence[Tuple[str, np.ndarray]]) -> None:
    """Write named float32 arrays in the given order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a VPCK checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(DTYPE)
            pos += 4 * count
            out[name] = arr.reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    return out


def save_store(path, store: ParamStore, extra: Sequence[Tuple[str, np.ndarray]] = ()) -> None:
    write_checkpoint(path, store.named_arrays() + list(extra))


def load_store(path, store: ParamStore) -> "OrderedDict[str, np.ndarray]":
    """Load parameters and buffers into ``store``; returns the full entry map (incl. extras)."""
    arrays = read_checkpoint(path)
    store.load_arrays(arrays)
    return arrays
