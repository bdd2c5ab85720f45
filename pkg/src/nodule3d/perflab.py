"""Timing harness for the conv engines and batch-norm variants, plus an analytic memory model.

Benchmarks check numerical agreement between the variants before any timing is taken;
a variant that disagrees never gets a row. Memory estimates walk the layer graph of a
:class:`~nodule3d.network.ProposalNetwork` symbolically, without running it.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .exceptions import ConfigError, Nodule3dError
from .kernels import (BnScaleParams, ConvEngine, ConvWeights, batchnorm3d_backward, batchnorm3d_fused,
                      batchnorm3d_normalize, batchnorm3d_normalize_backward, conv3d_backward,
                      conv3d_forward, scale_layer, scale_layer_backward)
from .network import (BatchNorm, Conv, Deconv, MaxPool, NetworkConfig, ParamStore, ProposalNetwork, ReLU,
                      ResidualBlock, Sequential)
from .tensor import DTYPE, ConvGeometry

FLOAT_BYTES = np.dtype(DTYPE).itemsize
INDEX_BYTES = np.dtype(np.int64).itemsize
GATE_TOLERANCE = {"conv": 1e-4, "bn": 1e-6}
# ratios of the original CPU study, kept only as context for readers of a report
REFERENCE_RATIOS = {"conv": 1.88, "bn": 3.42}


class GateError(Nodule3dError, RuntimeError):
    """A benchmarked variant disagrees numerically with the reference variant."""


# ---------------------------------------------------------------------------
# memory model
# ---------------------------------------------------------------------------

@dataclass
class LayerMemory:
    name: str
    kind: str
    output_shape: Tuple[int, ...]
    activation_bytes: int
    gradient_bytes: int
    param_bytes: int = 0
    buffer_bytes: int = 0
    workspace_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return (self.activation_bytes + self.gradient_bytes + self.param_bytes + self.buffer_bytes
                + self.workspace_bytes)


@dataclass
class MemoryEstimate:
    """Per-layer byte counts for one training step.

    Activations are every layer output kept for the backward pass (max-pool
    winner indices included); gradients are one buffer per activation plus one per
    parameter. The GEMM engine shares a single im2col buffer sized by its largest
    layer; that buffer is booked on the layer that sizes it.
    """

    crop_side: int
    batch: int
    engine: str
    layers: List[LayerMemory] = field(default_factory=list)

    @property
    def activation_bytes(self) -> int:
        return sum(layer.activation_bytes for layer in self.layers)

    @property
    def gradient_bytes(self) -> int:
        return sum(layer.gradient_bytes for layer in self.layers)

    @property
    def param_bytes(self) -> int:
        return sum(layer.param_bytes for layer in self.layers)

    @property
    def buffer_bytes(self) -> int:
        return sum(layer.buffer_bytes for layer in self.layers)

    @property
    def workspace_bytes(self) -> int:
        return sum(layer.workspace_bytes for layer in self.layers)

    @property
    def total_bytes(self) -> int:
        return sum(layer.total_bytes for layer in self.layers)

    @property
    def batch_bytes(self) -> int:
        """The part that scales with batch size (activations and their gradients)."""
        return self.total_bytes - self.constant_bytes

    @property
    def constant_bytes(self) -> int:
        """Parameters, their gradients, running statistics and the per-sample im2col workspace."""
        return 2 * self.param_bytes + self.buffer_bytes + self.workspace_bytes

    @property
    def peak_bytes(self) -> int:
        # every buffer is allocated up front and kept for the whole step
        return self.total_bytes

    def to_dict(self) -> dict:
        return {
            "crop_side": self.crop_side, "batch": self.batch, "engine": self.engine,
            "activation_bytes": self.activation_bytes, "gradient_bytes": self.gradient_bytes,
            "param_bytes": self.param_bytes, "buffer_bytes": self.buffer_bytes,
            "workspace_bytes": self.workspace_bytes,
            "total_bytes": self.total_bytes, "peak_bytes": self.peak_bytes,
            "layers": [dict(asdict(layer), output_shape=list(layer.output_shape)) for layer in self.layers],
        }

    def to_text(self) -> str:
        rows = [("layer", "output", "activations", "gradients", "params", "workspace")]
        for layer in self.layers:
            rows.append((layer.name, "x".join(map(str, layer.output_shape)), _mib(layer.activation_bytes),
                         _mib(layer.gradient_bytes), _mib(layer.param_bytes + layer.buffer_bytes),
                         _mib(layer.workspace_bytes)))
        rows.append(("total", "", _mib(self.activation_bytes), _mib(self.gradient_bytes),
                     _mib(self.param_bytes + self.buffer_bytes), _mib(self.workspace_bytes)))
        out = _align(rows)
        return out + f"\npeak: {self.peak_bytes / 2 ** 30:.3f} GiB (m={self.crop_side}, batch={self.batch}, " \
                     f"engine={self.engine})"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "kind", "output_shape", "activation_bytes", "gradient_bytes", "param_bytes",
                    "buffer_bytes", "workspace_bytes"])
        for layer in self.layers:
            w.writerow([layer.name, layer.kind, "x".join(map(str, layer.output_shape)), layer.activation_bytes,
                        layer.gradient_bytes, layer.param_bytes, layer.buffer_bytes, layer.workspace_bytes])
        w.writerow(["total", "", "", self.activation_bytes, self.gradient_bytes, self.param_bytes,
                    self.buffer_bytes, self.workspace_bytes])
        return buf.getvalue()


def _mib(n: int) -> str:
    return f"{n / 2 ** 20:.2f} MiB"


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                               for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


def _numel(shape) -> int:
    return int(np.prod(shape))


class _Planner:
    """Symbolic shape walk over the network's layer objects."""

    def __init__(self, store: ParamStore, engine: str, batch: int):
        self.store = store
        self.engine = ConvEngine(engine)
        self.batch = batch
        self.layers: List[LayerMemory] = []
        self.convs: List[Tuple[Tuple[int, ...], ConvGeometry]] = []
        self.bns: List[Tuple[int, ...]] = []

    def _params(self, name: str, keys: Sequence[str]) -> int:
        return sum(self.store[f"{name}.{k}"].size for k in keys) * FLOAT_BYTES

    def _emit(self, name, kind, shape, param_bytes=0, workspace=0, extra_activation=0):
        act = _numel(shape) * FLOAT_BYTES
        self.layers.append(LayerMemory(name, kind, tuple(shape), act + extra_activation, act + param_bytes,
                                       param_bytes=param_bytes, workspace_bytes=workspace))

    def walk(self, obj, shape):
        if isinstance(obj, Conv):
            out = obj.g.output_shape(shape)
            self.convs.append((tuple(shape), obj.g))
            ws = 0
            if self.engine is ConvEngine.GEMM:
                ws = obj.g.in_channels * obj.g.kernel_volume * _numel(out[2:]) * FLOAT_BYTES
            self._emit(obj.name, "conv", out, self._params(obj.name, ("w", "b")), ws)
            return out
        if isinstance(obj, Deconv):
            w = self.store[f"{obj.name}.w"]
            out = (shape[0], w.shape[1]) + tuple((s - 1) * obj.stride + k for s, k in zip(shape[2:], w.shape[2:]))
            # the deconv scatters through a column buffer of the output side
            ws = w.shape[1] * _numel(w.shape[2:]) * _numel(shape[2:]) * FLOAT_BYTES
            self._emit(obj.name, "deconv", out, self._params(obj.name, ("w", "b")), ws)
            return out
        if isinstance(obj, BatchNorm):
            self.bns.append(tuple(shape))
            self._emit(obj.name, "batchnorm", shape, self._params(obj.name, ("gamma", "beta")))
            self.layers[-1].buffer_bytes = self._params(obj.name, ("running_mean", "running_var"))
            return shape
        if isinstance(obj, ReLU):
            self._emit("relu", "relu", shape)
            return shape
        if isinstance(obj, MaxPool):
            out = tuple(shape[:2]) + tuple((s - obj.window) // obj.stride + 1 for s in shape[2:])
            self._emit("pool", "maxpool", out, extra_activation=_numel(out) * INDEX_BYTES)
            return out
        if isinstance(obj, Sequential):
            for layer in obj.layers:
                shape = self.walk(layer, shape)
            return shape
        if isinstance(obj, ResidualBlock):
            s = shape if obj.shortcut is None else self.walk(obj.shortcut, shape)
            out = self.walk(obj.branch, shape)
            if out != s:
                raise ConfigError(f"residual shapes disagree: {out} vs {s}")
            self._emit("residual_add", "add", out)
            return self.walk(obj.out_relu, out)
        raise TypeError(f"no memory rule for {type(obj).__name__}")

    def network(self, net: ProposalNetwork, m: int):
        cfg = net.cfg
        shape = (self.batch, cfg.in_channels, m, m, m)
        shape = self.walk(net.stem, shape)
        feats = []
        for i in range(5):
            shape = self.walk(net.down[i], shape)
            feats.append(shape)
            if i < 4:
                shape = self.walk(net.pools[i], shape)
        for deconv, group, lateral in ((net.deconv1, net.up1, feats[3]), (net.deconv2, net.up2, feats[2])):
            up = self.walk(deconv, shape)
            cat = (up[0], up[1] + lateral[1]) + tuple(up[2:])
            self._emit("concat", "concat", cat)
            shape = self.walk(group, cat)
        shape = self.walk(net.head, shape)
        # only the largest im2col buffer is ever allocated; it is reused by all layers
        if self.layers:
            big = max(self.layers, key=lambda layer: layer.workspace_bytes)
            for layer in self.layers:
                if layer is not big:
                    layer.workspace_bytes = 0
        return shape


def _check_side(m: int) -> None:
    if m < 16 or m % 16:
        raise ConfigError(f"crop side {m} must be a positive multiple of 16")


class _Model:
    """A parameter-bearing network reused across many symbolic walks."""

    _cache: Dict[Tuple, ProposalNetwork] = {}

    @classmethod
    def get(cls, cfg: NetworkConfig) -> ProposalNetwork:
        key = (cfg.group_channels, cfg.blocks_per_group, cfg.anchors_mm, cfg.in_channels)
        if key not in cls._cache:
            cfg = NetworkConfig(**{**cfg.to_dict(), "crop_side": 16}).validate()
            cls._cache[key] = ProposalNetwork(cfg, ParamStore(), np.random.default_rng(0))
        return cls._cache[key]


def estimate_memory(cfg: NetworkConfig, m: Optional[int] = None, batch: int = 1,
                    engine: Optional[str] = None) -> MemoryEstimate:
    """Bytes needed for one training step at crop side ``m`` (default: ``cfg.crop_side``)."""
    m = cfg.crop_side if m is None else int(m)
    _check_side(m)
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    engine = ConvEngine(engine or cfg.engine).value
    planner = _Planner(_Model.get(cfg).store, engine, batch)
    planner.network(_Model.get(cfg), m)
    return MemoryEstimate(m, batch, engine, planner.layers)


def max_feasible_input(cfg: NetworkConfig, budget_bytes: float, batch: int = 1,
                       engine: Optional[str] = None, limit: int = 4096) -> int:
    """Largest crop side (multiple of 16) whose estimate fits in ``budget_bytes``."""
    if not budget_bytes > 0:
        raise ConfigError("memory budget must be positive")
    best = 0
    for m in range(16, limit + 1, 16):
        if estimate_memory(cfg, m, batch, engine).total_bytes > budget_bytes:
            break
        best = m
    if best == 0:
        raise ConfigError(f"budget of {budget_bytes:.0f} bytes cannot hold even a 16^3 crop")
    return best


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    name: str
    forward_ms: float
    backward_ms: float

    @property
    def total_ms(self) -> float:
        return self.forward_ms + self.backward_ms


@dataclass
class BenchReport:
    """One row per variant and a ratio row ``baseline / optimized`` (first row over second)."""

    suite: str
    rows: List[BenchRow]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def ratio(self) -> Tuple[float, float, float]:
        """(forward, backward, total) of the baseline divided by the optimized variant."""
        base, opt = self.rows[0], self.rows[1]
        return (base.forward_ms / opt.forward_ms, base.backward_ms / opt.backward_ms,
                base.total_ms / opt.total_ms)

    def table(self) -> List[Tuple[str, float, float, float]]:
        out = [(r.name, r.forward_ms, r.backward_ms, r.total_ms) for r in self.rows]
        out.append(("Performance ratio",) + self.ratio)
        return out

    def to_text(self) -> str:
        rows = [("", "Forward", "Backward", "Total")]
        rows += [(name, f"{f:.2f}", f"{b:.2f}", f"{t:.2f}") for name, f, b, t in self.table()]
        meta = ", ".join(f"{k}={v}" for k, v in self.metadata.items())
        return f"{self.suite} benchmark (ms, median)\n{_align(rows)}\n{meta}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["variant", "forward_ms", "backward_ms", "total_ms"])
        for name, f, b, t in self.table():
            w.writerow([name, f"{f:.4f}", f"{b:.4f}", f"{t:.4f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"suite": self.suite,
                "rows": [{"name": n, "forward_ms": f, "backward_ms": b, "total_ms": t} for n, f, b, t in self.table()],
                "metadata": dict(self.metadata)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _thread_count() -> int:
    counts = [info.get("num_threads", 1) for info in threadpool_info()]
    return int(max(counts)) if counts else 1


def _median_times(fwd: Callable[[], object], bwd: Callable[[], object], reps: int, warmup: int):
    for _ in range(warmup):
        fwd()
        bwd()
    tf, tb = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        fwd()
        t1 = time.perf_counter()
        bwd()
        t2 = time.perf_counter()
        tf.append((t1 - t0) * 1e3)
        tb.append((t2 - t1) * 1e3)
    return statistics.median(tf), statistics.median(tb)


def _check_reps(reps: int, warmup: int) -> None:
    if reps < 3:
        raise ConfigError(f"need at least 3 repetitions for a median, got {reps}")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")


def network_workload(cfg: NetworkConfig, m: Optional[int] = None, batch: int = 1):
    """Input shapes of every conv (with geometry) and every batch norm of the network at side ``m``."""
    m = cfg.crop_side if m is None else int(m)
    _check_side(m)
    planner = _Planner(_Model.get(cfg).store, "slice", batch)
    planner.network(_Model.get(cfg), m)
    return planner.convs, planner.bns


def _gate(name: str, ref: Sequence[np.ndarray], got: Sequence[np.ndarray], tol: float) -> float:
    worst = 0.0
    for a, b in zip(ref, got):
        worst = max(worst, float(np.max(np.abs(np.asarray(a, np.float64) - b))))
    if not worst <= tol:
        raise GateError(f"{name} deviates from the reference by {worst:.3g} (tolerance {tol:g})")
    return worst


def bench_conv(shapes: Sequence[Tuple[Tuple[int, ...], ConvGeometry]],
               engines: Sequence[str] = ("gemm", "slice"), reps: int = 3, warmup: int = 1,
               threads: Optional[int] = None, seed: int = 0) -> BenchReport:
    """Median forward/backward time of each engine over a list of ``(input shape, geometry)`` convs.

    The first engine is the baseline of the ratio row. Every engine's forward output
    and input gradient are compared with the first engine's before timing starts.
    """
    _check_reps(reps, warmup)
    engines = [ConvEngine(e).value for e in engines]
    if len(engines) != 2:
        raise ConfigError("conv benchmark compares exactly two engines")
    if not shapes:
        raise ConfigError("empty conv workload")
    rng = np.random.default_rng(seed)
    cases = []
    for shape, g in shapes:
        x = rng.standard_normal(shape).astype(DTYPE)
        w = ConvWeights(rng.normal(0, 1 / np.sqrt(g.in_channels * g.kernel_volume),
                                   (g.out_channels, g.in_channels) + g.kernel).astype(DTYPE),
                        rng.standard_normal(g.out_channels).astype(DTYPE))
        gy = rng.standard_normal(g.output_shape(shape)).astype(DTYPE)
        cases.append((x, w, g, gy))
    gate = {}
    with threadpool_limits(limits=threads):
        ref = None
        for e in engines:
            outs = []
            for x, w, g, gy in cases:
                outs.append(conv3d_forward(x, w, g, e))
                outs.append(conv3d_backward(x, w, g, gy, e)[0])
            if ref is None:
                ref = outs
            gate[e] = _gate(f"engine {e}", ref, outs, GATE_TOLERANCE["conv"])
        rows = []
        for e in engines:
            f, b = _median_times(lambda: [conv3d_forward(x, w, g, e) for x, w, g, _ in cases],
                                 lambda: [conv3d_backward(x, w, g, gy, e) for x, w, g, gy in cases],
                                 reps, warmup)
            rows.append(BenchRow(e, f, b))
        n_threads = threads or _thread_count()
    meta = {"threads": n_threads, "reps": reps, "warmup": warmup, "layers": len(cases),
            "max_abs_diff": max(gate.values()), "reference_ratio": REFERENCE_RATIOS["conv"]}
    return BenchReport("conv", rows, meta)


def bench_batchnorm(shapes: Sequence[Tuple[int, ...]], reps: int = 3, warmup: int = 1,
                    threads: Optional[int] = None, seed: int = 0) -> BenchReport:
    """Separate normalize-then-scale layers (baseline) against the fused single pass."""
    _check_reps(reps, warmup)
    if not shapes:
        raise ConfigError("empty batch-norm workload")
    rng = np.random.default_rng(seed)
    cases = []
    for shape in shapes:
        c = shape[1]
        x = rng.standard_normal(shape).astype(DTYPE)
        gy = rng.standard_normal(shape).astype(DTYPE)
        gamma = rng.uniform(0.5, 1.5, c).astype(DTYPE)
        beta = rng.standard_normal(c).astype(DTYPE)
        cases.append((x, gy, gamma, beta))

    def params(c, gamma, beta):
        return BnScaleParams(gamma, beta, np.zeros(c, gamma.dtype), np.ones(c, gamma.dtype))

    def fused_fwd(x, gy, gamma, beta):
        return batchnorm3d_fused(x, params(x.shape[1], gamma, beta), "train")

    def fused_bwd(x, gy, gamma, beta):
        return batchnorm3d_backward(x, params(x.shape[1], gamma, beta), gy, "train")

    def separate_fwd(x, gy, gamma, beta):
        return scale_layer(batchnorm3d_normalize(x, params(x.shape[1], gamma, beta), "train"), gamma, beta)

    def separate_bwd(x, gy, gamma, beta):
        p = params(x.shape[1], gamma, beta)
        xhat = batchnorm3d_normalize(x, p, "train")
        gxhat, gg, gb = scale_layer_backward(xhat, gamma, gy)
        return batchnorm3d_normalize_backward(x, p, gxhat, "train"), gg, gb

    variants = [("separate", separate_fwd, separate_bwd), ("fused", fused_fwd, fused_bwd)]
    with threadpool_limits(limits=threads):
        ref = None
        worst = 0.0
        # gamma/beta reductions span whole channels, so the gate runs in double precision
        exact = [tuple(a.astype(np.float64) for a in case) for case in cases]
        for name, fwd, bwd in variants:
            outs = []
            for case in exact:
                outs.append(fwd(*case))
                outs.extend(bwd(*case))
            if ref is None:
                ref = outs
            worst = max(worst, _gate(f"batch norm ({name})", ref, outs, GATE_TOLERANCE["bn"]))
        rows = []
        for name, fwd, bwd in variants:
            f, b = _median_times(lambda: [fwd(*c) for c in cases], lambda: [bwd(*c) for c in cases],
                                 reps, warmup)
            rows.append(BenchRow(name, f, b))
        n_threads = threads or _thread_count()
    meta = {"threads": n_threads, "reps": reps, "warmup": warmup, "layers": len(cases),
            "max_abs_diff": worst, "reference_ratio": REFERENCE_RATIOS["bn"]}
    return BenchReport("bn", rows, meta)
