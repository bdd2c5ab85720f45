"""Forward and backward 3-D network primitives.

Convolution comes in three interchangeable engines:

* ``ConvEngine.GEMM`` lowers each sample with :func:`~nodule3d.tensor.im2col_3d`
  and multiplies by the flattened kernel.
* ``ConvEngine.SLICE`` walks output depth slices; each one is the sum of ``kd``
  2-D convolutions between input depth slices and kernel depth slices.
* ``ConvEngine.NAIVE`` is a direct per-output-voxel loop used as the oracle.

All accumulation happens in float64; results are stored as float32.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import CorruptionError, DegenerateInputError, GeometryError, ShapeError
from .tensor import DTYPE, ConvGeometry, _pad_spatial, _triple, col2im_3d, gemm, im2col_3d, storage_dtype


class ConvEngine(str, enum.Enum):
    GEMM = "gemm"
    SLICE = "slice"
    NAIVE = "naive"


@dataclass
class ConvWeights:
    """Kernel of shape (out, in, kd, kh, kw) and one bias per output channel.

    Deconvolutions reuse this holder with the kernel laid out (in, out, kd, kh, kw).
    """

    w: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        dt = storage_dtype(self.w)
        self.w = np.ascontiguousarray(self.w, dtype=dt)
        self.bias = np.ascontiguousarray(self.bias, dtype=dt)
        if self.w.ndim != 5 or self.bias.ndim != 1:
            raise ShapeError(f"weight shape {self.w.shape} / bias shape {self.bias.shape} mismatch")

    @classmethod
    def zeros_like_geometry(cls, g: ConvGeometry) -> "ConvWeights":
        return cls(np.zeros((g.out_channels, g.in_channels) + g.kernel, DTYPE),
                   np.zeros(g.out_channels, DTYPE))

    def check(self, g: ConvGeometry) -> None:
        expected = (g.out_channels, g.in_channels) + g.kernel
        if self.w.shape != expected:
            raise ShapeError(f"weights {self.w.shape} do not match geometry {expected}")
        if self.bias.shape != (g.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {g.out_channels} outputs")


@dataclass
class BnScaleParams:
    """Batch-norm statistics fused with the following per-channel scale/shift."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=storage_dtype(self.gamma)))
        c = self.gamma.shape
        if any(getattr(self, n).shape != c for n in ("beta", "running_mean", "running_var")):
            raise ShapeError("batch-norm parameter vectors must share one shape")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, **kw) -> "BnScaleParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), **kw)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv(x: np.ndarray, w: ConvWeights, g: ConvGeometry):
    if x.ndim != 5:
        raise ShapeError(f"expected Tensor5 input, got shape {x.shape}")
    w.check(g)
    return g.output_shape(x.shape)


def _windows(start: int, extent: int, stride: int) -> slice:
    return slice(start, start + stride * (extent - 1) + 1, stride)


def _conv_gemm(x, w, g, out_shape):
    n, o = out_shape[:2]
    wmat = w.w.reshape(o, -1)
    y = np.empty(out_shape, storage_dtype(x, w.w))
    for s in range(n):
        cols = im2col_3d(x[s:s + 1], g)
        y[s] = gemm(wmat, cols).reshape(out_shape[1:])
    y += w.bias.reshape(1, -1, 1, 1, 1)
    return y


def _conv2d_accumulate(out, slab, w2, oh, ow, sh, sw):
    """out(N, O, oh, ow) += 2-D convolution of slab(N, C, Hp, Wp) with w2(O, C, kh, kw)."""
    _, _, kh, kw = w2.shape
    for j in range(kh):
        for k in range(kw):
            win = slab[:, :, _windows(j, oh, sh), _windows(k, ow, sw)]
            out += np.einsum("oc,nchw->nohw", w2[:, :, j, k], win, optimize=True)


def _conv_slice(x, w, g, out_shape):
    _, _, od, oh, ow = out_shape
    kd = g.kernel[0]
    sd, sh, sw = g.stride
    xp = _pad_spatial(x, g.pad).astype(np.float64)
    w64 = w.w.astype(np.float64)
    y = np.zeros(out_shape, np.float64)
    for d in range(od):
        acc = y[:, :, d]
        for i in range(kd):
            _conv2d_accumulate(acc, xp[:, :, d * sd + i], w64[:, :, i], oh, ow, sh, sw)
    y += w.bias.reshape(1, -1, 1, 1, 1)
    return y.astype(storage_dtype(x, w.w))


def _conv_naive(x, w, g, out_shape):
    n, _, od, oh, ow = out_shape
    kd, kh, kw = g.kernel
    sd, sh, sw = g.stride
    xp = _pad_spatial(x, g.pad).astype(np.float64)
    w64 = w.w.astype(np.float64)
    y = np.empty(out_shape, np.float64)
    for s in range(n):
        for d in range(od):
            for h in range(oh):
                for v in range(ow):
                    patch = xp[s, :, d * sd:d * sd + kd, h * sh:h * sh + kh, v * sw:v * sw + kw]
                    y[s, :, d, h, v] = np.tensordot(w64, patch, axes=4)
    y += w.bias.reshape(1, -1, 1, 1, 1)
    return y.astype(storage_dtype(x, w.w))


_FORWARD = {ConvEngine.GEMM: _conv_gemm, ConvEngine.SLICE: _conv_slice, ConvEngine.NAIVE: _conv_naive}


def conv3d_forward(x: np.ndarray, w: ConvWeights, g: ConvGeometry,
                   engine: ConvEngine | str = ConvEngine.GEMM) -> np.ndarray:
    """Cross-correlate ``x`` with ``w.w`` and add ``w.bias``; out-of-range reads are zero."""
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    out_shape = _check_conv(x, w, g)
    return _FORWARD[ConvEngine(engine)](x, w, g, out_shape)


def _conv_gemm_backward(x, w, g, gy):
    n, o = gy.shape[:2]
    wmat = w.w.reshape(o, -1)
    wmat_t = np.ascontiguousarray(wmat.T)
    dt = storage_dtype(x, w.w, gy)
    gw = np.zeros(wmat.shape, dt)
    gx = np.empty(x.shape, dt)
    for s in range(n):
        cols = im2col_3d(x[s:s + 1], g)
        gy_mat = gy[s].reshape(o, -1)
        gw = gemm(gy_mat, cols.T, accumulate_into=gw)
        gx[s] = col2im_3d(gemm(wmat_t, gy_mat), g, (1,) + x.shape[1:])[0]
    return gx, gw.reshape(w.w.shape)


def _conv_slice_backward(x, w, g, gy):
    _, _, od, oh, ow = gy.shape
    kd, kh, kw = g.kernel
    sd, sh, sw = g.stride
    pd, ph, pw = g.pad
    xp = _pad_spatial(x, g.pad).astype(np.float64)
    w64 = w.w.astype(np.float64)
    gy64 = gy.astype(np.float64)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w64)
    for d in range(od):
        gslice = gy64[:, :, d]
        for i in range(kd):
            slab = xp[:, :, d * sd + i]
            gslab = gxp[:, :, d * sd + i]
            for j in range(kh):
                for k in range(kw):
                    hs, ws = _windows(j, oh, sh), _windows(k, ow, sw)
                    gw[:, :, i, j, k] += np.einsum("nohw,nchw->oc", gslice, slab[:, :, hs, ws], optimize=True)
                    gslab[:, :, hs, ws] += np.einsum("nohw,oc->nchw", gslice, w64[:, :, i, j, k], optimize=True)
    _, _, d_, h_, w_ = x.shape
    gx = gxp[:, :, pd:pd + d_, ph:ph + h_, pw:pw + w_]
    dt = storage_dtype(x, w.w, gy)
    return gx.astype(dt), gw.astype(dt)


def _conv_naive_backward(x, w, g, gy):
    n, _, od, oh, ow = gy.shape
    kd, kh, kw = g.kernel
    sd, sh, sw = g.stride
    pd, ph, pw = g.pad
    xp = _pad_spatial(x, g.pad).astype(np.float64)
    w64 = w.w.astype(np.float64)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w64)
    for s in range(n):
        for d in range(od):
            for h in range(oh):
                for v in range(ow):
                    sl = (s, slice(None), slice(d * sd, d * sd + kd),
                          slice(h * sh, h * sh + kh), slice(v * sw, v * sw + kw))
                    gvec = gy[s, :, d, h, v].astype(np.float64)
                    gw += gvec[:, None, None, None, None] * xp[sl][None]
                    gxp[sl] += np.tensordot(gvec, w64, axes=1)
    _, _, d_, h_, w_ = x.shape
    dt = storage_dtype(x, w.w, gy)
    return gxp[:, :, pd:pd + d_, ph:ph + h_, pw:pw + w_].astype(dt), gw.astype(dt)


_BACKWARD = {ConvEngine.GEMM: _conv_gemm_backward, ConvEngine.SLICE: _conv_slice_backward,
             ConvEngine.NAIVE: _conv_naive_backward}


def conv3d_backward(x: np.ndarray, w: ConvWeights, g: ConvGeometry, grad_y: np.ndarray,
                    engine: ConvEngine | str = ConvEngine.GEMM) -> Tuple[np.ndarray, ConvWeights]:
    """Gradients of ``sum(conv3d_forward(x) * grad_y)`` w.r.t. ``x``, kernel and bias."""
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    out_shape = _check_conv(x, w, g)
    grad_y = np.ascontiguousarray(grad_y, dtype=storage_dtype(grad_y))
    if grad_y.shape != out_shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match conv output {out_shape}")
    gx, gw = _BACKWARD[ConvEngine(engine)](x, w, g, grad_y)
    gb = grad_y.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(gx.dtype)
    return gx, ConvWeights(gw, gb)


# ---------------------------------------------------------------------------
# transposed convolution
# ---------------------------------------------------------------------------

def _deconv_geometry(w: ConvWeights, stride) -> ConvGeometry:
    # the deconv is the adjoint of this convolution (big -> small)
    c_in, c_out = w.w.shape[:2]
    return ConvGeometry(in_channels=c_out, out_channels=c_in, kernel=w.w.shape[2:], stride=_triple(stride))


def deconv3d_output_shape(in_shape, w: ConvWeights, stride=2):
    n, c, *spatial = in_shape
    if c != w.w.shape[0]:
        raise ShapeError(f"deconv input has {c} channels, weights expect {w.w.shape[0]}")
    stride = _triple(stride)
    return (n, w.w.shape[1]) + tuple((s - 1) * st + k for s, st, k in zip(spatial, stride, w.w.shape[2:]))


def deconv3d_forward(x: np.ndarray, w: ConvWeights, stride=2) -> np.ndarray:
    """Transposed convolution; ``w.w`` has shape (in, out, kd, kh, kw), ``w.bias`` has ``out`` entries."""
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    if w.bias.shape != (w.w.shape[1],):
        raise ShapeError(f"deconv bias shape {w.bias.shape} does not match {w.w.shape[1]} outputs")
    out_shape = deconv3d_output_shape(x.shape, w, stride)
    g = _deconv_geometry(w, stride)
    c_in = x.shape[1]
    wmat_t = np.ascontiguousarray(w.w.reshape(c_in, -1).T)
    y = np.empty(out_shape, storage_dtype(x, w.w))
    for s in range(x.shape[0]):
        cols = gemm(wmat_t, x[s].reshape(c_in, -1))
        y[s] = col2im_3d(cols, g, (1,) + out_shape[1:])[0]
    y += w.bias.reshape(1, -1, 1, 1, 1)
    return y


def deconv3d_backward(x: np.ndarray, w: ConvWeights, grad_y: np.ndarray,
                      stride=2) -> Tuple[np.ndarray, ConvWeights]:
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    out_shape = deconv3d_output_shape(x.shape, w, stride)
    grad_y = np.ascontiguousarray(grad_y, dtype=storage_dtype(grad_y))
    if grad_y.shape != out_shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} does not match deconv output {out_shape}")
    g = _deconv_geometry(w, stride)
    c_in = x.shape[1]
    wmat = w.w.reshape(c_in, -1)
    dt = storage_dtype(x, w.w, grad_y)
    gx = np.empty(x.shape, dt)
    gw = np.zeros(wmat.shape, dt)
    for s in range(x.shape[0]):
        cols = im2col_3d(grad_y[s:s + 1], g)
        xmat = x[s].reshape(c_in, -1)
        gx[s] = gemm(wmat, cols).reshape(x.shape[1:])
        gw = gemm(xmat, cols.T, accumulate_into=gw)
    gb = grad_y.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dt)
    return gx, ConvWeights(gw.reshape(w.w.shape), gb)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def maxpool3d(x: np.ndarray, window=2, stride=2) -> Tuple[np.ndarray, np.ndarray]:
    """Max over each window; also returns the flat input index of every winner.

    Ties go to the lowest flat index, i.e. the first tap in (kd, kh, kw) order.
    """
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    kd, kh, kw = _triple(window)
    sd, sh, sw = _triple(stride)
    if min(kd, kh, kw, sd, sh, sw) < 1:
        raise GeometryError("pooling window and stride must be >= 1")
    n, c, d, h, w = x.shape
    od, oh, ow = (d - kd) // sd + 1, (h - kh) // sh + 1, (w - kw) // sw + 1
    if min(od, oh, ow) < 1 or min(d - kd, h - kh, w - kw) < 0:
        raise GeometryError(f"pool window {(kd, kh, kw)} too large for input {x.shape}")
    base = (np.arange(n * c).reshape(n, c, 1, 1, 1) * d
            + (np.arange(od) * sd).reshape(1, 1, -1, 1, 1)) * h
    base = (base + (np.arange(oh) * sh).reshape(1, 1, 1, -1, 1)) * w + (np.arange(ow) * sw).reshape(1, 1, 1, 1, -1)
    best = None
    arg = None
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                tap = x[:, :, _windows(i, od, sd), _windows(j, oh, sh), _windows(k, ow, sw)]
                offset = (i * h + j) * w + k
                if best is None:
                    best = tap.copy()
                    arg = base + offset
                else:
                    better = tap > best
                    best = np.where(better, tap, best)
                    arg = np.where(better, base + offset, arg)
    return best, arg.astype(np.int64)


def maxpool3d_backward(argmax: np.ndarray, grad_y: np.ndarray, in_shape) -> np.ndarray:
    """Route each upstream gradient to its recorded winner; overlaps accumulate."""
    in_shape = tuple(int(s) for s in in_shape)
    argmax = np.asarray(argmax)
    if argmax.shape != np.shape(grad_y):
        raise ShapeError(f"argmax map {argmax.shape} and grad_y {np.shape(grad_y)} differ")
    size = int(np.prod(in_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise CorruptionError("argmax map references positions outside the input tensor")
    gx = np.bincount(argmax.ravel(), weights=np.asarray(grad_y, np.float64).ravel(), minlength=size)
    return gx.astype(storage_dtype(grad_y)).reshape(in_shape)


# ---------------------------------------------------------------------------
# batch norm + scale
# ---------------------------------------------------------------------------

def _check_bn(x: np.ndarray, params: BnScaleParams, axes) -> int:
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batch-norm params have {params.channels}")
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DegenerateInputError("batch norm over an empty reduction set")
    return count


def _update_running(params: BnScaleParams, mean, var, count):
    unbiased = var * count / (count - 1) if count > 1 else var
    m = params.momentum
    params.running_mean[:] = (1 - m) * params.running_mean + m * mean
    params.running_var[:] = (1 - m) * params.running_var + m * unbiased


def batchnorm2d_fused(x: np.ndarray, params: BnScaleParams, mode: str = "train") -> np.ndarray:
    """Single-pass normalize + scale/shift of an (N, C, H, W) array.

    In train mode the running statistics of ``params`` are updated in place.
    """
    if x.ndim != 4:
        raise ShapeError(f"2-D batch norm expects (N, C, H, W), got {x.shape}")
    axes = (0, 2, 3)
    count = _check_bn(x, params, axes)
    x64 = x.astype(np.float64)
    if mode == "train":
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        _update_running(params, mean, var, count)
    elif mode == "infer":
        mean = params.running_mean.astype(np.float64)
        var = params.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    scale = params.gamma / np.sqrt(var + params.eps)
    shift = params.beta - mean * scale
    return (x64 * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)).astype(storage_dtype(x))


def batchnorm3d_fused(x: np.ndarray, params: BnScaleParams, mode: str = "train") -> np.ndarray:
    """3-D batch norm + scale by viewing (N, C, D, H, W) as the plane (N, C, D*H, W)."""
    x = np.ascontiguousarray(x, dtype=storage_dtype(x))
    if x.ndim != 5:
        raise ShapeError(f"expected Tensor5 input, got shape {x.shape}")
    n, c, d, h, w = x.shape
    return batchnorm2d_fused(x.reshape(n, c, d * h, w), params, mode).reshape(x.shape)


def batchnorm3d_direct(x: np.ndarray, params: BnScaleParams, mode: str = "train") -> np.ndarray:
    """Reference: statistics over the five-axis tensor directly, no flattening."""
    x64 = np.asarray(x, np.float64)
    axes = (0, 2, 3, 4)
    count = _check_bn(x64, params, axes)
    if mode == "train":
        mean = x64.mean(axis=axes, keepdims=True)
        var = ((x64 - mean) ** 2).mean(axis=axes, keepdims=True)
        _update_running(params, mean.ravel(), var.ravel(), count)
    else:
        mean = params.running_mean.reshape(1, -1, 1, 1, 1).astype(np.float64)
        var = params.running_var.reshape(1, -1, 1, 1, 1).astype(np.float64)
    xhat = (x64 - mean) / np.sqrt(var + params.eps)
    return (params.gamma.reshape(1, -1, 1, 1, 1) * xhat
            + params.beta.reshape(1, -1, 1, 1, 1)).astype(storage_dtype(x))


def batchnorm3d_normalize(x: np.ndarray, params: BnScaleParams, mode: str = "train") -> np.ndarray:
    """Normalization only (the stand-alone batch-norm layer, no affine part)."""
    x64 = np.asarray(x, np.float64)
    axes = (0, 2, 3, 4)
    count = _check_bn(x64, params, axes)
    if mode == "train":
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        _update_running(params, mean, var, count)
    else:
        mean, var = params.running_mean, params.running_var
    mean = mean.reshape(1, -1, 1, 1, 1)
    inv = 1.0 / np.sqrt(np.asarray(var, np.float64).reshape(1, -1, 1, 1, 1) + params.eps)
    return ((x64 - mean) * inv).astype(storage_dtype(x))


def scale_layer(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Stand-alone per-channel ``gamma * x + beta``."""
    g = np.asarray(gamma, np.float64).reshape(1, -1, 1, 1, 1)
    b = np.asarray(beta, np.float64).reshape(1, -1, 1, 1, 1)
    return (np.asarray(x, np.float64) * g + b).astype(storage_dtype(x))


def scale_layer_backward(x, gamma, grad_y):
    gy = np.asarray(grad_y, np.float64)
    axes = (0, 2, 3, 4)
    ggamma = (gy * x).sum(axis=axes)
    gbeta = gy.sum(axis=axes)
    gx = gy * np.asarray(gamma, np.float64).reshape(1, -1, 1, 1, 1)
    dt = storage_dtype(x, grad_y)
    return gx.astype(dt), ggamma.astype(dt), gbeta.astype(dt)


def batchnorm3d_normalize_backward(x, params: BnScaleParams, grad_y, mode: str = "train"):
    gx, _, _ = batchnorm3d_backward(x, BnScaleParams(
        np.ones(params.channels), np.zeros(params.channels), params.running_mean,
        params.running_var, params.eps, params.momentum), grad_y, mode)
    return gx


def batchnorm3d_backward(x: np.ndarray, params: BnScaleParams, grad_y: np.ndarray,
                         mode: str = "train") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma and beta.

    Batch statistics are recomputed from ``x``; running statistics are left untouched.
    """
    x64 = np.asarray(x, np.float64)
    gy = np.asarray(grad_y, np.float64)
    if gy.shape != x64.shape:
        raise ShapeError(f"grad_y shape {gy.shape} does not match input {x64.shape}")
    n, c, d, h, w = x64.shape
    x64 = x64.reshape(n, c, d * h, w)
    gy = gy.reshape(n, c, d * h, w)
    axes = (0, 2, 3)
    count = _check_bn(x64, params, axes)
    gamma = params.gamma.astype(np.float64).reshape(1, -1, 1, 1)
    if mode == "train":
        mean = x64.mean(axis=axes, keepdims=True)
        var = x64.var(axis=axes, keepdims=True)
    elif mode == "infer":
        mean = params.running_mean.astype(np.float64).reshape(1, -1, 1, 1)
        var = params.running_var.astype(np.float64).reshape(1, -1, 1, 1)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x64 - mean) * inv
    gbeta = gy.sum(axis=axes)
    ggamma = (gy * xhat).sum(axis=axes)
    if mode == "train":
        gx = gamma * inv / count * (count * gy - gbeta.reshape(1, -1, 1, 1)
                                    - xhat * ggamma.reshape(1, -1, 1, 1))
    else:
        gx = gy * gamma * inv
    dt = storage_dtype(x, grad_y)
    return gx.reshape(n, c, d, h, w).astype(dt), ggamma.astype(dt), gbeta.astype(dt)


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(storage_dtype(x), copy=False)


def relu_backward(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_y, 0).astype(storage_dtype(grad_y))
