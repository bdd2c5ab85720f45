"""Dense 5-D tensors, blocked GEMM and the im2col/col2im lowering.

Activations and weights are plain ``numpy.ndarray`` objects of dtype
``float32`` laid out as (n, c, d, h, w), C-contiguous with ``w`` varying
fastest. Matrices (``Mat``) are 2-D ``float32`` arrays, row-major.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .exceptions import GeometryError, ShapeError

DTYPE = np.float32
DEFAULT_TILE = 64


def storage_dtype(*arrays) -> np.dtype:
    """float64 if any operand is float64 (finite-difference recomputes), else float32."""
    return np.dtype(np.float64) if any(np.asarray(a).dtype == np.float64 for a in arrays) else np.dtype(DTYPE)


Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return t


def as_tensor5(x, *, copy: bool = False) -> np.ndarray:
    """Validate ``x`` as a Tensor5 and return it C-contiguous (float32 unless given float64)."""
    dt = storage_dtype(x)
    arr = np.array(x, dtype=dt, order="C") if copy else np.ascontiguousarray(x, dtype=dt)
    if arr.ndim != 5:
        raise ShapeError(f"Tensor5 must have 5 axes (n, c, d, h, w), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"Tensor5 shape components must be >= 1, got {arr.shape}")
    return arr


def zeros5(shape: Sequence[int]) -> np.ndarray:
    return as_tensor5(np.zeros(tuple(shape), dtype=DTYPE))


def flat_index(shape: Sequence[int], idx: Sequence[int]) -> int:
    """Row-major offset of ``idx`` = ((((n*C + c)*D + d)*H + h)*W + w)."""
    if len(shape) != len(idx):
        raise ShapeError(f"index {tuple(idx)} does not match shape {tuple(shape)}")
    off = 0
    for extent, i in zip(shape, idx):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(idx)} out of range for shape {tuple(shape)}")
        off = off * extent + int(i)
    return off


def unflat_index(shape: Sequence[int], offset: int) -> Tuple[int, ...]:
    size = int(np.prod(shape))
    if not 0 <= offset < size:
        raise IndexError(f"offset {offset} out of range for shape {tuple(shape)}")
    out = []
    for extent in reversed(shape):
        offset, r = divmod(offset, extent)
        out.append(r)
    return tuple(reversed(out))


@dataclass(frozen=True)
class ConvGeometry:
    """Channel counts plus per-axis kernel, stride and zero padding."""

    in_channels: int
    out_channels: int
    kernel: Triple = (3, 3, 3)
    stride: Triple = (1, 1, 1)
    pad: Triple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "pad", _triple(self.pad))
        if self.in_channels < 1 or self.out_channels < 1:
            raise GeometryError(f"channel counts must be >= 1: {self}")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise GeometryError(f"kernel and stride must be >= 1: {self}")
        if min(self.pad) < 0:
            raise GeometryError(f"padding must be >= 0: {self}")

    @property
    def kernel_volume(self) -> int:
        kd, kh, kw = self.kernel
        return kd * kh * kw

    def output_spatial(self, in_spatial: Sequence[int]) -> Triple:
        out = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(in_spatial, self.kernel, self.stride, self.pad)
        )
        if len(out) != 3 or min(out) < 1 or any(
            n + 2 * p - k < 0 for n, k, p in zip(in_spatial, self.kernel, self.pad)
        ):
            raise GeometryError(
                f"geometry {self} yields empty output for input extent {tuple(in_spatial)}"
            )
        return out

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, int, int, int, int]:
        n, c = in_shape[:2]
        if c != self.in_channels:
            raise ShapeError(f"input has {c} channels, geometry expects {self.in_channels}")
        return (n, self.out_channels) + self.output_spatial(in_shape[2:])


def gemm(a: np.ndarray, b: np.ndarray, accumulate_into: np.ndarray | None = None,
         tile: int = DEFAULT_TILE) -> np.ndarray:
    """Blocked ``accumulate_into + a @ b``.

    The product is formed from row blocks of ``tile`` rows and inner/column panels of
    ``tile * tile`` entries, each multiplied in float64; the accumulated sum is rounded
    to the storage dtype once at the end.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm operand shapes {a.shape} and {b.shape} are incompatible")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    rows, cols = a.shape[0], b.shape[1]
    if accumulate_into is None:
        acc = np.zeros((rows, cols), dtype=np.float64)
    else:
        if accumulate_into.shape != (rows, cols):
            raise ShapeError(
                f"accumulator shape {accumulate_into.shape} does not match "
                f"{a.shape} x {b.shape} product"
            )
        acc = np.array(accumulate_into, dtype=np.float64)
    inner = a.shape[1]
    panel = tile * tile
    a64 = a.astype(np.float64, copy=False)
    for j0 in range(0, cols, panel):
        j1 = min(j0 + panel, cols)
        for k0 in range(0, inner, panel):
            k1 = min(k0 + panel, inner)
            b_panel = b[k0:k1, j0:j1].astype(np.float64)
            for i0 in range(0, rows, tile):
                i1 = min(i0 + tile, rows)
                acc[i0:i1, j0:j1] += a64[i0:i1, k0:k1] @ b_panel
    return acc.astype(storage_dtype(a, b))


def _check_single(x: np.ndarray, g: ConvGeometry) -> None:
    if x.ndim != 5 or x.shape[0] != 1:
        raise ShapeError(f"im2col_3d expects a single-sample Tensor5, got shape {x.shape}")
    if x.shape[1] != g.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects {g.in_channels}")


def _pad_spatial(x: np.ndarray, pad: Triple) -> np.ndarray:
    if not any(pad):
        return x
    pd, ph, pw = pad
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(pd, pd), (ph, ph), (pw, pw)])


def im2col_3d(x: np.ndarray, g: ConvGeometry) -> np.ndarray:
    """Lower a (1, C, D, H, W) tensor to a (C*kd*kh*kw, od*oh*ow) column matrix.

    Row ``((c*kd + i)*kh + j)*kw + k`` of column ``v`` holds the input value seen by
    kernel tap (c, i, j, k) at output voxel ``v``; padding reads are zero.
    """
    x = np.asarray(x)
    _check_single(x, g)
    od, oh, ow = g.output_spatial(x.shape[2:])
    kd, kh, kw = g.kernel
    sd, sh, sw = g.stride
    xp = _pad_spatial(x[0], g.pad)
    cols = np.empty((g.in_channels, kd, kh, kw, od, oh, ow), dtype=storage_dtype(x))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                cols[:, i, j, k] = xp[:, i:i + sd * (od - 1) + 1:sd,
                                      j:j + sh * (oh - 1) + 1:sh,
                                      k:k + sw * (ow - 1) + 1:sw]
    return cols.reshape(g.in_channels * kd * kh * kw, od * oh * ow)


def col2im_3d(cols: np.ndarray, g: ConvGeometry, out_shape: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`im2col_3d`: scatter-add columns back onto a (1, C, D, H, W) tensor."""
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 5 or out_shape[0] != 1 or out_shape[1] != g.in_channels:
        raise ShapeError(f"col2im_3d target shape {out_shape} incompatible with {g}")
    od, oh, ow = g.output_spatial(out_shape[2:])
    kd, kh, kw = g.kernel
    expected = (g.in_channels * kd * kh * kw, od * oh * ow)
    cols = np.asarray(cols)
    if cols.shape != expected:
        raise ShapeError(f"column matrix shape {cols.shape} does not match expected {expected}")
    sd, sh, sw = g.stride
    pd, ph, pw = g.pad
    _, c, d, h, w = out_shape
    acc = np.zeros((c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    view = cols.reshape(c, kd, kh, kw, od, oh, ow)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                acc[:, i:i + sd * (od - 1) + 1:sd,
                    j:j + sh * (oh - 1) + 1:sh,
                    k:k + sw * (ow - 1) + 1:sw] += view[:, i, j, k]
    acc = acc[:, pd:pd + d, ph:ph + h, pw:pw + w]
    return np.ascontiguousarray(acc, dtype=storage_dtype(cols))[None]
