import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodule3d.exceptions import GeometryError, ShapeError
from nodule3d.tensor import (ConvGeometry, as_tensor5, col2im_3d, flat_index, gemm, im2col_3d,
                             unflat_index, zeros5)


def test_as_tensor5_defaults_to_float32_and_contiguous():
    x = as_tensor5(np.ones((1, 2, 3, 4, 5), dtype=np.float64)[..., ::-1].astype(np.float32))
    assert x.dtype == np.float32 and x.flags.c_contiguous
    assert as_tensor5(np.ones((1, 1, 1, 1, 1))).dtype == np.float64


@pytest.mark.parametrize("shape", [(2, 3, 4), (0, 1, 1, 1, 1)])
def test_as_tensor5_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        as_tensor5(np.zeros(shape))


def test_flat_index_matches_numpy_ravel():
    shape = (2, 3, 4, 5, 6)
    assert flat_index(shape, (1, 2, 3, 4, 5)) == np.ravel_multi_index((1, 2, 3, 4, 5), shape)
    assert flat_index(shape, (1, 2, 3, 4, 5)) == 719
    with pytest.raises(IndexError):
        flat_index(shape, (2, 0, 0, 0, 0))


@given(st.lists(st.integers(1, 5), min_size=5, max_size=5), st.data())
def test_flat_index_round_trip(shape, data):
    off = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    assert flat_index(shape, unflat_index(shape, off)) == off


def test_zeros5():
    z = zeros5((1, 2, 2, 2, 2))
    assert z.shape == (1, 2, 2, 2, 2) and not z.any()


def test_output_shape_formula():
    g = ConvGeometry(2, 5, kernel=3, stride=2, pad=1)
    # floor((7 + 2 - 3) / 2) + 1 = 4
    assert g.output_shape((3, 2, 7, 8, 9)) == (3, 5, 4, 4, 5)
    assert g.kernel_volume == 27


def test_geometry_errors():
    with pytest.raises(GeometryError):
        ConvGeometry(1, 1, kernel=5).output_shape((1, 1, 3, 3, 3))
    with pytest.raises(GeometryError):
        ConvGeometry(0, 1)
    with pytest.raises(ShapeError):
        ConvGeometry(2, 1).output_shape((1, 3, 5, 5, 5))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 70), st.integers(1, 150), st.integers(1, 70), st.integers(1, 9))
def test_gemm_matches_matmul(m, k, n, tile):
    r = np.random.default_rng(m * 10007 + k * 101 + n)
    a = r.standard_normal((m, k)).astype(np.float32)
    b = r.standard_normal((k, n)).astype(np.float32)
    ref = a.astype(np.float64) @ b.astype(np.float64)
    out = gemm(a, b, tile=tile)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_gemm_accumulates_and_checks_shapes():
    a = np.eye(3, dtype=np.float32)
    acc = np.full((3, 3), 2.0, np.float32)
    np.testing.assert_array_equal(gemm(a, a, accumulate_into=acc), acc + np.eye(3))
    with pytest.raises(ShapeError):
        gemm(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        gemm(a, a, accumulate_into=np.ones((2, 2)))


def test_im2col_row_layout():
    # row index ((c * kd + i) * kh + j) * kw + k, column = output voxel
    x = np.arange(2 * 3 * 3 * 3, dtype=np.float32).reshape(1, 2, 3, 3, 3)
    g = ConvGeometry(2, 1, kernel=2)
    cols = im2col_3d(x, g)
    assert cols.shape == (2 * 8, 8)
    c, i, j, k = 1, 1, 0, 1
    row = ((c * 2 + i) * 2 + j) * 2 + k
    # output voxel (0, 1, 1) reads x[c, 0+i, 1+j, 1+k]
    col = (0 * 2 + 1) * 2 + 1
    assert cols[row, col] == x[0, c, 1, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(3, 6))
def test_col2im_is_adjoint_of_im2col(c, k, s, p, n):
    g = ConvGeometry(c, 1, kernel=k, stride=s, pad=p)
    r = np.random.default_rng(c + 7 * k + 31 * s + 97 * p + n)
    x = r.standard_normal((1, c, n, n + 1, n)).astype(np.float64)
    cols = im2col_3d(x, g)
    y = r.standard_normal(cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * col2im_3d(y, g, x.shape)))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)
