import numpy as np
import pytest

from mtlmi import _kernels
from mtlmi._kernels import fallback

try:
    from mtlmi._kernels import _convkernels
except ImportError:
    _convkernels = None

needs_compiled = pytest.mark.skipif(
    _convkernels is None, reason="compiled kernels not built")


def random_case(rng):
    n = int(rng.integers(1, 4))
    c = int(rng.integers(1, 5))
    kh = int(rng.integers(1, 4))
    kw = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    hp = kh + int(rng.integers(0, 10))
    wp = kw + int(rng.integers(0, 10))
    padded = rng.standard_normal((n, c, hp, wp))
    return padded, kh, kw, stride


def test_active_backend_exported():
    assert _kernels.BACKEND in ("cython", "numpy")
    assert callable(_kernels.im2col) and callable(_kernels.col2im)


@needs_compiled
def test_im2col_matches_fallback():
    rng = np.random.default_rng(0)
    for _ in range(50):
        padded, kh, kw, stride = random_case(rng)
        a = np.asarray(_convkernels.im2col(padded, kh, kw, stride))
        b = fallback.im2col(padded, kh, kw, stride)
        assert a.shape == b.shape
        assert np.array_equal(a, b)


@needs_compiled
def test_col2im_matches_fallback():
    rng = np.random.default_rng(1)
    for _ in range(50):
        padded, kh, kw, stride = random_case(rng)
        n, c, hp, wp = padded.shape
        cols = fallback.im2col(padded, kh, kw, stride)
        g = rng.standard_normal(cols.shape)
        a = np.asarray(_convkernels.col2im(g, n, c, hp, wp, kh, kw, stride))
        b = fallback.col2im(g, n, c, hp, wp, kh, kw, stride)
        assert np.array_equal(a, b)


def test_im2col_one_by_one_kernel_is_a_reshape():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 5, 5))
    cols = np.asarray(_kernels.im2col(x, 1, 1, 1))
    assert np.array_equal(cols, x.reshape(2, 3, 25))


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), g> == <x, col2im(g)> for random shapes
    rng = np.random.default_rng(3)
    for _ in range(20):
        padded, kh, kw, stride = random_case(rng)
        n, c, hp, wp = padded.shape
        cols = np.asarray(_kernels.im2col(padded, kh, kw, stride))
        g = rng.standard_normal(cols.shape)
        back = np.asarray(_kernels.col2im(g, n, c, hp, wp, kh, kw, stride))
        assert np.vdot(cols, g) == pytest.approx(np.vdot(padded, back),
                                                 rel=1e-12)
