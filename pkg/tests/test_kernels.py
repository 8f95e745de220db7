"""The numba and numpy kernel backends must agree exactly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryoimb import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


def both(fn, *args):
    out = {}
    for name in ("numpy", "numba"):
        prev = K.set_backend(name)
        try:
            out[name] = fn(*args)
        finally:
            K.set_backend(prev)
    return out["numpy"], out["numba"]


shapes = st.tuples(
    st.integers(1, 3),  # batch
    st.integers(1, 3),  # channels
    st.integers(3, 9),  # extent
    st.sampled_from([1, 3, 5]),  # kernel
    st.integers(1, 3),  # stride
).filter(lambda t: t[2] >= t[3])


@needs_numba
@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_im2col_backends_agree(shape, seed):
    B, C, D, k, s = shape
    x = np.random.default_rng(seed).standard_normal((B, C, D, D, D)).astype(np.float32)
    a, b = both(K.im2col3d, x, k, s)
    assert a.shape == (C * k**3, B * K.out_extent(D, k, s) ** 3)
    np.testing.assert_array_equal(a, b)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_col2im_backends_agree(shape, seed):
    B, C, D, k, s = shape
    d = K.out_extent(D, k, s)
    # integer-valued entries keep float sums exact regardless of order
    dc = np.random.default_rng(seed).integers(-4, 5, (C * k**3, B * d**3)).astype(np.float64)
    a, b = both(K.col2im3d, dc, (B, C, D, D, D), k, s)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_col2im_is_adjoint_of_im2col(shape, seed):
    B, C, D, k, s = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, D, D, D))
    cols = K.im2col3d(x, k, s)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * K.col2im3d(c, x.shape, k, s))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([(4, 2), (6, 3), (6, 2), (5, 5)]),
       st.integers(0, 2**31 - 1))
def test_maxpool_backends_agree(B, C, dw, seed):
    D, w = dw
    rng = np.random.default_rng(seed)
    # small integer range forces plenty of ties
    x = rng.integers(0, 3, (B, C, D, D, D)).astype(np.float32)
    (oa, ia), (ob, ib) = both(K.maxpool3d_forward, x, w)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(ia, ib)
    g = rng.standard_normal(oa.shape).astype(np.float32)
    ga, gb = both(K.maxpool3d_backward, g, ia, w)
    np.testing.assert_array_equal(ga, gb)


def test_maxpool_tie_goes_to_first_in_scan_order(backend):
    x = np.ones((1, 1, 2, 2, 2), dtype=np.float32)
    out, arg = K.maxpool3d_forward(x, 2)
    assert arg.ravel()[0] == 0
    g = K.maxpool3d_backward(np.array([[[[[5.0]]]]], dtype=np.float32), arg, 2)
    assert g[0, 0, 0, 0, 0] == 5.0 and g.sum() == 5.0


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        K.set_backend("cuda")


def test_env_flag_parsing(monkeypatch):
    monkeypatch.setenv("CRYOIMB_NUMBA", "0")
    assert not K._env_wants_numba()
    monkeypatch.setenv("CRYOIMB_NUMBA", "1")
    assert K._env_wants_numba()
