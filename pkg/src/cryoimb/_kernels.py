"""Hot inner loops for the 3D layers.

Every kernel has two implementations with identical semantics: a numba
``@njit`` version and a pure-numpy version.  The numba path is used unless
the environment variable ``CRYOIMB_NUMBA`` is set to ``0`` (or numba cannot
be imported).  ``set_backend`` switches at runtime, which the kernel
benchmark and the equivalence tests rely on.

Layouts: volumes are ``(B, C, D, D, D)`` C-contiguous arrays.  Column
matrices are ``(C * k**3, B * P)`` with ``P = D_out**3``: the row index is
ordered ``(c, a, b, e)`` so that ``W.reshape(C_out, -1) @ cols`` is the
convolution, and the innermost loop of both gather and scatter runs along
contiguous memory.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_numba():
    flag = os.environ.get("CRYOIMB_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_BACKEND = "numba" if (HAS_NUMBA and _env_wants_numba()) else "numpy"


def get_backend():
    return _BACKEND


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    previous = _BACKEND
    _BACKEND = name
    return previous


def out_extent(d, k, stride):
    return (d - k) // stride + 1


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _im2col_nb(x, k, stride, d_out):
    B, C = x.shape[0], x.shape[1]
    P = d_out * d_out * d_out
    cols = np.empty((C * k * k * k, B * P), dtype=x.dtype)
    row = 0
    for c in range(C):
        for a in range(k):
            for bb in range(k):
                for e in range(k):
                    for b in range(B):
                        for i in range(d_out):
                            for j in range(d_out):
                                base = b * P + (i * d_out + j) * d_out
                                src = x[b, c, i * stride + a, j * stride + bb]
                                for l in range(d_out):
                                    cols[row, base + l] = src[l * stride + e]
                    row += 1
    return cols


@njit(cache=True)
def _col2im_nb(dcols, B, C, D, k, stride, d_out):
    dx = np.zeros((B, C, D, D, D), dtype=dcols.dtype)
    P = d_out * d_out * d_out
    row = 0
    for c in range(C):
        for a in range(k):
            for bb in range(k):
                for e in range(k):
                    for b in range(B):
                        for i in range(d_out):
                            for j in range(d_out):
                                base = b * P + (i * d_out + j) * d_out
                                dst = dx[b, c, i * stride + a, j * stride + bb]
                                for l in range(d_out):
                                    dst[l * stride + e] += dcols[row, base + l]
                    row += 1
    return dx


@njit(cache=True)
def _maxpool_fwd_nb(x, w):
    B, C, D = x.shape[0], x.shape[1], x.shape[2]
    d = D // w
    out = np.empty((B, C, d, d, d), dtype=x.dtype)
    arg = np.empty((B, C, d, d, d), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for i in range(d):
                for j in range(d):
                    for l in range(d):
                        best = x[b, c, i * w, j * w, l * w]
                        best_idx = 0
                        idx = 0
                        for a in range(w):
                            for bb in range(w):
                                for e in range(w):
                                    v = x[b, c, i * w + a, j * w + bb, l * w + e]
                                    # strict > keeps the first index on ties
                                    if v > best:
                                        best = v
                                        best_idx = idx
                                    idx += 1
                        out[b, c, i, j, l] = best
                        arg[b, c, i, j, l] = best_idx
    return out, arg


@njit(cache=True)
def _maxpool_bwd_nb(grad, arg, w, D):
    B, C, d = grad.shape[0], grad.shape[1], grad.shape[2]
    dx = np.zeros((B, C, D, D, D), dtype=grad.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(d):
                for j in range(d):
                    for l in range(d):
                        idx = arg[b, c, i, j, l]
                        a = idx // (w * w)
                        bb = (idx // w) % w
                        e = idx % w
                        dx[b, c, i * w + a, j * w + bb, l * w + e] += grad[b, c, i, j, l]
    return dx


# ---------------------------------------------------------------------------
# numpy kernels


def _im2col_np(x, k, stride, d_out):
    B, C = x.shape[:2]
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :d_out, :d_out, :d_out]
    # (B, C, i, j, l, a, b, e) -> (C, a, b, e, B, i, j, l)
    win = win.transpose(1, 5, 6, 7, 0, 2, 3, 4)
    return np.ascontiguousarray(win).reshape(C * k**3, B * d_out**3)


def _col2im_np(dcols, B, C, D, k, stride, d_out):
    dx = np.zeros((B, C, D, D, D), dtype=dcols.dtype)
    g = dcols.reshape(C, k, k, k, B, d_out, d_out, d_out)
    span = stride * (d_out - 1) + 1
    for a in range(k):
        for b in range(k):
            for e in range(k):
                dx[:, :, a:a + span:stride, b:b + span:stride, e:e + span:stride] += (
                    g[:, a, b, e].transpose(1, 0, 2, 3, 4)
                )
    return dx


def _blocks(x, w):
    B, C, D = x.shape[:3]
    d = D // w
    blk = x.reshape(B, C, d, w, d, w, d, w).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blk.reshape(B, C, d, d, d, w**3)


def _maxpool_fwd_np(x, w):
    blk = _blocks(x, w)
    arg = blk.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blk, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def _maxpool_bwd_np(grad, arg, w, D):
    B, C, d = grad.shape[:3]
    blk = np.zeros((B, C, d, d, d, w**3), dtype=grad.dtype)
    np.put_along_axis(blk, arg[..., None], grad[..., None], axis=-1)
    blk = blk.reshape(B, C, d, d, d, w, w, w).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(blk).reshape(B, C, D, D, D)


# ---------------------------------------------------------------------------
# dispatch


def im2col3d(x, k, stride=1):
    """Unfold ``x`` (B, C, D, D, D) into a ``(C * k**3, B * D_out**3)`` matrix."""
    x = np.ascontiguousarray(x)
    d_out = out_extent(x.shape[2], k, stride)
    if _BACKEND == "numba":
        return _im2col_nb(x, k, stride, d_out)
    return _im2col_np(x, k, stride, d_out)


def col2im3d(dcols, x_shape, k, stride=1):
    """Adjoint of :func:`im2col3d`: scatter-add columns back onto a volume."""
    B, C, D = x_shape[:3]
    d_out = out_extent(D, k, stride)
    dcols = np.ascontiguousarray(dcols)
    if _BACKEND == "numba":
        return _col2im_nb(dcols, B, C, D, k, stride, d_out)
    return _col2im_np(dcols, B, C, D, k, stride, d_out)


def maxpool3d_forward(x, w):
    """Block max over ``w**3`` windows; also returns the in-window argmax."""
    x = np.ascontiguousarray(x)
    if _BACKEND == "numba":
        return _maxpool_fwd_nb(x, w)
    return _maxpool_fwd_np(x, w)


def maxpool3d_backward(grad, arg, w):
    grad = np.ascontiguousarray(grad)
    D = grad.shape[2] * w
    if _BACKEND == "numba":
        return _maxpool_bwd_nb(grad, np.ascontiguousarray(arg), w, D)
    return _maxpool_bwd_np(grad, arg, w, D)
