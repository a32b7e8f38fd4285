"""Low-level array kernels for the error-correction network (channels-last)."""
import numba
import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


@numba.njit(cache=True, nogil=True)
def depthwise_forward(xp, w, out):
    # out[n, y, x, c] += sum_ky,kx xp[n, y+ky, x+kx, c] * w[ky, kx, c]
    n_, h_, w_, c_ = out.shape
    k_ = w.shape[0]
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                for ky in range(k_):
                    for kx in range(k_):
                        for c in range(c_):
                            out[n, y, x, c] += xp[n, y + ky, x + kx, c] * w[ky, kx, c]


@numba.njit(cache=True, nogil=True)
def depthwise_backward(xp, w, dout, dxp, dw):
    n_, h_, w_, c_ = dout.shape
    k_ = w.shape[0]
    for n in range(n_):
        for y in range(h_):
            for x in range(w_):
                for ky in range(k_):
                    for kx in range(k_):
                        for c in range(c_):
                            g = dout[n, y, x, c]
                            dxp[n, y + ky, x + kx, c] += g * w[ky, kx, c]
                            dw[ky, kx, c] += g * xp[n, y + ky, x + kx, c]


def depthwise(x, w):
    """'same' depthwise convolution with zero padding; ``w`` is (k, k, C)."""
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros_like(x)
    depthwise_forward(xp, np.ascontiguousarray(w, dtype=x.dtype), out)
    return out, xp


def depthwise_grads(xp, w, dout):
    k = w.shape[0]
    p = k // 2
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape, dtype=dout.dtype)
    depthwise_backward(xp, np.ascontiguousarray(w, dtype=dout.dtype),
                       np.ascontiguousarray(dout), dxp, dw)
    return dxp[:, p:-p, p:-p, :], dw


def im2col(x, k):
    """Stack the k*k zero-padded neighbourhoods of ``x`` along the last axis.

    Column order is (ky, kx, channel), matching ``conv_matrix``.
    """
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k * k * c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            j = (ky * k + kx) * c
            cols[..., j:j + c] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols


def matmul(a, b):
    """``a @ b`` over the last axis of ``a`` as one 2-D GEMM (numpy loops over
    leading axes otherwise)."""
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))


def conv_matrix(kernel):
    """(out, in, k, k) kernel -> (k*k*in, out) matrix for ``im2col`` columns."""
    out_c = kernel.shape[0]
    return kernel.transpose(2, 3, 1, 0).reshape(-1, out_c)


@numba.njit(cache=True, nogil=True)
def _gelu_inner(x, u):
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    for i in range(x.size):
        v = x[i]
        u[i] = c * (v + a * v * v * v)


@numba.njit(cache=True, nogil=True)
def _gelu_outer(x, t, out):
    half = x.dtype.type(0.5)
    for i in range(x.size):
        out[i] = half * x[i] * (1 + t[i])


@numba.njit(cache=True, nogil=True)
def _gelu_grad_flat(x, t, g):
    half = x.dtype.type(0.5)
    c = x.dtype.type(_GELU_C)
    a3 = x.dtype.type(3.0 * _GELU_A)
    for i in range(x.size):
        v = x[i]
        th = t[i]
        g[i] = half * (1 + th) + half * v * (1 - th * th) * c * (1 + a3 * v * v)


def gelu(x):
    """tanh-form GELU; returns the activation and the tanh term for ``gelu_grad``."""
    # polynomial and product loops in numba, tanh left to numpy's vectorized ufunc
    x = np.ascontiguousarray(x)
    t = np.empty_like(x)
    out = np.empty_like(x)
    _gelu_inner(x.reshape(-1), t.reshape(-1))
    np.tanh(t, out=t)
    _gelu_outer(x.reshape(-1), t.reshape(-1), out.reshape(-1))
    return out, t


def gelu_grad(x, t):
    x = np.ascontiguousarray(x)
    g = np.empty_like(x)
    _gelu_grad_flat(x.reshape(-1), np.ascontiguousarray(t).reshape(-1), g.reshape(-1))
    return g


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
