"""Forward and backward kernels for the network layers.

Activations are channels-last, ``(B, H, W, C)``; convolution weights are
``(k, k, C_in, C_out)``.  Every ``*_forward`` returns ``(output, cache)``
and the matching ``*_backward`` consumes that cache.

Stride-1 convolutions use the flattened-shift formulation: the zero-padded
input is flattened to ``(B * Hp * Wp, C)`` rows, so the contribution of
kernel tap ``(i, j)`` is one contiguous row window times a ``(C, O)``
matrix.  Rows that fall on padding positions are computed and discarded.
"""

from __future__ import annotations

import numba as nb
import numpy as np
from scipy.special import expit

# below this many input features per tap the im2col path is cheaper
_SHIFT_MIN_CHANNELS = 4


# ---------------------------------------------------------------------------
# im2col helpers (strided and small-channel convolutions)
# ---------------------------------------------------------------------------


def im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """``(B, Hp, Wp, C)`` padded input to ``(B*ho*wo, k*k*C)`` rows."""
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
    return cols.reshape(b * ho * wo, k * k * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int,
           ho: int, wo: int) -> np.ndarray:
    """Scatter-add ``(B*ho*wo, k*k*C)`` rows onto a zero ``(B, Hp, Wp, C)`` grid."""
    b, _, _, c = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# Convolution (zero padding, "same" for stride 1)
# ---------------------------------------------------------------------------


def _flat_padded(x: np.ndarray, p: int, extra: int) -> np.ndarray:
    b, h, w, c = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    flat = np.zeros((n + extra, c), dtype=x.dtype)
    flat[:n].reshape(b, hp, wp, c)[:, p : p + h, p : p + w] = x
    return flat


def _shift_forward(xf: np.ndarray, n: int, taps) -> np.ndarray:
    """``sum(xf[s:s+n] @ m for s, m in taps)`` without large temporaries."""
    acc = None
    tmp = None
    for s, m in taps:
        if acc is None:
            acc = np.matmul(xf[s : s + n], m)
            tmp = np.empty_like(acc)
        else:
            np.matmul(xf[s : s + n], m, out=tmp)
            acc += tmp
    return acc


def _shift_backward(xf: np.ndarray, dfull: np.ndarray, taps, dxf: np.ndarray) -> list[np.ndarray]:
    """Adds each tap's input gradient into ``dxf``; returns the tap weight gradients."""
    n = dfull.shape[0]
    tmp = np.empty((n, xf.shape[1]), dtype=dfull.dtype)
    dws = []
    for s, m in taps:
        dws.append(xf[s : s + n].T @ dfull)
        np.matmul(dfull, m.T, out=tmp)
        dxf[s : s + n] += tmp
    return dws


def _grid_rows(g: np.ndarray, hp: int, wp: int) -> np.ndarray:
    """Embed ``(B, h, w, C)`` at the top-left of a zero ``(B * hp * wp, C)`` row grid."""
    b, h, w, c = g.shape
    rows = np.zeros((b * hp * wp, c), dtype=g.dtype)
    rows.reshape(b, hp, wp, c)[:, :h, :w] = g
    return rows


def conv_forward(x, w, b, stride: int = 1):
    k, _, c, o = w.shape
    p = (k - 1) // 2
    bs, h, wd, _ = x.shape
    if stride == 1 and c >= _SHIFT_MIN_CHANNELS and k > 1:
        hp, wp = h + 2 * p, wd + 2 * p
        n = bs * hp * wp
        xf = _flat_padded(x, p, (k - 1) * (wp + 1))
        taps = [(i * wp + j, w[i, j]) for i in range(k) for j in range(k)]
        acc = _shift_forward(xf, n, taps)
        out = acc.reshape(bs, hp, wp, o)[:, :h, :wd] + b
        return out, ("shift", xf, w, (bs, h, wd, c), stride)
    ho, wo = conv_out_size(h, k, stride, p), conv_out_size(wd, k, stride, p)
    if k == 1 and stride == 1:
        cols = x.reshape(-1, c)
    else:
        cols = im2col(_pad(x, p), k, stride, ho, wo)
    out = (cols @ w.reshape(-1, o)).reshape(bs, ho, wo, o)
    out += b
    return out, ("cols", cols, w, (bs, h, wd, c), stride)


def conv_backward(dout, cache):
    path, data, w, (bs, h, wd, c), stride = cache
    k, _, _, o = w.shape
    p = (k - 1) // 2
    db = dout.reshape(-1, o).sum(axis=0)
    if path == "shift":
        xf = data
        hp, wp = h + 2 * p, wd + 2 * p
        dfull = _grid_rows(dout, hp, wp)
        taps = [(i * wp + j, w[i, j]) for i in range(k) for j in range(k)]
        dxf = np.zeros_like(xf)
        dws = _shift_backward(xf, dfull, taps, dxf)
        dw = np.stack(dws).reshape(w.shape)
        dx = dxf[: dfull.shape[0]].reshape(bs, hp, wp, c)[:, p : p + h, p : p + wd]
        return np.ascontiguousarray(dx), dw, db
    cols = data
    d2 = dout.reshape(-1, o)
    dw = (cols.T @ d2).reshape(w.shape)
    dcols = d2 @ w.reshape(-1, o).T
    if k == 1 and stride == 1:
        return dcols.reshape(bs, h, wd, c), dw, db
    ho, wo = dout.shape[1:3]
    dxp = col2im(dcols, (bs, h + 2 * p, wd + 2 * p, c), k, stride, ho, wo)
    return np.ascontiguousarray(dxp[:, p : p + h, p : p + wd]), dw, db


# ---------------------------------------------------------------------------
# Transposed convolution (k = 4, stride 2, padding 1)
# ---------------------------------------------------------------------------

# Output row 2m + r draws on kernel row i from padded input row m + a.
_PHASE_TAPS = {0: ((1, 1), (3, 0)), 1: ((0, 2), (2, 1))}


def _phase_taps(r, q, wp):
    """``((i, j), row shift)`` for every kernel tap feeding phase ``(r, q)``."""
    return [((i, j), a * wp + bb) for i, a in _PHASE_TAPS[r] for j, bb in _PHASE_TAPS[q]]


def tconv_forward(x, w, b, stride: int = 2, pad: int = 1):
    """Doubles both spatial dims.

    Each of the four output phases ``(row % 2, col % 2)`` is a 2 x 2
    convolution of the one-padded input, evaluated with shifted row windows.
    """
    if w.shape[:2] != (4, 4) or stride != 2 or pad != 1:
        raise ValueError("only 4 x 4 stride-2 transposed convolutions with padding 1 are supported")
    bs, h, wd, cin = x.shape
    cout = w.shape[3]
    hp, wp = h + 2, wd + 2
    n = bs * hp * wp
    xf = _flat_padded(x, 1, 2 * wp + 2)
    out = np.empty((bs, 2 * h, 2 * wd, cout), dtype=x.dtype)
    for r in (0, 1):
        for q in (0, 1):
            taps = [(sh, w[ij]) for ij, sh in _phase_taps(r, q, wp)]
            acc = _shift_forward(xf, n, taps)
            out[:, r::2, q::2] = acc.reshape(bs, hp, wp, cout)[:, :h, :wd]
    out += b
    return out, (xf, w, x.shape)


def tconv_backward(dout, cache):
    xf, w, (bs, h, wd, cin) = cache
    hp, wp = h + 2, wd + 2
    dxf = np.zeros_like(xf)
    dw = np.empty_like(w)
    for r in (0, 1):
        for q in (0, 1):
            dfull = _grid_rows(dout[:, r::2, q::2], hp, wp)
            taps = _phase_taps(r, q, wp)
            dws = _shift_backward(xf, dfull, [(sh, w[ij]) for ij, sh in taps], dxf)
            for (ij, _), g in zip(taps, dws):
                dw[ij] = g
    dx = dxf[: bs * hp * wp].reshape(bs, hp, wp, cin)[:, 1 : 1 + h, 1 : 1 + wd]
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return np.ascontiguousarray(dx), dw, db


def bilinear_kernel(k: int) -> np.ndarray:
    """2-D bilinear upsampling kernel of size ``k`` (factor ``(k + 1) // 2``)."""
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    og = np.arange(k)
    f = 1.0 - np.abs(og - center) / factor
    return np.outer(f, f)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _bn_moments(x2):
    n, c = x2.shape
    mu = np.zeros(c)
    for r in range(n):
        for k in range(c):
            mu[k] += x2[r, k]
    mu /= n
    var = np.zeros(c)
    for r in range(n):
        for k in range(c):
            d = x2[r, k] - mu[k]
            var[k] += d * d
    var /= n
    return mu, var


@nb.njit(cache=True)
def _bn_apply(x2, mu, invstd, gamma, beta, xhat, out):
    n, c = x2.shape
    for r in range(n):
        for k in range(c):
            v = (x2[r, k] - mu[k]) * invstd[k]
            xhat[r, k] = v
            out[r, k] = v * gamma[k] + beta[k]


@nb.njit(cache=True)
def _bn_grad_sums(d2, xhat):
    n, c = d2.shape
    dbeta = np.zeros(c)
    dgamma = np.zeros(c)
    for r in range(n):
        for k in range(c):
            dbeta[k] += d2[r, k]
            dgamma[k] += d2[r, k] * xhat[r, k]
    return dbeta, dgamma


@nb.njit(cache=True)
def _bn_dx(d2, xhat, g, mb, mg, dx):
    n, c = d2.shape
    for r in range(n):
        for k in range(c):
            dx[r, k] = g[k] * (d2[r, k] - mb[k] - xhat[r, k] * mg[k])


def bn_forward(x, gamma, beta, mean=None, var=None, eps: float = 1e-5):
    """Batch statistics when ``mean``/``var`` are None, else the given ones.

    Batch moments are accumulated in float64.
    """
    c = x.shape[-1]
    x2 = np.ascontiguousarray(x).reshape(-1, c)
    train = mean is None
    if train:
        mu, var_b = _bn_moments(x2)
    else:
        mu, var_b = np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64)
    invstd = 1.0 / np.sqrt(var_b + eps)
    dt = x.dtype
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    _bn_apply(x2, mu.astype(dt), invstd.astype(dt), gamma.astype(dt), beta.astype(dt), xhat, out)
    return out.reshape(x.shape), (xhat, invstd.astype(dt), gamma, train, mu, var_b)


def bn_backward(dout, cache):
    xhat, invstd, gamma, train, _, _ = cache
    c = dout.shape[-1]
    dt = dout.dtype
    d2 = np.ascontiguousarray(dout).reshape(-1, c)
    dbeta, dgamma = _bn_grad_sums(d2, xhat)
    g = (gamma * invstd).astype(dt)
    if not train:
        return (d2 * g).reshape(dout.shape), dgamma.astype(dt), dbeta.astype(dt)
    n = d2.shape[0]
    dx = np.empty_like(d2)
    _bn_dx(d2, xhat, g, (dbeta / n).astype(dt), (dgamma / n).astype(dt), dx)
    return dx.reshape(dout.shape), dgamma.astype(dt), dbeta.astype(dt)


# ---------------------------------------------------------------------------
# Elementwise and pooling
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _relu_fwd(x, out, mask):
    for i in range(x.size):
        v = x[i]
        mask[i] = v > 0
        # NaN passes through so non-finite activations stay visible
        out[i] = 0 if v <= 0 else v


@nb.njit(cache=True)
def _relu_masked(x, mask, out):
    for i in range(x.size):
        out[i] = x[i] if mask[i] else 0


def relu_forward(x, mask=None):
    """``mask`` overrides the active set (used to freeze the switch pattern)."""
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if mask is None:
        mask = np.empty(x.shape, dtype=np.bool_)
        _relu_fwd(x.reshape(-1), out.reshape(-1), mask.reshape(-1))
    else:
        _relu_masked(x.reshape(-1), np.ascontiguousarray(mask).reshape(-1), out.reshape(-1))
    return out, mask


def relu_backward(dout, cache):
    dout = np.ascontiguousarray(dout)
    dx = np.empty_like(dout)
    _relu_masked(dout.reshape(-1), cache.reshape(-1), dx.reshape(-1))
    return dx


def maxpool_forward(x, idx=None):
    """2 x 2 max pooling; ties go to the first of (top-left, top-right,
    bottom-left, bottom-right).  ``idx`` overrides the winners."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
    x6 = x.reshape(b, h // 2, 2, w // 2, 2, c)
    quads = (x6[:, :, 0, :, 0], x6[:, :, 0, :, 1], x6[:, :, 1, :, 0], x6[:, :, 1, :, 1])
    if idx is None:
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        idx = np.where(quads[0] == out, 0, np.where(quads[1] == out, 1, np.where(quads[2] == out, 2, 3)))
        idx = idx.astype(np.int8)
    else:
        out = np.choose(idx, quads)
    return out, (idx, x.shape)


def maxpool_backward(dout, cache):
    idx, shape = cache
    b, h, w, c = shape
    dx6 = np.zeros((b, h // 2, 2, w // 2, 2, c), dtype=dout.dtype)
    for q, (r, s) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx6[:, :, r, :, s] = np.where(idx == q, dout, 0)
    return dx6.reshape(shape)


def sigmoid_forward(z):
    y = expit(z)
    return y, y


def sigmoid_backward(dout, cache):
    y = cache
    return dout * y * (1 - y)
