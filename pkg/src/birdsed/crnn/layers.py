"""Forward/backward primitives for the CRNN.

Activations are channels-last: conv blocks see ``(B, T, M, C)`` (batch, frames,
mel bands, channels) and recurrent layers see ``(B, T, D)``. Every ``*_forward``
returns ``(out, cache)``; the matching ``*_backward`` takes the upstream
gradient and the cache.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _gate(x):
    # sigmoid via tanh: one ufunc pass, used inside the recurrence
    return 0.5 * np.tanh(0.5 * x) + 0.5


# ---------------------------------------------------------------------------
# 3x3 convolution, stride 1, zero padding 1
# ---------------------------------------------------------------------------

def _im2col(x):
    B, T, M, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, T, M, 9, C), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, 3 * i + j, :] = xp[:, i:i + T, j:j + M, :]
    return cols.reshape(B * T * M, 9 * C)


def _kernel_matrix(weight):
    # (Cout, Cin, 3, 3) -> (9 * Cin, Cout), rows ordered (kh, kw, cin) to match _im2col
    cout, cin = weight.shape[:2]
    return weight.transpose(2, 3, 1, 0).reshape(9 * cin, cout)


def conv_forward(x, weight, bias):
    B, T, M, _ = x.shape
    cols = _im2col(x)
    out = cols @ _kernel_matrix(weight) + bias
    return out.reshape(B, T, M, -1), (x.shape, cols, weight)


def conv_backward(dout, cache, need_dx=True):
    shape, cols, weight = cache
    B, T, M, C = shape
    cout = weight.shape[0]
    d2 = dout.reshape(-1, cout)
    dweight = (cols.T @ d2).reshape(3, 3, C, cout).transpose(3, 2, 0, 1)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = (d2 @ _kernel_matrix(weight).T).reshape(B, T, M, 9, C)
    dxp = np.zeros((B, T + 2, M + 2, C), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + T, j:j + M, :] += dcols[:, :, :, 3 * i + j, :]
    return dxp[:, 1:-1, 1:-1, :], dweight, dbias


# ---------------------------------------------------------------------------
# batch normalisation over (B, T, M) per channel; statistics use valid frames only
# ---------------------------------------------------------------------------

def bn_forward(x, scale, shift, mask, running_mean=None, running_var=None, training=True):
    if not training:
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        return x * (scale * inv) + (shift - running_mean * scale * inv), None
    C = x.shape[-1]
    if mask.all():
        w = None
        flat = x.reshape(-1, C)
        n = flat.shape[0]
        mean = flat.mean(axis=0)
        centred = x - mean
        var = np.einsum("ij,ij->j", centred.reshape(-1, C), centred.reshape(-1, C)) / n
    else:
        w = mask[:, :, None, None].astype(x.dtype)
        n = w.sum() * x.shape[2]
        mean = (x * w).sum(axis=(0, 1, 2)) / n
        centred = x - mean
        var = (centred * centred * w).sum(axis=(0, 1, 2)) / n
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centred * inv
    return xhat * scale + shift, (xhat, inv, scale, w, n, mean, var)


def bn_backward(dout, cache):
    xhat, inv, scale, w, n, _, _ = cache
    C = dout.shape[-1]
    d2 = dout.reshape(-1, C)
    dscale = np.einsum("ij,ij->j", d2, xhat.reshape(-1, C))
    dshift = d2.sum(axis=0)
    if w is None:
        dx = (dout - (dshift / n) - xhat * (dscale / n)) * (scale * inv)
    else:
        dx = scale * inv * (dout - w * (dshift / n) - w * xhat * (dscale / n))
    return dx, dscale, dshift


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


# ---------------------------------------------------------------------------
# max pooling along the mel axis only
# ---------------------------------------------------------------------------

def freq_pool_forward(x, factor):
    B, T, M, C = x.shape
    if factor == 1:
        return x, None
    blocks = x.reshape(B, T, M // factor, factor, C)
    out = blocks[:, :, :, 0, :].copy()
    for k in range(1, factor):
        np.maximum(out, blocks[:, :, :, k, :], out=out)
    return out, (x.shape, blocks, out, factor)


def freq_pool_backward(dout, cache):
    if cache is None:
        return dout
    shape, blocks, out, factor = cache
    B, T, M, C = shape
    dblocks = np.zeros((B, T, M // factor, factor, C), dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    # route to the first maximal element of each block
    for k in range(factor):
        hit = (blocks[:, :, :, k, :] == out) & ~taken
        dblocks[:, :, :, k, :] = dout * hit
        taken |= hit
    return dblocks.reshape(shape)


# ---------------------------------------------------------------------------
# GRU, one direction. Gate order in the stacked weights: update z, reset r, candidate n.
#   z = sig(W_z x + b_z + U_z h + c_z)
#   r = sig(W_r x + b_r + U_r h + c_r)
#   n = tanh(W_n x + b_n + r * (U_n h + c_n))
#   h' = (1 - z) * n + z * h, and h is held over masked frames.
# ---------------------------------------------------------------------------

def gru_forward(x, mask, W, U, bx, bh, reverse=False):
    B, T, _ = x.shape
    H = U.shape[1]
    if reverse:
        x, mask = x[:, ::-1], mask[:, ::-1]
    xp = x @ W.T + bx  # (B, T, 3H)
    m = mask.astype(x.dtype)
    h = np.zeros((B, H), dtype=x.dtype)
    out = np.empty((B, T, H), dtype=x.dtype)
    hs_prev = np.empty((T, B, H), dtype=x.dtype)
    zs = np.empty_like(hs_prev)
    rs = np.empty_like(hs_prev)
    ns = np.empty_like(hs_prev)
    hns = np.empty_like(hs_prev)
    for t in range(T):
        hp = h @ U.T + bh
        a = xp[:, t]
        z = _gate(a[:, :H] + hp[:, :H])
        r = _gate(a[:, H:2 * H] + hp[:, H:2 * H])
        n = np.tanh(a[:, 2 * H:] + r * hp[:, 2 * H:])
        hs_prev[t], zs[t], rs[t], ns[t], hns[t] = h, z, r, n, hp[:, 2 * H:]
        mt = m[:, t, None]
        h = mt * ((1 - z) * n + z * h) + (1 - mt) * h
        out[:, t] = h
    if reverse:
        out = out[:, ::-1]
    return out, (x, m, W, U, hs_prev, zs, rs, ns, hns, reverse)


def gru_backward(dout, cache):
    x, m, W, U, hs_prev, zs, rs, ns, hns, reverse = cache
    if reverse:
        dout = dout[:, ::-1]
    B, T, _ = x.shape
    H = U.shape[1]
    dxp = np.empty((B, T, 3 * H), dtype=dout.dtype)
    dU = np.zeros_like(U)
    dbh = np.zeros(3 * H, dtype=dout.dtype)
    dh = np.zeros((B, H), dtype=dout.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh + dout[:, t]
        mt = m[:, t, None]
        h_prev, z, r, n, hn = hs_prev[t], zs[t], rs[t], ns[t], hns[t]
        dnew = mt * dh
        dh_prev = (1 - mt) * dh + dnew * z
        dn_pre = dnew * (1 - z) * (1 - n * n)
        dz_pre = dnew * (h_prev - n) * z * (1 - z)
        dr_pre = dn_pre * hn * r * (1 - r)
        dhp = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
        dxp[:, t] = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
        dU += dhp.T @ h_prev
        dbh += dhp.sum(axis=0)
        dh = dh_prev + dhp @ U
    flat = dxp.reshape(-1, 3 * H)
    dW = flat.T @ x.reshape(-1, x.shape[2])
    dbx = flat.sum(axis=0)
    dx = dxp @ W
    if reverse:
        dx = dx[:, ::-1]
    return dx, dW, dU, dbx, dbh


# ---------------------------------------------------------------------------
# frame-wise dense layer
# ---------------------------------------------------------------------------

def dense_forward(x, weight, bias):
    return x @ weight + bias, (x, weight)


def dense_backward(dout, cache):
    x, weight = cache
    C = dout.shape[-1]
    d2 = dout.reshape(-1, C)
    dweight = x.reshape(-1, x.shape[-1]).T @ d2
    return dout @ weight.T, dweight, d2.sum(axis=0)
