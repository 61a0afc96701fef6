"""Fused differentiable ops used by the network layers.

Each op computes its forward pass with plain numpy and registers a
hand-written local gradient rule on the tape.  Sequence tensors are laid out
``(batch, time, channels)``.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_result

NORM_RELU_EPS = 1e-5


def causal_conv1d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Left-padded dilated convolution along time.

    ``x``: (B, T, C_in); ``weight``: (k, C_in, C_out); ``bias``: (C_out,).
    ``y[t] = sum_j weight[j]^T x[t - (k-1-j)*dilation]`` with zeros before t=0.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k = weight.shape[0]
    B, T, _ = x.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((B, pad, x.shape[2])), x.data], axis=1)
    y = np.zeros((B, T, weight.shape[2]))
    for j in range(k):
        s = j * dilation
        y += xp[:, s:s + T] @ weight.data[j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                s = j * dilation
                gxp[:, s:s + T] += g @ weight.data[j].T
            gx = gxp[:, pad:]
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[2])
            gw = np.stack([
                xp[:, j * dilation:j * dilation + T].reshape(-1, xp.shape[2]).T @ g2
                for j in range(k)
            ])
        out = [gx, gw]
        if bias is not None:
            out.append(g.sum(axis=(0, 1)))
        return tuple(out)

    return make_result(y, parents, bw, "causal_conv1d")


def graph_conv(x, adjacency, weight) -> Tensor:
    """Sum over partitions of ``adjacency[p] @ x @ weight[p]``, joint-major layout.

    ``x``: (N, M, C_in) features of N joints over M frames; ``adjacency``:
    (P, N, N); ``weight``: (P, C_in, C_out).  Returns (N, M, C_out).  Keeping
    joints leading makes every product a plain contiguous matrix multiply.
    """
    x, adjacency, weight = map(as_tensor, (x, adjacency, weight))
    N, M, C = x.shape
    P = adjacency.shape[0]
    xf = x.data.reshape(N, M * C)
    z = (adjacency.data.reshape(P * N, N) @ xf).reshape(P, N * M, C)
    y = z[0] @ weight.data[0]
    for p in range(1, P):
        y += z[p] @ weight.data[p]

    def bw(g):
        g = g.reshape(N * M, -1)
        gw = np.stack([z[p].T @ g for p in range(P)])
        gz = np.stack([g @ weight.data[p].T for p in range(P)]).reshape(P * N, M * C)
        ga = gx = None
        if adjacency.requires_grad:
            ga = (gz @ xf.T).reshape(P, N, N)
        if x.requires_grad:
            gx = (adjacency.data.reshape(P * N, N).T @ gz).reshape(N, M, C)
        return gx, ga, gw

    return make_result(y.reshape(N, M, -1), (x, adjacency, weight), bw, "graph_conv")


def pool1d(x, mode: str = "max") -> Tensor:
    """Stride-2, width-2 pooling along time; T must be even."""
    x = as_tensor(x)
    B, T, C = x.shape
    if T % 2:
        raise ValueError(f"pool1d needs even length, got {T}")
    pairs = x.data.reshape(B, T // 2, 2, C)
    if mode == "max":
        # ties route the gradient to the earlier frame
        first = pairs[:, :, 0] >= pairs[:, :, 1]
        y = np.where(first, pairs[:, :, 0], pairs[:, :, 1])

        def bw(g):
            gp = np.zeros_like(pairs)
            gp[:, :, 0] = np.where(first, g, 0.0)
            gp[:, :, 1] = np.where(first, 0.0, g)
            return (gp.reshape(B, T, C),)
    elif mode == "avg":
        y = pairs.mean(axis=2)

        def bw(g):
            return (np.repeat(g * 0.5, 2, axis=1),)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return make_result(y, (x,), bw, f"{mode}_pool1d")


def upsample2(x) -> Tensor:
    """Nearest-neighbour upsampling by 2 along time (each frame repeated)."""
    x = as_tensor(x)
    B, T, C = x.shape
    return make_result(np.repeat(x.data, 2, axis=1), (x,),
                       lambda g: (g.reshape(B, T, 2, C).sum(axis=2),), "upsample2")


def norm_relu(x) -> Tensor:
    """ReLU followed by division by the per-frame channel maximum."""
    x = as_tensor(x)
    r = np.maximum(x.data, 0.0)
    m = r.max(axis=-1, keepdims=True)
    denom = m + NORM_RELU_EPS
    y = r / denom
    arg = r.argmax(axis=-1)[..., None]

    def bw(g):
        gr = g / denom
        coupling = -(g * r).sum(axis=-1, keepdims=True) / (denom * denom)
        np.put_along_axis(gr, arg, np.take_along_axis(gr, arg, -1) + coupling, -1)
        return (gr * (x.data > 0),)

    return make_result(y, (x,), bw, "norm_relu")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def adaptive_avg_pool_matrix(length: int, out: int) -> sparse.csr_matrix:
    """Sparse (length, out) averaging map with bins [floor(i*L/o), ceil((i+1)*L/o))."""
    rows, cols, vals = [], [], []
    for i in range(out):
        start = (i * length) // out
        end = -((-(i + 1) * length) // out)
        for r in range(start, end):
            rows.append(r)
            cols.append(i)
            vals.append(1.0 / (end - start))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(length, out))


def linear_map(x, matrix: sparse.spmatrix) -> Tensor:
    """Apply a fixed (non-learned) sparse matrix to the last axis."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    y = np.asarray(flat @ matrix).reshape(*lead, matrix.shape[1])
    mt = matrix.T.tocsr()
    return make_result(
        y, (x,),
        lambda g: (np.asarray(g.reshape(-1, g.shape[-1]) @ mt).reshape(x.shape),),
        "linear_map")


def fill_masked(x, mask: np.ndarray, value: float) -> Tensor:
    """Overwrite frames where ``mask`` is False with a constant.

    ``x``: (B, T, ...); ``mask``: (B, T) booleans, True on real frames.
    """
    x = as_tensor(x)
    keep = mask.reshape(mask.shape + (1,) * (x.ndim - 2))
    return make_result(np.where(keep, x.data, value), (x,), lambda g: (g * keep,), "fill_masked")


def lstm(x, w_input, w_hidden, bias) -> Tensor:
    """One unidirectional LSTM layer from zero initial state.

    ``x``: (B, T, F); ``w_input``: (F, 4H); ``w_hidden``: (H, 4H);
    ``bias``: (4H,).  Gate blocks are ordered input, forget, cell, output.
    Returns the hidden sequence (B, T, H); backward is full BPTT.
    """
    x, w_input, w_hidden, bias = map(as_tensor, (x, w_input, w_hidden, bias))
    B, T, _ = x.shape
    H = w_hidden.shape[0]
    pre_x = x.data @ w_input.data + bias.data
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.zeros((B, T, 4 * H))
    tanh_c = np.zeros((B, T, H))
    wh = w_hidden.data
    for t in range(T):
        z = pre_x[:, t] + hs[:, t] @ wh
        i = expit(z[:, :H])
        f = expit(z[:, H:2 * H])
        c_hat = np.tanh(z[:, 2 * H:3 * H])
        o = expit(z[:, 3 * H:])
        c = f * cs[:, t] + i * c_hat
        tc = np.tanh(c)
        cs[:, t + 1] = c
        hs[:, t + 1] = o * tc
        gates[:, t] = np.concatenate([i, f, c_hat, o], axis=1)
        tanh_c[:, t] = tc

    def bw(g):
        dz_all = np.zeros((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            c_hat, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = tanh_c[:, t]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * c_hat * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - c_hat * c_hat)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = dz @ wh.T
            dc_next = dc * f
        flat_dz = dz_all.reshape(-1, 4 * H)
        gx = (dz_all @ w_input.data.T) if x.requires_grad else None
        gwi = x.data.reshape(-1, x.shape[2]).T @ flat_dz
        gwh = hs[:, :T].reshape(-1, H).T @ flat_dz
        gb = flat_dz.sum(axis=0)
        return gx, gwi, gwh, gb

    return make_result(hs[:, 1:].copy(), (x, w_input, w_hidden, bias), bw, "lstm")
