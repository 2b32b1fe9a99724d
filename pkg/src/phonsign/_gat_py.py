"""Numpy edge-list graph attention; same contract as the compiled ``_gat_ext``.

Works node-major internally so gathers copy contiguous blocks and segment
sums become one matrix product with an incidence matrix.
"""

from __future__ import annotations

import numpy as np


def _incidence(ids: np.ndarray, n: int) -> np.ndarray:
    inc = np.zeros((n, len(ids)))
    inc[ids, np.arange(len(ids))] = 1.0
    return inc


def _scatter(inc: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sum edge-major ``v`` (E, ...) into node-major (N, ...)."""
    return (inc @ v.reshape(v.shape[0], -1)).reshape((inc.shape[0],) + v.shape[1:])


def _edges(src, starts):
    N = len(starts) - 1
    dst = np.repeat(np.arange(N), np.diff(starts))
    return dst, _incidence(dst, N), _incidence(src, N)


def gat_forward(H, a, src, starts, slope):
    M, N, K, dh = H.shape
    dst, to_dst, _ = _edges(src, starts)
    Hn = np.ascontiguousarray(np.moveaxis(H, 1, 0))  # (N, M, K, Dh)
    recv = np.einsum("nmkd,kd->nmk", Hn, a[:, :dh])
    send = np.einsum("nmkd,kd->nmk", Hn, a[:, dh:])
    pre = recv[dst] + send[src]  # (E, M, K)
    s = np.where(pre > 0, pre, slope * pre)
    s -= np.maximum.reduceat(s, starts[:-1], axis=0)[dst]
    alpha = np.exp(s, out=s)
    alpha /= _scatter(to_dst, alpha)[dst]
    out = _scatter(to_dst, alpha[..., None] * Hn[src])
    min_abs = float(np.abs(pre).min()) if pre.size else np.inf
    return (np.ascontiguousarray(np.moveaxis(out, 0, 1)),
            np.ascontiguousarray(np.moveaxis(alpha, 0, -1)),
            np.ascontiguousarray(np.moveaxis(pre, 0, -1)), min_abs)


def gat_backward(g, H, a, src, starts, alpha, pre, slope):
    M, N, K, dh = H.shape
    dst, to_dst, to_src = _edges(src, starts)
    Hn = np.ascontiguousarray(np.moveaxis(H, 1, 0))
    gn = np.ascontiguousarray(np.moveaxis(g, 1, 0))
    alpha = np.moveaxis(alpha, -1, 0)  # (E, M, K)
    pre = np.moveaxis(pre, -1, 0)
    g_edge = gn[dst]
    g_alpha = np.einsum("emkd,emkd->emk", g_edge, Hn[src])
    gs = alpha * (g_alpha - _scatter(to_dst, alpha * g_alpha)[dst])
    ge = np.where(pre > 0, gs, slope * gs)
    g_recv = _scatter(to_dst, ge)
    g_send = _scatter(to_src, ge)
    gH = _scatter(to_src, alpha[..., None] * g_edge)
    gH += g_recv[..., None] * a[:, :dh] + g_send[..., None] * a[:, dh:]
    Hf = Hn.reshape(-1, K, dh)
    ga = np.concatenate([np.einsum("nk,nkd->kd", g_recv.reshape(-1, K), Hf),
                         np.einsum("nk,nkd->kd", g_send.reshape(-1, K), Hf)], axis=-1)
    return np.ascontiguousarray(np.moveaxis(gH, 0, 1)), ga
