"""Anatomically masked multi-head graph attention (per-frame spatial encoder)."""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np

from . import _gat_py
from . import autograd as ag
from .graph import AnatomicalGraph

try:
    if os.environ.get("PHONSIGN_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _gat_ext as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_backends = {"python": _gat_py}
if _compiled is not None:
    _backends["compiled"] = _compiled

LEAKY_SLOPE = 0.2


def init_gat_layer(rng, d_in: int, d_out: int, heads: int, prefix: str) -> dict:
    if d_out % heads:
        raise ValueError(f"output width {d_out} not divisible by {heads} heads")
    d_head = d_out // heads
    return {
        f"{prefix}.W": rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, heads * d_head)),
        f"{prefix}.a": rng.normal(0.0, 1.0 / np.sqrt(d_head), (heads, 2 * d_head)),
    }


def init_agan(rng, coord_dims: int, d_model: int, heads: int, layers: int, prefix: str = "agan") -> dict:
    p = {
        f"{prefix}.in.W": rng.normal(0.0, 1.0 / np.sqrt(coord_dims), (coord_dims, d_model)),
        f"{prefix}.in.b": np.zeros(d_model),
    }
    for layer in range(layers):
        p.update(init_gat_layer(rng, d_model, d_model, heads, f"{prefix}.gat{layer}"))
    return p


@dataclass(frozen=True)
class EdgeIndex:
    """Attention edges (self-loops included) grouped by receiver node.

    Edges ``starts[i]`` to ``starts[i + 1] - 1`` deliver into node ``i``
    from the nodes ``src[e]``.
    """
    src: np.ndarray
    starts: np.ndarray


@functools.lru_cache(maxsize=None)
def edge_index(graph: AnatomicalGraph) -> EdgeIndex:
    dst, src = np.nonzero(graph.mask)  # row-major: already grouped by receiver
    starts = np.searchsorted(dst, np.arange(graph.node_count + 1)).astype(np.int64)
    return EdgeIndex(np.ascontiguousarray(src, dtype=np.int64), starts)


def edge_attention(Wh, a, graph: AnatomicalGraph, backend: str | None = None) -> ag.Tensor:
    """Masked multi-head attention over graph edges as one differentiable primitive.

    ``Wh``: (..., N, K, Dh) projected node features; ``a``: (K, 2 Dh). Returns
    (..., N, K, Dh) with ``out_i = sum_{j in nbr(i)} alpha_ij Wh_j`` per head.
    Only the edges of the graph are scored, so the cost is O(E) rather than
    O(N^2) per frame.
    """
    Wh, a = ag.as_tensor(Wh), ag.as_tensor(a)
    kern = _backends[backend or BACKEND]
    idx = edge_index(graph)
    shape = Wh.shape
    H = np.ascontiguousarray(Wh.data.reshape((-1,) + shape[-3:]), dtype=np.float64)
    A = np.ascontiguousarray(a.data, dtype=np.float64)
    out, alpha, pre, min_abs = kern.gat_forward(H, A, idx.src, idx.starts, LEAKY_SLOPE)
    if ag._kink_state is not None:
        ag._kink_state[0] = min(ag._kink_state[0], min_abs)

    def vjp(g):
        g = np.ascontiguousarray(g.reshape(H.shape), dtype=np.float64)
        gH, ga = kern.gat_backward(g, H, A, idx.src, idx.starts, alpha, pre, LEAKY_SLOPE)
        return gH.reshape(shape), ga

    return ag._make(out.reshape(shape), (Wh, a), vjp)


def gat_layer(h, graph: AnatomicalGraph, W, a) -> ag.Tensor:
    """One masked attention layer; heads are concatenated.

    ``h``: (..., N, D_in). ``W``: (D_in, K * D_head). ``a``: (K, 2 * D_head),
    the first half scoring the receiving node and the second the sender.
    """
    h, W, a = _check(h, graph, W, a)
    heads, two_dh = a.shape
    lead, N = h.shape[:-2], h.shape[-2]
    Wh = ag.reshape(h @ W, lead + (N, heads, two_dh // 2))
    return ag.reshape(edge_attention(Wh, a, graph), lead + (N, W.shape[1]))


def _check(h, graph, W, a):
    h, W, a = ag.as_tensor(h), ag.as_tensor(W), ag.as_tensor(a)
    N = h.shape[-2]
    if N != graph.node_count:
        raise ValueError(f"features have {N} nodes, graph has {graph.node_count}")
    if h.shape[-1] != W.shape[0]:
        raise ValueError(f"feature width {h.shape[-1]} does not match weight {W.shape}")
    heads, two_dh = a.shape
    if two_dh % 2 or W.shape[1] != heads * (two_dh // 2):
        raise ValueError(f"weight {W.shape} inconsistent with attention vectors {a.shape}")
    return h, W, a


def gat_layer_dense(h, graph: AnatomicalGraph, W, a) -> ag.Tensor:
    """Dense reference for :func:`gat_layer`: full N x N scores, masked softmax.

    ``h``: (..., N, D_in). ``W``: (D_in, K * D_head). ``a``: (K, 2 * D_head),
    the first half scoring the receiving node and the second the sender.
    """
    h, W, a = _check(h, graph, W, a)
    N = h.shape[-2]
    heads, two_dh = a.shape
    d_head = two_dh // 2
    lead = h.shape[:-2]
    Wh = ag.reshape(h @ W, lead + (N, heads, d_head))
    Wh = ag.swapaxes(Wh, -3, -2)  # (..., K, N, Dh)
    a_dst = ag.reshape(a[:, :d_head], (heads, 1, d_head))
    a_src = ag.reshape(a[:, d_head:], (heads, 1, d_head))
    recv = ag.tsum(Wh * a_dst, axis=-1)  # (..., K, N)
    send = ag.tsum(Wh * a_src, axis=-1)
    scores = ag.reshape(recv, recv.shape + (1,)) + ag.reshape(send, send.shape[:-1] + (1, N))
    alpha = ag.masked_softmax(ag.leaky_relu(scores, LEAKY_SLOPE), graph.mask)
    out = ag.swapaxes(alpha @ Wh, -3, -2)  # (..., N, K, Dh)
    return ag.reshape(out, lead + (N, heads * d_head))


def attention_weights(h, graph: AnatomicalGraph, W, a) -> np.ndarray:
    """Attention coefficients (..., K, N, N) of one layer, for inspection."""
    h, W, a = (np.asarray(ag.as_tensor(t).data) for t in (h, W, a))
    heads, two_dh = a.shape
    d_head = two_dh // 2
    N = h.shape[-2]
    Wh = np.swapaxes((h @ W).reshape(h.shape[:-2] + (N, heads, d_head)), -3, -2)
    recv = (Wh * a[:, None, :d_head]).sum(-1)
    send = (Wh * a[:, None, d_head:]).sum(-1)
    s = recv[..., :, None] + send[..., None, :]
    s = np.where(s > 0, s, LEAKY_SLOPE * s)
    return ag.masked_softmax(s, graph.mask).data


def agan_forward(x, graph: AnatomicalGraph, p: dict, layers: int, prefix: str = "agan",
                 dropout: float = 0.0, rng=None) -> ag.Tensor:
    """(..., T, N, C) landmarks -> (..., T, D) per-frame features.

    Frames are encoded independently: shared input projection, ``layers``
    masked attention layers each followed by GELU, then a mean over nodes.
    """
    x = ag.as_tensor(x)
    h = x @ p[f"{prefix}.in.W"] + p[f"{prefix}.in.b"]
    for layer in range(layers):
        h = ag.gelu(gat_layer(h, graph, p[f"{prefix}.gat{layer}.W"], p[f"{prefix}.gat{layer}.a"]))
        h = ag.dropout(h, dropout, rng)
    return ag.mean(h, axis=-2)
