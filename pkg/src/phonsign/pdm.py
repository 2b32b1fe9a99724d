"""Phonological decomposition: four component streams and the orthogonality penalty."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autograd as ag

COMPONENTS = ("hand", "loc", "mov", "ori")
NORM_EPS = 1e-8


@dataclass
class ComponentSet:
    """Per-frame component streams (..., T, Dc) and their time means (..., Dc)."""

    hand: ag.Tensor
    loc: ag.Tensor
    mov: ag.Tensor
    ori: ag.Tensor
    mov_conv: ag.Tensor

    @property
    def streams(self) -> list[ag.Tensor]:
        return [self.hand, self.loc, self.mov, self.ori]

    def pooled(self) -> list[ag.Tensor]:
        return [ag.mean(s, axis=-2) for s in self.streams]


def init_pdm(rng, d_model: int, d_comp: int, kernel: int = 3, prefix: str = "pdm") -> dict:
    p = {}
    for name in COMPONENTS:
        p[f"{prefix}.{name}.W1"] = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model))
        p[f"{prefix}.{name}.b1"] = np.zeros(d_model)
        p[f"{prefix}.{name}.W2"] = rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_comp))
        p[f"{prefix}.{name}.b2"] = np.zeros(d_comp)
    p[f"{prefix}.conv"] = rng.normal(0.0, 0.5 / np.sqrt(kernel * d_comp), (kernel, d_comp, d_comp))
    p[f"{prefix}.W_fuse"] = rng.normal(0.0, 1.0 / np.sqrt(4 * d_comp), (4 * d_comp, d_model))
    p[f"{prefix}.b_fuse"] = np.zeros(d_model)
    return p


def pdm_forward(z, p: dict, prefix: str = "pdm", dropout: float = 0.0, rng=None):
    """(..., T, D) -> (ComponentSet, fused features (..., T, D))."""
    z = ag.as_tensor(z)
    if z.shape[-1] != np.shape(p[f"{prefix}.hand.W1"])[0]:
        raise ValueError(f"input width {z.shape[-1]} does not match decomposition weights")
    streams = {}
    for name in COMPONENTS:
        hid = ag.gelu(z @ p[f"{prefix}.{name}.W1"] + p[f"{prefix}.{name}.b1"])
        streams[name] = hid @ p[f"{prefix}.{name}.W2"] + p[f"{prefix}.{name}.b2"]
    mov_conv = streams["mov"] + ag.conv1d_same(streams["mov"], p[f"{prefix}.conv"])
    fused = ag.concat([streams["hand"], streams["loc"], mov_conv, streams["ori"]], axis=-1)
    F = fused @ p[f"{prefix}.W_fuse"] + p[f"{prefix}.b_fuse"]
    F = ag.dropout(F, dropout, rng)
    return ComponentSet(mov_conv=mov_conv, **streams), F


def orthogonality_loss(pooled, eps: float = 0.0) -> ag.Tensor:
    """Sum over the 6 unordered pairs of squared cosine similarity.

    ``pooled`` is a sequence of four (..., Dc) vectors or a (..., 4, Dc)
    array. Returns one value per leading index. With ``eps == 0`` a zero
    vector raises ``ValueError``.
    """
    if isinstance(pooled, (np.ndarray, ag.Tensor)):
        arr = ag.as_tensor(pooled)
        vecs = [arr[..., i, :] for i in range(arr.shape[-2])]
    else:
        vecs = [ag.as_tensor(v) for v in pooled]
    if eps == 0.0:
        for v in vecs:
            if np.any(np.linalg.norm(v.data, axis=-1) == 0):
                raise ValueError("zero-norm component vector: cosine undefined")
    unit = [ag.l2_normalize(v, eps=eps) for v in vecs]
    total = None
    for i, j in combinations(range(len(unit)), 2):
        term = ag.tsum(unit[i] * unit[j], axis=-1) ** 2
        total = term if total is None else total + term
    return total


def orthogonality_grad(pooled: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the orthogonality loss w.r.t. each pooled vector.

    d/dc_k = sum_{j != k} 2 cos_kj / (|c_k| |c_j|) * (c_j - cos_kj |c_j| / |c_k| c_k)
    """
    c = np.asarray(pooled, dtype=np.float64)
    norms = np.linalg.norm(c, axis=-1)
    if np.any(norms == 0):
        raise ValueError("zero-norm component vector: cosine undefined")
    cos = (c @ c.T) / np.outer(norms, norms)
    out = np.zeros_like(c)
    for k in range(len(c)):
        for j in range(len(c)):
            if j == k:
                continue
            out[k] += 2.0 * cos[k, j] / (norms[k] * norms[j]) * (c[j] - cos[k, j] * norms[j] / norms[k] * c[k])
    return out
