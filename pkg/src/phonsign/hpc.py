"""Hierarchical prototype classifier: component matching, sign embedding, cosine logits."""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .pdm import COMPONENTS, NORM_EPS

DEFAULT_COUNTS = (30, 15, 10, 8)


def capacity(counts) -> int:
    """Number of pure phonological configurations: the product of bank sizes."""
    counts = [int(c) for c in counts]
    if any(c <= 0 for c in counts):
        raise ValueError("prototype counts must be positive")
    return math.prod(counts)


def unit_rows(rng, n: int, d: int) -> np.ndarray:
    w = rng.normal(size=(n, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def init_hpc(rng, d_comp: int, d_model: int, d_embed: int, counts, n_classes: int,
             learned_sign_bank: bool = True, prefix: str = "hpc") -> dict:
    p = {}
    for name, n in zip(COMPONENTS, counts):
        p[f"{prefix}.P_{name}"] = unit_rows(rng, n, d_comp)
    d_in = sum(counts) + d_model
    W_e = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_embed))
    # the temporal-summary rows start at zero so the embedding is initially
    # a function of the component similarities alone
    W_e[sum(counts):] = 0.0
    p[f"{prefix}.W_e"] = W_e
    if learned_sign_bank:
        p[f"{prefix}.P_sign"] = unit_rows(rng, n_classes, d_embed)
    return p


def component_similarity(c_bar, bank, tau: float, eps: float = 0.0) -> ag.Tensor:
    """softmax over prototypes of cos(c_bar, p_j) / tau."""
    c_bar = ag.as_tensor(c_bar)
    if eps == 0.0 and np.any(np.linalg.norm(c_bar.data, axis=-1) == 0):
        raise ValueError("zero-norm component vector: cosine undefined")
    cos = ag.cosine_matrix(_as_rows(c_bar), bank, eps=eps)
    s = ag.softmax(cos * (1.0 / tau), axis=-1)
    return ag.reshape(s, c_bar.shape[:-1] + (s.shape[-1],))


def _as_rows(v: ag.Tensor) -> ag.Tensor:
    return v if v.ndim >= 2 else ag.reshape(v, (1,) + v.shape)


def sign_embedding(sims, g_bar, W_e) -> ag.Tensor:
    """e = W_e [s_hand || s_loc || s_mov || s_ori || g_bar] (row-vector convention)."""
    g_bar = ag.as_tensor(g_bar)
    return ag.concat(list(sims) + [g_bar], axis=-1) @ W_e


def composed_sign_bank(vertices: np.ndarray, W_e, d_model: int) -> ag.Tensor:
    """Sign prototypes built from pure configurations.

    ``vertices`` is (K, sum N_i) with one one-hot block per component. Each
    class prototype is the embedding of its vertex with a zero temporal part,
    so a class never seen in training still has a well-defined prototype.
    """
    full = np.concatenate([vertices, np.zeros((vertices.shape[0], d_model))], axis=1)
    return ag.matmul(ag.Tensor(full), W_e)


def vertex_matrix(class_tuples, counts) -> np.ndarray:
    tuples = np.asarray(class_tuples, dtype=int)
    if tuples.ndim != 2 or tuples.shape[1] != len(counts):
        raise ValueError("class tuples must be (K, 4)")
    if np.any(tuples < 0) or np.any(tuples >= np.asarray(counts)):
        raise ValueError("a class tuple indexes past its prototype bank")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    V = np.zeros((len(tuples), sum(counts)))
    for i in range(len(counts)):
        V[np.arange(len(tuples)), offsets[i] + tuples[:, i]] = 1.0
    return V


def sign_logits(e, sign_bank, tau: float, eps: float = 0.0) -> ag.Tensor:
    """cos(e, p_k) / tau for every sign prototype k."""
    e = ag.as_tensor(e)
    if eps == 0.0 and np.any(np.linalg.norm(e.data, axis=-1) == 0):
        raise ValueError("zero-norm sign embedding: cosine undefined")
    out = ag.cosine_matrix(_as_rows(e), sign_bank, eps=eps) * (1.0 / tau)
    return ag.reshape(out, e.shape[:-1] + (out.shape[-1],))


def diversity_loss(bank) -> ag.Tensor:
    """Mean squared inner product over ordered pairs of distinct rows."""
    bank = ag.as_tensor(bank)
    M = bank.shape[0]
    if M < 2:
        raise ValueError("diversity loss needs at least two prototypes")
    gram = bank @ ag.transpose(bank)
    off = gram * ag.Tensor(1.0 - np.eye(M))
    return ag.tsum(off * off) * (1.0 / (M * (M - 1)))


def diversity_grad_tangent(bank: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the diversity loss projected onto the sphere.

    row k: 4 / (M (M-1)) * sum_{j != k} <p_k, p_j> (p_j - <p_k, p_j> p_k)
    """
    P = np.asarray(bank, dtype=np.float64)
    M = len(P)
    G = P @ P.T
    np.fill_diagonal(G, 0.0)
    return 4.0 / (M * (M - 1)) * (G @ P - (G * G).sum(axis=1, keepdims=True) * P)


def tangent_project(bank: np.ndarray, grad: np.ndarray) -> np.ndarray:
    P = np.asarray(bank)
    return grad - (grad * P).sum(axis=1, keepdims=True) * P


def renormalize_rows(bank: np.ndarray) -> np.ndarray:
    return bank / np.linalg.norm(bank, axis=1, keepdims=True)


def block_embedding(components) -> np.ndarray:
    """Concatenate per-component vectors into one joint embedding."""
    return np.concatenate([np.asarray(c, dtype=np.float64) for c in components])

