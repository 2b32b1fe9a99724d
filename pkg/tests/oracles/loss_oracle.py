"""Straight-line reimplementation of the training loss, loops and scalars only.

Shares nothing with the package except the parameter dictionary and the
hand graph's neighbour lists. Run as a script to print the frozen value.
"""

import math

import numpy as np

EPS = 1e-8


def gelu(v):
    return v * 0.5 * math.erfc(-v / math.sqrt(2.0))


def softplus(v):
    return max(v, 0.0) + math.log1p(math.exp(-abs(v)))


def cos(a, b):
    return float(a @ b) / (math.sqrt(float(a @ a) + EPS * EPS) * math.sqrt(float(b @ b) + EPS * EPS))


def softmax(v):
    m = max(v)
    ex = [math.exp(x - m) for x in v]
    s = sum(ex)
    return np.array([x / s for x in ex])


def frame_encoder(frame, p, neighbours, heads):
    h = frame @ p["agan.in.W"] + p["agan.in.b"]
    W, a = p["agan.gat0.W"], p["agan.gat0.a"]
    dh = W.shape[1] // heads
    wh = h @ W
    out = np.zeros_like(wh)
    for k in range(heads):
        cols = slice(k * dh, (k + 1) * dh)
        for i in range(len(h)):
            nb = neighbours[i]
            score = []
            for j in nb:
                s = float(a[k, :dh] @ wh[i, cols] + a[k, dh:] @ wh[j, cols])
                score.append(s if s > 0 else 0.2 * s)
            alpha = softmax(score)
            for w, j in zip(alpha, nb):
                out[i, cols] += w * wh[j, cols]
    out = np.vectorize(gelu)(out)
    return out.mean(axis=0)


def direction(F, p, pre, reverse):
    T = len(F)
    u = F @ p[pre + ".W_up"]
    order = range(T - 1, -1, -1) if reverse else range(T)
    A = [-math.exp(v) for v in p[pre + ".log_neg_A"]]
    S, M = len(A), u.shape[1]
    state = np.zeros((S, M))
    y = np.zeros_like(u)
    for t in order:
        d = softplus(float(u[t] @ p[pre + ".w_dt"] + p[pre + ".b_dt"]))
        B = p[pre + ".W_B"] @ u[t]
        C = p[pre + ".W_C"] @ u[t]
        for s in range(S):
            for m in range(M):
                state[s, m] = math.exp(d * A[s]) * state[s, m] + math.expm1(d * A[s]) / A[s] * B[s] * u[t, m]
        for m in range(M):
            y[t, m] = sum(C[s] * state[s, m] for s in range(S))
    return y @ p[pre + ".W_down"]


def sample_terms(x, label, p, neighbours, heads, tau, smoothing):
    T = len(x)
    z = np.stack([frame_encoder(x[t], p, neighbours, heads) for t in range(T)])
    streams = {}
    for name in ("hand", "loc", "mov", "ori"):
        hid = np.vectorize(gelu)(z @ p[f"pdm.{name}.W1"] + p[f"pdm.{name}.b1"])
        streams[name] = hid @ p[f"pdm.{name}.W2"] + p[f"pdm.{name}.b2"]
    mov = streams["mov"]
    k = p["pdm.conv"]
    half = len(k) // 2
    conv = mov.copy()
    for t in range(T):
        for j in range(len(k)):
            s = t + j - half
            if 0 <= s < T:
                conv[t] += mov[s] @ k[j]
    F = np.concatenate([streams["hand"], streams["loc"], conv, streams["ori"]], axis=1)
    F = F @ p["pdm.W_fuse"] + p["pdm.b_fuse"]
    g = F + np.concatenate([direction(F, p, "ssm0.fwd", False), direction(F, p, "ssm0.bwd", True)],
                           axis=1) @ p["ssm0.W_out"]
    g_bar = g.mean(axis=0)
    pooled = [streams[n].mean(axis=0) for n in ("hand", "loc", "mov", "ori")]

    sims = []
    for c, n in zip(pooled, ("hand", "loc", "mov", "ori")):
        bank = p[f"hpc.P_{n}"]
        sims.append(softmax([cos(c, row) / tau for row in bank]))
    e = np.concatenate(sims + [g_bar]) @ p["hpc.W_e"]
    logits = [cos(e, row) / tau for row in p["hpc.P_sign"]]
    K = len(logits)
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    ce = 0.0
    for i, v in enumerate(logits):
        q = smoothing / K + (1.0 - smoothing if i == label else 0.0)
        ce -= q * (v - lse)
    ortho = 0.0
    for i in range(4):
        for j in range(i + 1, 4):
            ortho += cos(pooled[i], pooled[j]) ** 2
    return ce, ortho


def diversity(bank):
    M = len(bank)
    total = 0.0
    for i in range(M):
        for j in range(M):
            if i != j:
                total += float(bank[i] @ bank[j]) ** 2
    return total / (M * (M - 1))


def oracle_loss(x, labels, p, neighbours, heads=2, tau=0.1, smoothing=0.1, lam_o=0.1, lam_d=0.01):
    ces, orths = zip(*(sample_terms(xi, yi, p, neighbours, heads, tau, smoothing) for xi, yi in zip(x, labels)))
    div = sum(diversity(p[f"hpc.P_{n}"]) for n in ("hand", "loc", "mov", "ori")) / 4
    return sum(ces) / len(ces) + lam_o * sum(orths) / len(orths) + lam_d * div


def micro_instance():
    """Seed-0 instance: K=4, T=4, N=21, every width 8."""
    from phonsign.model import ModelConfig, init_params

    cfg = ModelConfig(d_model=8, d_comp=8, d_state=8, expansion=1, d_embed=8, gat_heads=2, gat_layers=1,
                      ssm_layers=1, proto_counts=(8, 8, 8, 8), n_classes=4, frames=4, dropout=0.0)
    params = init_params(cfg, seed=0)
    r = np.random.Generator(np.random.Philox(0))
    x = r.normal(size=(3, 4, 21, 3))
    labels = np.array([0, 3, 1])
    return cfg, params, x, labels


def neighbours_of(mask):
    return [list(np.flatnonzero(row)) for row in mask]


if __name__ == "__main__":
    from phonsign.graph import build_hand_graph

    cfg, params, x, labels = micro_instance()
    print(repr(oracle_loss(x, labels, params, neighbours_of(build_hand_graph().mask))))
