"""Pure-numpy diagonal selective scan, same contract as the compiled kernel."""

import numpy as np


def scan_forward(u, a, b, c, store_states=True):
    B, T, M = u.shape
    S = a.shape[2]
    y = np.empty((B, T, M))
    states = np.empty((B, T, M, S)) if store_states else None
    x = np.zeros((B, M, S))
    for t in range(T):
        x = a[:, t, None, :] * x + u[:, t, :, None] * b[:, t, None, :]
        y[:, t] = np.einsum("bms,bs->bm", x, c[:, t])
        if store_states:
            states[:, t] = x
    return y, states


def scan_backward(gy, u, a, b, c, states):
    B, T, M = u.shape
    S = a.shape[2]
    gu = np.empty((B, T, M))
    ga = np.zeros((B, T, S))
    gb = np.empty((B, T, S))
    gc = np.empty((B, T, S))
    gx = np.zeros((B, M, S))
    for t in range(T - 1, -1, -1):
        x_t = states[:, t]
        gc[:, t] = np.einsum("bm,bms->bs", gy[:, t], x_t)
        if t + 1 < T:
            gx = gx * a[:, t + 1, None, :] + gy[:, t, :, None] * c[:, t, None, :]
        else:
            gx = gy[:, t, :, None] * c[:, t, None, :]
        if t > 0:
            ga[:, t] = np.einsum("bms,bms->bs", gx, states[:, t - 1])
        gb[:, t] = np.einsum("bms,bm->bs", gx, u[:, t])
        gu[:, t] = np.einsum("bms,bs->bm", gx, b[:, t])
    return gu, ga, gb, gc
