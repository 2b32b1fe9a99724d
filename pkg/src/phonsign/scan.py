"""Selective-scan primitive with a compiled core and a numpy fallback.

The compiled kernel (``_scan_ext``) is used when it was built and
``PHONSIGN_PURE_PYTHON`` is unset; otherwise the numpy loop in ``_scan_py``
runs. Both expose ``scan_forward`` / ``scan_backward`` with identical
contracts.
"""

from __future__ import annotations

import os

import numpy as np

from . import _scan_py
from .autograd import Tensor, _make, as_tensor

try:
    if os.environ.get("PHONSIGN_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _scan_ext as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
_backends = {"python": _scan_py}
if _compiled is not None:
    _backends["compiled"] = _compiled


def available_backends() -> list[str]:
    return list(_backends)


def get_kernels(backend: str | None = None):
    return _backends[backend or BACKEND]


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def scan(u, a, b, c, backend: str | None = None) -> Tensor:
    """Diagonal linear recurrence shared across channels.

    u: (B, T, M) inputs; a, b, c: (B, T, S) per-step decay, input and readout
    vectors. Returns y (B, T, M) with x_t = a_t * x_{t-1} + b_t u_t[m] and
    y_t[m] = <c_t, x_t[m]>, starting from x_0 = 0.
    """
    u, a, b, c = (as_tensor(t) for t in (u, a, b, c))
    k = get_kernels(backend)
    need_grad = any(t.requires_grad for t in (u, a, b, c))
    ud, ad, bd, cd = _c(u.data), _c(a.data), _c(b.data), _c(c.data)
    y, states = k.scan_forward(ud, ad, bd, cd, need_grad)

    def vjp(g):
        return k.scan_backward(_c(g), ud, ad, bd, cd, states)

    return _make(y, (u, a, b, c), vjp)


def scan_stream(u, a, b, c):
    """Inference-only scan that keeps a single (M, S) state per sequence.

    Yields y_t (B, M) one step at a time; nothing sized by T is allocated.
    """
    u, a, b, c = (np.asarray(t, dtype=np.float64) for t in (u, a, b, c))
    B, T, M = u.shape
    x = np.zeros((B, M, a.shape[2]))
    for t in range(T):
        x *= a[:, t, None, :]
        x += u[:, t, :, None] * b[:, t, None, :]
        yield np.einsum("bms,bs->bm", x, c[:, t])
