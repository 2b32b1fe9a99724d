"""Finite-difference gate for the full training loss on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import ModelConfig, forward, init_params, total_loss

GATE = 1e-4


def micro_config(**overrides) -> ModelConfig:
    cfg = dict(d_model=8, d_comp=4, d_state=4, gat_heads=2, gat_layers=1, ssm_layers=1,
               n_classes=4, frames=4, proto_counts=(3, 3, 3, 3))
    cfg.update(overrides)
    return ModelConfig(**cfg)


@dataclass
class GradcheckResult:
    max_rel_err: float
    per_tensor: dict
    input_seed: int
    kink_margin: float
    coords: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < GATE)


def micro_gradcheck(seed: int = 0, step: float = 1e-5, batch: int = 2, max_coords: int | None = None,
                    config: ModelConfig | None = None, max_redraws: int = 20) -> GradcheckResult:
    """Autodiff vs central differences of the total loss over every parameter tensor.

    Inputs whose LeakyReLU pre-activations fall within ``10 * step`` of the
    kink are redrawn, since a difference straddling it is not a derivative.
    """
    cfg = config or micro_config()
    params = init_params(cfg, seed)
    labels = np.arange(batch) % cfg.n_classes
    shape = (batch, cfg.frames, cfg.layout_obj.node_count, 3)
    for redraw in range(max_redraws):
        x = np.random.Generator(np.random.Philox(seed + 1000 + redraw)).normal(size=shape)
        with ag.kink_monitor() as kink:
            f = _loss_fn(cfg, x, labels)
            f({k: ag.Tensor(v) for k, v in params.items()})
        if kink[0] > 10 * step:
            break
    else:
        raise RuntimeError("could not draw an input away from the LeakyReLU kink")
    err, per = ag.finite_diff_check(f, params, step=step, max_coords=max_coords, seed=seed)
    coords = sum(min(v.size, max_coords or v.size) for v in params.values())
    return GradcheckResult(float(err), per, seed + 1000 + redraw, float(kink[0]), coords)


def _loss_fn(cfg: ModelConfig, x: np.ndarray, labels: np.ndarray):
    def f(p):
        return total_loss(p, forward(p, x, cfg), labels, cfg).total
    return f
