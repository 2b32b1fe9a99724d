"""AdamW, warmup-cosine schedule and the epoch loop.

Metrics log: one JSON object per line and per epoch with keys ``epoch``,
``step``, ``lr``, ``loss``, ``L_ce``, ``L_ortho``, ``L_div`` (means over the
epoch's batches), ``train_acc`` and ``val_acc``. No wall-clock fields are
written, so two runs with the same seed produce byte-identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .data import DatasetFile, augment_batch, make_rng, read_dataset, stratified_split
from .hpc import renormalize_rows
from .model import ModelConfig, bank_names, forward, init_params, predict, save_checkpoint, total_loss

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 10
    schedule: str = "cosine"
    seeds: list = field(default_factory=lambda: [0])
    val_frac: float = 0.1
    augment: bool = True
    threads: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.val_frac < 1:
            raise ValueError("val_frac must be in [0, 1)")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices and higher-rank weights only."""
    return np.ndim(value) >= 2


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               betas=BETAS, eps: float = ADAM_EPS, decay_mask: dict | None = None) -> dict:
    """One AdamW update; returns new parameter arrays and advances ``state`` in place."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        use_wd = decay_mask[name] if decay_mask is not None else True
        new = theta * (1.0 - lr * wd) if (wd and use_wd) else np.array(theta, dtype=np.float64, copy=True)
        out[name] = new - step
    return out


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, config)
    if step < warm:
        return config.lr * step / warm
    if config.schedule == "constant":
        return config.lr
    span = total_steps - warm
    progress = (step - warm) / span if span > 0 else 1.0
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return int(round(total_steps * config.warmup_epochs / config.epochs))


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: dict
    metrics: list
    checkpoint: Path | None
    val_idx: np.ndarray


def _load(ds) -> DatasetFile:
    return ds if isinstance(ds, DatasetFile) else read_dataset(ds)


def accuracy(params: dict, x: np.ndarray, y: np.ndarray, config: ModelConfig) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(params, x, config).argmax(-1) == y))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, out_dir=None,
          seed: int | None = None, log=None) -> TrainResult:
    """Train from scratch; writes ``metrics.jsonl`` and ``model.ckpt`` under ``out_dir``."""
    seed = train_cfg.seeds[0] if seed is None else int(seed)
    ds = _load(dataset)
    if ds.n_classes != model_cfg.n_classes:
        raise ValueError(f"dataset has {ds.n_classes} classes, model expects {model_cfg.n_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=train_cfg.threads):
        return _train(model_cfg, train_cfg, ds, out, seed, log)


def _train(mc: ModelConfig, tc: TrainConfig, ds: DatasetFile, out, seed: int, log) -> TrainResult:
    rng_split = make_rng(seed)
    rng_shuffle = make_rng(seed + 1)
    rng_aug = make_rng(seed + 2)
    rng_drop = make_rng(seed + 3)
    x_all = ds.coords.astype(np.float64)
    y_all = ds.labels.astype(int)
    tr_idx, val_idx = stratified_split(y_all, tc.val_frac, rng_split) if tc.val_frac > 0 else \
        (np.arange(len(y_all)), np.zeros(0, dtype=int))
    x_tr, y_tr = x_all[tr_idx], y_all[tr_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    if len(y_tr) == 0:
        raise ValueError("no training samples")

    params = init_params(mc, seed)
    decay_mask = {k: decays(k, v) for k, v in params.items()}
    renorm = [n for n in bank_names() if n in params]
    state = AdamState()
    steps_per_epoch = math.ceil(len(y_tr) / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    metrics = []
    fh = open(out / "metrics.jsonl", "w") if out is not None else None
    step = 0
    try:
        for epoch in range(1, tc.epochs + 1):
            order = rng_shuffle.permutation(len(y_tr))
            sums = np.zeros(4)
            correct = 0
            for b in range(steps_per_epoch):
                idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
                xb = x_tr[idx]
                if tc.augment:
                    xb = augment_batch(xb, rng_aug)
                leaves = {k: ag.parameter(v) for k, v in params.items()}
                fo = forward(leaves, xb, mc, train=True, rng=rng_drop)
                terms = total_loss(leaves, fo, y_tr[idx], mc)
                loss = terms.total.item()
                if not np.isfinite(loss):
                    _dump_batch(out, epoch, b, tr_idx[idx], xb)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b} (samples {tr_idx[idx].tolist()})")
                gmap = ag.backward(terms.total)
                grads = {k: gmap.get(id(t)) for k, t in leaves.items()}
                lr = lr_at(step + 1, total, tc)
                params = adamw_step(params, grads, state, lr, tc.weight_decay, decay_mask=decay_mask)
                for n in renorm:
                    params[n] = renormalize_rows(params[n])
                step += 1
                sums += len(idx) * np.array([loss, terms.ce, terms.ortho, terms.div])
                correct += int(np.sum(fo.logits.data.argmax(-1) == y_tr[idx]))
            means = (sums / len(y_tr)).tolist()
            row = {"epoch": epoch, "step": step, "lr": float(lr_at(step, total, tc)),
                   "loss": means[0], "L_ce": means[1], "L_ortho": means[2], "L_div": means[3],
                   "train_acc": correct / len(y_tr)}
            if epoch % tc.eval_every == 0 or epoch == tc.epochs:
                row["val_acc"] = accuracy(params, x_val, y_val, mc)
            metrics.append(row)
            line = json.dumps(row, sort_keys=True)
            if fh is not None:
                fh.write(line + "\n")
                fh.flush()
            if log is not None:
                log(line)
    finally:
        if fh is not None:
            fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, params, mc, extra={"train_config": tc.to_dict(), "seed": seed,
                                                 "val_idx": val_idx.tolist()})
    return TrainResult(params, metrics, ckpt, val_idx)


def _dump_batch(out, epoch: int, batch: int, sample_idx, xb) -> None:
    if out is None:
        return
    np.savez(out / "nan_batch.npz", epoch=epoch, batch=batch, samples=np.asarray(sample_idx), x=xb)
