"""Acceptance criteria 1 to 12, one PASS/FAIL line each in the terminal summary.

The training criteria (7 to 10) share session-scoped runs of the desk-scale
config on the default synthetic inventory.
"""

import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from conftest import ACCEPTANCE
from test_ssm import direction_params, unrolled

from phonsign import analysis as an
from phonsign import autograd as ag
from phonsign.config import parse_config, read_config_document
from phonsign.data import SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from phonsign.gradcheck import micro_gradcheck
from phonsign.hpc import (
    block_embedding, capacity, diversity_loss, renormalize_rows, tangent_project, unit_rows,
)
from phonsign.model import load_checkpoint, pooled_components, predict, save_checkpoint
from phonsign.pdm import orthogonality_grad, orthogonality_loss
from phonsign.ssm import discretize, ssm_scan
from phonsign.train import TrainConfig, train

MICRO = Path(__file__).resolve().parents[1] / "configs" / "micro.yaml"
SEEDS = (0, 1, 2)
SPEC = SyntheticSpec(inventory=(6, 5, 4, 3), samples_per_class=20, noise=0.02, train_frac=0.6,
                     seed=0, frames=16)


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- shared training runs

@pytest.fixture(scope="session")
def split():
    return generate_synthetic(SPEC)


def micro_configs(split, **model):
    doc = read_config_document(MICRO)
    doc["model"].update(n_classes=len(split.names), frames=SPEC.frames, class_tuples=split.tuples.tolist(),
                        **model)
    return parse_config(doc)


@pytest.fixture(scope="session")
def runs(split, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    res = {}
    for name, model in (("full", {}), ("flat", {"flat": True}), ("no_ortho", {"lambda_ortho": 0.0})):
        mc, tc = micro_configs(split, **model)
        for seed in SEEDS if name != "no_ortho" else SEEDS[:1]:
            r = train(mc, tc, split.train, out / f"{name}{seed}", seed=seed)
            res[name, seed] = (r.params, mc)
    res["seconds"] = time.perf_counter() - t0
    return res


def top1(params, mc, ds):
    return float(np.mean(predict(params, ds.coords.astype(np.float64), mc).argmax(1) == ds.labels))


# ---------------------------------------------------------------- 1 to 6: exact properties

def test_criterion_01_gradient_gate():
    t0 = time.perf_counter()
    res = micro_gradcheck()
    dt = time.perf_counter() - t0
    record(1, res.max_rel_err < 1e-4 and dt < 120 and len(res.per_tensor) > 0,
           f"max rel err {res.max_rel_err:.2e} over {len(res.per_tensor)} tensors, {dt:.1f} s")


def test_criterion_02_scan_matches_unrolled_recurrence():
    r = rng(2)
    worst = 0.0
    for _ in range(100):
        T, M, S = int(r.integers(1, 9)), int(r.integers(1, 4)), int(r.integers(1, 5))
        p = direction_params(r, M, S)
        f = r.normal(size=(T, M))
        worst = max(worst, np.abs(ssm_scan(f, p, "p").data - unrolled(f, p)).max())
    record(2, worst <= 1e-12, f"max abs err {worst:.2e} over 100 instances")


def test_criterion_03_zoh_against_extended_precision():
    mpmath.mp.dps = 50
    a = -np.geomspace(0.01, 10.0, 40)
    d = np.geomspace(1e-6, 1.0, 25)
    A, D = np.meshgrid(a, d)
    b = rng(3).normal(size=A.shape)
    abar, bbar = discretize(A, b, D)
    worst = 0.0
    for i in np.ndindex(A.shape):
        x = mpmath.mpf(D[i]) * mpmath.mpf(A[i])
        ea = mpmath.exp(x)
        eb = mpmath.expm1(x) / mpmath.mpf(A[i]) * mpmath.mpf(b[i])
        worst = max(worst, float(abs((abar[i] - ea) / ea)), float(abs((bbar[i] - eb) / eb)))
    tiny = 1e-300
    a0, b0 = discretize(-3.0, 2.0, tiny)
    limits = a0 == 1.0 and abs(b0 - tiny * 2.0) <= 1e-15 * tiny * 2.0
    record(3, A.size == 1000 and worst <= 1e-12 and limits,
           f"max rel err {worst:.2e} on {A.size} points, delta->0 limits {'hold' if limits else 'broken'}")


def test_criterion_04_orthogonality_optimum():
    c = rng(4).normal(size=(4, 32))
    for _ in range(500):
        c = c - 0.1 * orthogonality_grad(c)
    final = orthogonality_loss(c).item()
    worst = 0.0
    for seed in range(20):
        x = rng(100 + seed).normal(size=(4, 32)) * rng(200 + seed).uniform(0.1, 10, size=(4, 1))
        t = ag.parameter(x)
        ag.backward(orthogonality_loss(t))
        worst = max(worst, np.abs(t.grad - orthogonality_grad(x)).max())
    record(4, final < 1e-6 and worst <= 1e-10,
           f"loss after 500 steps {final:.2e}, autodiff vs closed form {worst:.2e}")


def test_criterion_05_simplex_optimum():
    # projected (tangent) descent on the unit sphere, M=5 prototypes in dimension 8
    P = unit_rows(rng(5), 5, 8)
    for _ in range(3000):
        t = ag.parameter(P)
        ag.backward(diversity_loss(t))
        P = renormalize_rows(P - 0.5 * tangent_project(P, t.grad))
    off = (P @ P.T)[~np.eye(5, dtype=bool)]
    loss = diversity_loss(P).item()
    err = np.abs(off + 0.25).max()
    record(5, err <= 1e-3 and abs(loss - 1 / 16) <= 1e-4,
           f"max |<p_i,p_j> + 1/4| = {err:.3f}, loss {loss:.2e} vs 1/16 "
           "(with M <= D orthonormal rows give loss 0, see decisions ledger)")


def test_criterion_06_capacity_and_block_distance():
    cap = capacity((30, 15, 10, 8))
    r = rng(6)
    worst = 0.0
    for k in (1, 2, 3, 4):
        for _ in range(25):
            comps = [r.normal(size=16) for _ in range(4)]
            changed = set(r.choice(4, size=k, replace=False).tolist())
            moved = [c + unit_rows(r, 1, 16)[0] if i in changed else c for i, c in enumerate(comps)]
            d = np.linalg.norm(block_embedding(moved) - block_embedding(comps))
            worst = max(worst, abs(d - np.sqrt(k)))
    record(6, cap == 36000 and worst <= 1e-12, f"capacity {cap}, max |dist - sqrt(k)| {worst:.1e}")


# ---------------------------------------------------------------- 7 to 10: trained models

def test_criterion_07_compositional_generalization(split, runs):
    full = [top1(*runs["full", s], split.test_unseen) for s in SEEDS]
    flat = [top1(*runs["flat", s], split.test_unseen) for s in SEEDS]
    f, b = np.mean(full), np.mean(flat)
    minutes = runs["seconds"] / 60
    record(7, f >= b + 0.15 and f >= 0.60 and minutes < 30,
           f"unseen top-1 full {f:.3f} {np.round(full, 3).tolist()}, flat {b:.3f}; "
           f"7 training runs in {minutes:.1f} min")


def test_criterion_08_factorization_effect(split, runs):
    x = split.test_seen.coords.astype(np.float64)

    def offdiag(run):
        params, mc = runs[run, 0]
        return an.off_diagonal_mean(an.abs_cosine_matrix(pooled_components(params, x, mc)))

    with_ortho, without = offdiag("full"), offdiag("no_ortho")
    record(8, with_ortho < 0.2 and without > with_ortho,
           f"off-diagonal |cos| {with_ortho:.3f} with the orthogonality term, {without:.3f} without")


def test_criterion_09_causal_intervention(split, runs):
    params, mc = runs["full", 0]
    ds = split.test_seen
    rep = an.intervention_experiment(params, mc, ds.coords.astype(np.float64), ds.labels, split.tuples,
                                     n_diff=1, max_pairs=400, seed=0)
    ok = rep.n >= 200 and rep.treatment_rate >= 3 * rep.control_rate and rep.p_value < 0.01
    record(9, ok, f"{rep.n} interventions, flip rate {rep.treatment_rate:.3f} vs control "
                  f"{rep.control_rate:.3f}, p = {rep.p_value:.1e}")


def test_criterion_10_probe_diagonal_dominance(split, runs):
    params, mc = runs["full", 0]
    ds = split.test_seen
    m = an.probe_matrix(pooled_components(params, ds.coords.astype(np.float64), mc), ds.phon)
    margins = [m[i, i] - max(m[i, j] for j in range(4) if j != i) for i in range(4)]
    record(10, min(margins) >= 0.15,
           f"diagonal minus best off-diagonal per branch {np.round(margins, 3).tolist()}; "
           f"matrix {np.round(m, 2).tolist()}")


# ---------------------------------------------------------------- 11 and 12

def test_criterion_11_linear_time_scaling():
    rows = an.bench_scaling((64, 128, 256, 512))
    ssm = [r["ssm_ratio"] for r in rows[1:]]
    att = [r["attention_ratio"] for r in rows[1:]]
    record(11, max(ssm) <= 2.3 and min(att) >= 3.0,
           f"scan ratios {np.round(ssm, 2).tolist()}, attention ratios {np.round(att, 2).tolist()}")


def test_criterion_12_determinism_and_round_trips(split, tmp_path):
    mc, _ = micro_configs(split)
    tc = TrainConfig(lr=3e-3, epochs=2, warmup_epochs=1, batch_size=32)
    small = split.train.subset(np.arange(0, len(split.train), 12))
    a = train(mc, tc, small, tmp_path / "a", seed=4)
    train(mc, tc, small, tmp_path / "b", seed=4)
    same_metrics = (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    params, cfg, extra = load_checkpoint(a.checkpoint)
    save_checkpoint(tmp_path / "again.ckpt", params, cfg, extra)
    same_ckpt = a.checkpoint.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    write_dataset(split.test_unseen, tmp_path / "d1.phds")
    write_dataset(read_dataset(tmp_path / "d1.phds"), tmp_path / "d2.phds")
    same_data = (tmp_path / "d1.phds").read_bytes() == (tmp_path / "d2.phds").read_bytes()
    record(12, same_metrics and same_ckpt and same_data,
           f"metrics bitwise {same_metrics}, checkpoint {same_ckpt}, dataset {same_data}")
