"""Post-hoc analysis: component geometry, probes, interventions, error structure, scaling."""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import autograd as ag
from .model import ModelConfig, classify_head, forward, pooled_components
from .pdm import COMPONENTS


class FoldError(ValueError):
    pass


# ---------------------------------------------------------------- geometry

def abs_cosine_matrix(pooled: np.ndarray) -> np.ndarray:
    """Mean over samples of |cos| between component embeddings; pooled is (n, 4, Dc)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 3 or len(pooled) == 0:
        raise ValueError("need a non-empty (n, C, Dc) array of pooled components")
    u = pooled / np.maximum(np.linalg.norm(pooled, axis=-1, keepdims=True), 1e-12)
    cos = np.abs(np.einsum("nid,njd->nij", u, u)).mean(axis=0)
    np.fill_diagonal(cos, 1.0)
    return cos


def component_cosine_matrix(params: dict, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        raise ValueError("empty dataset")
    return abs_cosine_matrix(pooled_components(params, x, config))


def off_diagonal_mean(m: np.ndarray) -> float:
    m = np.asarray(m)
    return float(m[~np.eye(len(m), dtype=bool)].mean())


# ---------------------------------------------------------------- linear probes

def stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample; each class is dealt round-robin after a shuffle."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise FoldError(f"classes {classes[counts < 2].tolist()} have fewer than 2 samples")
    fold = np.empty(len(labels), dtype=int)
    start = 0
    for k in classes:
        idx = rng.permutation(np.flatnonzero(labels == k))
        fold[idx] = (start + np.arange(len(idx))) % folds
        start += len(idx)
    return fold


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500,
                           lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on mean cross-entropy, zero init, no penalty."""
    n, d = x.shape
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        z = x @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * x.T @ g
        b -= lr * g.sum(axis=0)
    return W, b


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, folds: int = 5, steps: int = 500,
                 lr: float = 0.1, seed: int = 0) -> float:
    """k-fold cross-validated accuracy of a multinomial linear classifier.

    Features are standardized with the training fold's mean and spread.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y_raw = np.asarray(labels)
    classes, y = np.unique(y_raw, return_inverse=True)
    fold = stratified_folds(y, folds, np.random.Generator(np.random.Philox(seed)))
    correct = 0
    for f in range(folds):
        tr, te = fold != f, fold == f
        if not te.any():
            continue
        mu = x[tr].mean(axis=0)
        sd = x[tr].std(axis=0)
        sd[sd < 1e-12] = 1.0
        W, b = fit_softmax_regression((x[tr] - mu) / sd, y[tr], len(classes), steps, lr)
        pred = (((x[te] - mu) / sd) @ W + b).argmax(axis=1)
        correct += int(np.sum(pred == y[te]))
    return correct / len(y)


def probe_matrix(pooled: np.ndarray, phon: np.ndarray, **kw) -> np.ndarray:
    """Entry (i, j): probe accuracy of branch i's embedding on component label j."""
    C = pooled.shape[1]
    return np.array([[linear_probe(pooled[:, i], phon[:, j], **kw) for j in range(C)] for i in range(C)])


# ---------------------------------------------------------------- distances

def phonological_distance(a, b) -> int:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != (4,) or b.shape != (4,):
        raise ValueError("component tuples have exactly four entries")
    return int(np.sum(a != b))


def _pair_distances(tuples: np.ndarray) -> np.ndarray:
    t = np.asarray(tuples)
    i, j = np.triu_indices(len(t), k=1)
    return (t[i] != t[j]).sum(axis=1)


def minimal_pair_density(tuples) -> float:
    """Fraction of unordered class pairs at phonological distance <= 1."""
    t = np.asarray(tuples)
    if len(t) < 2:
        raise ValueError("need at least two classes")
    return float(np.mean(_pair_distances(t) <= 1))


def distance_distribution(tuples) -> np.ndarray:
    """Normalized histogram over distances 0..4 for all unordered class pairs."""
    d = _pair_distances(np.asarray(tuples))
    return np.bincount(d, minlength=5)[:5] / max(len(d), 1)


def error_stratification(predictions, true_labels, class_tuples) -> np.ndarray:
    """Normalized histogram over distances 0..4 between true and predicted tuples of errors.

    Returns an empty array when there are no errors.
    """
    pred = np.asarray(predictions)
    true = np.asarray(true_labels)
    t = np.asarray(class_tuples)
    wrong = pred != true
    if not wrong.any():
        return np.zeros(0)
    d = (t[pred[wrong]] != t[true[wrong]]).sum(axis=1)
    return np.bincount(d, minlength=5)[:5] / wrong.sum()


# ---------------------------------------------------------------- interventions

@dataclass
class InterventionOutcome:
    pair_id: int
    components: tuple
    pre: int
    post: int
    partner: int
    flipped_to_partner: bool
    control: bool


def _head_predict(params, config, pooled: np.ndarray, g_bar: np.ndarray) -> np.ndarray:
    logits, _, _ = classify_head(params, [ag.Tensor(pooled[:, i]) for i in range(pooled.shape[1])],
                                 ag.Tensor(g_bar), config)
    return logits.data.argmax(axis=-1)


def encode(params: dict, config: ModelConfig, x: np.ndarray, batch_size: int = 256):
    """Eval-mode (pooled components (n, 4, Dc), g_bar (n, D), predictions (n,))."""
    pooled, gb, pred = [], [], []
    for i in range(0, len(x), batch_size):
        fo = forward(params, x[i:i + batch_size], config)
        pooled.append(np.stack([v.data for v in fo.pooled], axis=1))
        gb.append(fo.g_bar.data)
        pred.append(fo.logits.data.argmax(-1))
    return np.concatenate(pooled), np.concatenate(gb), np.concatenate(pred)


def intervene(params: dict, config: ModelConfig, sample_a, sample_b, component,
              partner: int = -1, pair_id: int = 0, control: bool = False) -> InterventionOutcome:
    """Re-run the head on a with the pooled embedding(s) of ``component`` taken from b.

    The similarity vectors are recomputed from the swapped embeddings; the
    temporal summary and every other component stay those of a.
    """
    comps = (component,) if np.isscalar(component) else tuple(component)
    if not comps or any(not 0 <= int(c) < len(COMPONENTS) for c in comps):
        raise ValueError(f"invalid component index {component!r}")
    pa, ga, pre = encode(params, config, np.asarray(sample_a)[None])
    pb, _, _ = encode(params, config, np.asarray(sample_b)[None])
    swapped = pa.copy()
    for c in comps:
        swapped[:, int(c)] = pb[:, int(c)]
    post = int(_head_predict(params, config, swapped, ga)[0])
    return InterventionOutcome(pair_id, tuple(int(c) for c in comps), int(pre[0]), post, int(partner),
                               post == partner, control)


def find_pairs(tuples: np.ndarray, labels: np.ndarray, n_diff: int, rng: np.random.Generator,
               max_pairs: int, eligible: np.ndarray | None = None):
    """Sample index pairs (a, b) whose class tuples differ in exactly ``n_diff`` components."""
    labels = np.asarray(labels)
    ok = np.ones(len(labels), dtype=bool) if eligible is None else np.asarray(eligible)
    by_class = {}
    for i in np.flatnonzero(ok):
        by_class.setdefault(int(labels[i]), []).append(i)
    classes = sorted(by_class)
    cand = []
    for ka, kb in itertools.permutations(classes, 2):
        diff = np.flatnonzero(tuples[ka] != tuples[kb])
        if len(diff) == n_diff:
            cand.append((ka, kb, tuple(diff)))
    if not cand:
        return []
    order = rng.permutation(len(cand))[:max_pairs]
    pairs = []
    for j in order:
        ka, kb, diff = cand[j]
        a = by_class[ka][int(rng.integers(len(by_class[ka])))]
        b = by_class[kb][int(rng.integers(len(by_class[kb])))]
        pairs.append((a, b, diff))
    return pairs


@dataclass
class InterventionReport:
    n_diff: int
    n: int
    treatment_rate: float
    control_rate: float
    ratio: float
    p_value: float
    outcomes: list


def intervention_experiment(params: dict, config: ModelConfig, x: np.ndarray, labels: np.ndarray,
                            class_tuples, n_diff: int = 1, max_pairs: int = 400, seed: int = 0,
                            require_correct: bool = True) -> InterventionReport:
    """Swap the differing component(s) of minimal pairs vs. an equal number of shared ones.

    Each pair yields one treatment and one control outcome. The p-value is a
    one-sided exact binomial (sign) test on the discordant pairs.
    """
    tuples = np.asarray(class_tuples)
    labels = np.asarray(labels)
    rng = np.random.Generator(np.random.Philox(seed))
    pooled, g_bar, pred = encode(params, config, x)
    eligible = pred == labels if require_correct else None
    pairs = find_pairs(tuples, labels, n_diff, rng, max_pairs, eligible)
    n_comp = tuples.shape[1]
    outcomes = []
    if pairs:
        a_idx = np.array([p[0] for p in pairs])
        b_idx = np.array([p[1] for p in pairs])
        controls = []
        for _, _, diff in pairs:
            shared = [c for c in range(n_comp) if c not in diff]
            controls.append(tuple(sorted(rng.choice(shared, size=n_diff, replace=False).tolist())))
        treat = pooled[a_idx].copy()
        ctrl = pooled[a_idx].copy()
        for r, (_, _, diff) in enumerate(pairs):
            for c in diff:
                treat[r, c] = pooled[b_idx[r], c]
            for c in controls[r]:
                ctrl[r, c] = pooled[b_idx[r], c]
        post_t = _head_predict(params, config, treat, g_bar[a_idx])
        post_c = _head_predict(params, config, ctrl, g_bar[a_idx])
        for r, (a, b, diff) in enumerate(pairs):
            partner = int(labels[b])
            outcomes.append(InterventionOutcome(r, diff, int(pred[a]), int(post_t[r]), partner,
                                                bool(post_t[r] == partner), False))
            outcomes.append(InterventionOutcome(r, controls[r], int(pred[a]), int(post_c[r]), partner,
                                                bool(post_c[r] == partner), True))
    t = np.array([o.flipped_to_partner for o in outcomes if not o.control], dtype=bool)
    c = np.array([o.flipped_to_partner for o in outcomes if o.control], dtype=bool)
    n = len(t)
    tr = float(t.mean()) if n else float("nan")
    cr = float(c.mean()) if n else float("nan")
    ratio = tr / cr if n and cr > 0 else (float("inf") if n and tr > 0 else float("nan"))
    return InterventionReport(n_diff, n, tr, cr, ratio, sign_test(t, c), outcomes)


def sign_test(treatment: np.ndarray, control: np.ndarray) -> float:
    """One-sided exact binomial test that treatment flips exceed paired control flips."""
    treatment = np.asarray(treatment, dtype=bool)
    control = np.asarray(control, dtype=bool)
    up = int(np.sum(treatment & ~control))
    down = int(np.sum(~treatment & control))
    if up + down == 0:
        return 1.0
    return float(stats.binomtest(up, up + down, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------- scaling

def attention_oracle(x: np.ndarray) -> np.ndarray:
    """Single-head softmax self-attention with explicit T x T scores, x (B, T, D)."""
    s = x @ np.swapaxes(x, -1, -2) / np.sqrt(x.shape[-1])
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s @ x


def _median_time(fn, reps: int) -> float:
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_scaling(T_values=(64, 128, 256, 512), d_model: int = 128, d_state: int = 16,
                  expansion: int = 2, batch: int = 16, reps: int = 9, backend: str | None = None,
                  seed: int = 0) -> list[dict]:
    """Median-of-``reps`` wall time of the selective scan, T x T attention and the graph encoder.

    The graph encoder runs on ``batch`` sequences of T random 21-landmark frames.
    Repetitions are interleaved: each round times every (kernel, T) once, right
    after an untimed call of the same size, so a slow drift in machine speed
    affects all lengths alike instead of skewing one ratio.
    """
    from .agan import agan_forward, init_agan
    from .graph import LandmarkLayout, build_graph
    from .scan import get_kernels
    from .ssm import init_direction, ssm_scan

    rng = np.random.Generator(np.random.Philox(seed))
    M = expansion * d_model
    p = init_direction(rng, M, d_state, 1, "b")
    graph = build_graph(LandmarkLayout.from_name("DominantHand21"))
    pg = init_agan(rng, 3, d_model, 4, 1)
    get_kernels(backend)
    jobs = []
    for T in T_values:
        u = rng.normal(size=(batch, T, M))
        x = rng.normal(size=(batch, T, d_model))
        lm = rng.normal(size=(batch, T, graph.node_count, 3))
        jobs.append({"ssm": lambda u=u: ssm_scan(u, p, "b", backend=backend),
                     "attention": lambda x=x: attention_oracle(x),
                     "agan": lambda lm=lm: agan_forward(lm, graph, pg, 1)})
    times = [{k: [] for k in job} for job in jobs]
    for _ in range(reps):
        for job, acc in zip(jobs, times):
            for k, fn in job.items():
                fn()  # warm the caches for this size
                t0 = time.perf_counter()
                fn()
                acc[k].append(time.perf_counter() - t0)
    rows = [{"T": int(T), **{f"{k}_s": float(np.median(v)) for k, v in acc.items()}}
            for T, acc in zip(T_values, times)]
    for prev, row in zip(rows, rows[1:]):
        for k in ("ssm", "attention", "agan"):
            row[f"{k}_ratio"] = row[f"{k}_s"] / prev[f"{k}_s"]
    return rows


def model_throughput(params: dict, config: ModelConfig, n: int = 64, reps: int = 3, seed: int = 0) -> float:
    """Eval-mode samples per second on random input."""
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.normal(size=(n, config.frames, config.layout_obj.node_count, 3))
    t = _median_time(lambda: forward(params, x, config), reps)
    return n / t


# ---------------------------------------------------------------- reports

def format_table(rows: list[dict], columns: list[str] | None = None, floatfmt: str = ".4g") -> str:
    """Aligned plain-text table."""
    if not rows:
        return ""
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))

    def cell(v):
        if isinstance(v, float):
            return format(v, floatfmt)
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def matrix_rows(m: np.ndarray, names=COMPONENTS) -> list[dict]:
    return [{"": names[i], **{names[j]: float(m[i, j]) for j in range(len(names))}} for i in range(len(m))]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_report(name: str, data: dict, text: str, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / f"{name}.json", out / f"{name}.txt"
    jp.write_text(json.dumps(data, default=_jsonable, indent=2, sort_keys=True) + "\n")
    tp.write_text(text)
    return jp, tp
