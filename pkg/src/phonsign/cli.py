"""Command-line entry point: ``phonsign <subcommand> [options]``.

Exit status is 0 on success, 1 when a check or input validation fails and
2 for bad command-line arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import analysis as an
from .config import ConfigError, config_document, parse_config, read_config_document
from .data import (
    DatasetFormatError, InvalidSpecError, SyntheticSpec, generate_synthetic, parse_tuple_name,
    read_dataset, read_label_map, write_dataset, write_label_map,
)
from .model import (
    CHECKPOINT_MAGIC, CheckpointError, ModelConfig, init_params, load_checkpoint, pooled_components,
    predict, read_checkpoint_header,
)
from .train import TrainingDivergedError, train

DATA_FILES = ("train", "test_seen", "test_unseen")
DATA_SUFFIX = ".phds"
LABEL_MAP = "labels.tsv"


class Failure(Exception):
    """A validation failure reported to the user with exit status 1."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, help="YAML config with 'model' and 'train' sections")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads (default 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="phonsign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic compositional dataset")
    g.add_argument("--inventory", type=_int_list, default=[6, 5, 4, 3])
    g.add_argument("--train-frac", type=float, default=0.6)
    g.add_argument("--samples-per-class", type=int, default=20)
    g.add_argument("--test-per-class", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--frames", type=int, default=30)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", type=Path, required=True, help="training dataset file or gen-data directory")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry, e.g. train.epochs=5")

    e = sub.add_parser("eval", parents=[common], help="top-1/top-5 accuracy of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, nargs="+", required=True)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gate on a micro model")

    pr = sub.add_parser("probe", parents=[common], help="linear probes of component embeddings")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--folds", type=int, default=5)

    iv = sub.add_parser("intervene", parents=[common], help="component-swap interventions")
    iv.add_argument("--checkpoint", type=Path, required=True)
    iv.add_argument("--data", type=Path, required=True)
    iv.add_argument("--pairs", type=int, default=400)
    iv.add_argument("--components", type=int, choices=(1, 2), default=1,
                    help="number of differing components per pair")

    b = sub.add_parser("bench", parents=[common], help="scan vs attention scaling")
    b.add_argument("--T", type=_int_list, default=[64, 128, 256, 512])
    b.add_argument("--backend", choices=("compiled", "python"), default=None)
    b.add_argument("--reps", type=int, default=9)

    a = sub.add_parser("analyze", parents=[common], help="cosine matrix, error structure, density")
    a.add_argument("--checkpoint", type=Path, required=True)
    a.add_argument("--data", type=Path, required=True)

    i = sub.add_parser("inspect", parents=[common], help="print a checkpoint or dataset header")
    i.add_argument("path", type=Path)
    return parser


def _echo(args, extra: dict | None = None) -> dict:
    """Print and save everything needed to rerun this command."""
    resolved = {"command": args.command}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "set"):
            continue
        resolved[k] = [str(x) for x in v] if isinstance(v, list) and v and isinstance(v[0], Path) else \
            (str(v) if isinstance(v, Path) else v)
    if extra:
        resolved.update(extra)
    text = yaml.safe_dump({"resolved": resolved}, sort_keys=False)
    print(text, end="")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.command}.resolved.yaml").write_text(text)
    return resolved


def _dataset(path: Path):
    if path.is_dir():
        path = path / f"train{DATA_SUFFIX}"
    return read_dataset(path)


def _checkpoint(path: Path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise Failure(f"{path}: cannot read checkpoint ({exc.strerror})")


def _tuples_from_label_map(data_path: Path) -> np.ndarray:
    root = data_path if data_path.is_dir() else data_path.parent
    lm = root / LABEL_MAP
    if not lm.exists():
        raise Failure(f"class component tuples unknown: no {LABEL_MAP} in {root}")
    return np.array([parse_tuple_name(n) for n in read_label_map(lm)])


def _class_tuples(config: ModelConfig, data_path: Path):
    if config.class_tuples is not None:
        return np.asarray(config.class_tuples)
    return _tuples_from_label_map(data_path)


def _apply_overrides(doc: dict, items: list[str]) -> dict:
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in ("model", "train"):
            raise Failure(f"bad override {item!r}; expected model.KEY=VALUE or train.KEY=VALUE")
        doc.setdefault(section, {})[name] = yaml.safe_load(value)
    return doc


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(tuple(args.inventory), args.samples_per_class, args.noise, args.train_frac,
                         args.seed, args.frames, args.test_per_class)
    _echo(args)
    split = generate_synthetic(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    for name in DATA_FILES:
        ds = getattr(split, name)
        write_dataset(ds, args.out / f"{name}{DATA_SUFFIX}")
        print(f"{name}: {len(ds)} records, {len(np.unique(ds.labels))} classes")
    write_label_map(split.names, args.out / LABEL_MAP)
    print(f"label map: {len(split.names)} classes -> {args.out / LABEL_MAP}")
    return 0


def cmd_train(args) -> int:
    doc = read_config_document(args.config) if args.config is not None else {}
    doc = _apply_overrides(doc, args.set)
    ds = _dataset(args.data)
    doc.setdefault("model", {})
    doc["model"].setdefault("n_classes", ds.n_classes)
    doc["model"].setdefault("frames", ds.frames)
    m = doc["model"]
    if m.get("sign_prototypes") == "composed" and not m.get("flat") and m.get("class_tuples") is None:
        m["class_tuples"] = _tuples_from_label_map(args.data).tolist()
    try:
        mc, tc = parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{args.config}: {exc}" if args.config else str(exc)) from exc
    tc.threads = args.threads
    _echo(args, {"config": config_document(mc, tc)})
    res = train(mc, tc, ds, args.out, seed=args.seed, log=print)
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    params, mc, _ = _checkpoint(args.checkpoint)
    _echo(args)
    rows = []
    for path in args.data:
        ds = _dataset(path)
        if ds.n_classes != mc.n_classes:
            raise Failure(f"{path}: {ds.n_classes} classes, checkpoint has {mc.n_classes}")
        logits = predict(params, ds.coords.astype(np.float64), mc)
        y = ds.labels
        top5 = np.argsort(-logits, axis=1)[:, :5] if len(y) else np.zeros((0, 5), int)
        rows.append({"data": str(path), "n": int(len(y)),
                     "top1": float(np.mean(logits.argmax(1) == y)) if len(y) else float("nan"),
                     "top5": float(np.mean((top5 == y[:, None]).any(1))) if len(y) else float("nan")})
    text = an.format_table(rows)
    print(text, end="")
    an.write_report("eval", {"results": rows}, text, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import GATE, micro_gradcheck

    _echo(args, {"gate": GATE})
    res = micro_gradcheck(seed=args.seed)
    rows = [{"tensor": k, "max_rel_err": v} for k, v in sorted(res.per_tensor.items())]
    text = an.format_table(rows) + f"max relative error {res.max_rel_err:.3e} over {res.coords} coordinates\n"
    print(text, end="")
    an.write_report("gradcheck", {"max_rel_err": res.max_rel_err, "per_tensor": res.per_tensor,
                                  "passed": res.passed}, text, args.out)
    print("PASS" if res.passed else "FAIL")
    return 0 if res.passed else 1


def cmd_probe(args) -> int:
    params, mc, _ = _checkpoint(args.checkpoint)
    _echo(args)
    ds = _dataset(args.data)
    pooled = pooled_components(params, ds.coords.astype(np.float64), mc)
    m = an.probe_matrix(pooled, ds.phon, folds=args.folds, seed=args.seed)
    text = "rows: component branch, columns: label probed\n" + an.format_table(an.matrix_rows(m))
    print(text, end="")
    an.write_report("probe", {"matrix": m}, text, args.out)
    return 0


def cmd_intervene(args) -> int:
    params, mc, _ = _checkpoint(args.checkpoint)
    _echo(args)
    ds = _dataset(args.data)
    tuples = _class_tuples(mc, args.data)
    rep = an.intervention_experiment(params, mc, ds.coords.astype(np.float64), ds.labels, tuples,
                                     n_diff=args.components, max_pairs=args.pairs, seed=args.seed)
    row = {k: getattr(rep, k) for k in ("n_diff", "n", "treatment_rate", "control_rate", "ratio", "p_value")}
    text = an.format_table([row])
    print(text, end="")
    an.write_report("intervene", {"summary": row, "outcomes": rep.outcomes}, text, args.out)
    return 0


def cmd_bench(args) -> int:
    from .scan import available_backends

    _echo(args)
    backends = [args.backend] if args.backend else available_backends()
    rows = []
    for be in backends:
        for r in an.bench_scaling(args.T, reps=args.reps, backend=be, seed=args.seed):
            rows.append({"backend": be, **r})
    mc = ModelConfig()
    sps = an.model_throughput(init_params(mc, args.seed), mc, seed=args.seed)
    text = an.format_table(rows) + f"full model (default config, eval): {sps:.1f} samples/sec\n"
    print(text, end="")
    an.write_report("bench", {"scaling": rows, "samples_per_sec": sps}, text, args.out)
    return 0


def cmd_analyze(args) -> int:
    params, mc, _ = _checkpoint(args.checkpoint)
    _echo(args)
    ds = _dataset(args.data)
    tuples = _class_tuples(mc, args.data)
    x = ds.coords.astype(np.float64)
    pooled, _, pred = an.encode(params, mc, x)
    cos = an.abs_cosine_matrix(pooled)
    errs = an.error_stratification(pred, ds.labels, tuples)
    base = an.distance_distribution(tuples)
    dens = an.minimal_pair_density(tuples)
    text = ("mean |cos| between pooled components\n" + an.format_table(an.matrix_rows(cos))
            + f"off-diagonal mean {an.off_diagonal_mean(cos):.4f}\n\nerrors by phonological distance\n"
            + an.format_table([{"distance": d, "errors": float(errs[d]) if len(errs) else 0.0,
                                "class_pairs": float(base[d])} for d in range(5)])
            + f"\nminimal-pair density {dens:.4f}\naccuracy {np.mean(pred == ds.labels):.4f}\n")
    print(text, end="")
    an.write_report("analyze", {"cosine": cos, "error_distance": errs, "pair_distance": base,
                                "minimal_pair_density": dens}, text, args.out)
    return 0


def cmd_inspect(args) -> int:
    _echo(args)
    with open(args.path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic == CHECKPOINT_MAGIC:
        head = read_checkpoint_header(args.path)
    else:
        head = read_dataset(args.path).header()
    print(json.dumps(head, indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "probe": cmd_probe, "intervene": cmd_intervene, "bench": cmd_bench, "analyze": cmd_analyze,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("phonsign: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (Failure, ConfigError, DatasetFormatError, CheckpointError, InvalidSpecError,
            TrainingDivergedError, ValueError) as exc:
        print(f"phonsign {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"phonsign {args.command}: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
