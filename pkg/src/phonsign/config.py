"""YAML run configuration.

A config file has two optional sections, ``model`` and ``train``. Keys are
the snake_case names of the published hyperparameter table
(``model_dimension``, ``learning_rate``, ...); the dataclass field names are
accepted as well. Anything not listed keeps its default.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .model import ModelConfig
from .train import TrainConfig

MODEL_KEYS = {
    "model_dimension": "d_model",
    "component_dimension": "d_comp",
    "gat_heads": "gat_heads",
    "gat_layers": "gat_layers",
    "ssm_layers": "ssm_layers",
    "ssm_state_dimension": "d_state",
    "ssm_expansion_factor": "expansion",
    "dropout": "dropout",
    "temperature": "tau",
    "prototype_counts": "proto_counts",
    "label_smoothing": "label_smoothing",
    "lambda_ortho": "lambda_ortho",
    "lambda_div": "lambda_div",
}
TRAIN_KEYS = {
    "learning_rate": "lr",
    "weight_decay": "weight_decay",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "warmup_epochs": "warmup_epochs",
    "lr_schedule": "schedule",
}
SCHEDULE_NAMES = {"cosine decay": "cosine", "cosine": "cosine", "constant": "constant"}


class ConfigError(ValueError):
    pass


def _translate(section: dict, aliases: dict, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    out = {}
    for key, value in section.items():
        name = aliases.get(key, key)
        if name in out:
            raise ConfigError(f"{where}: {key!r} given twice")
        out[name] = value
    return out


def parse_config(doc: dict | None) -> tuple[ModelConfig, TrainConfig]:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with 'model' and/or 'train' sections")
    unknown = set(doc) - {"model", "train", "optimizer"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    if doc.get("optimizer", "AdamW") != "AdamW":
        raise ConfigError("only the AdamW optimizer is available")
    sections = {k: {} if doc.get(k) is None else doc[k] for k in ("model", "train")}
    m = _translate(sections["model"], MODEL_KEYS, "model")
    t = _translate(sections["train"], TRAIN_KEYS, "train")
    if "schedule" in t:
        t["schedule"] = SCHEDULE_NAMES.get(str(t["schedule"]).lower(), t["schedule"])
    try:
        return ModelConfig.from_dict(m), TrainConfig.from_dict(t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_document(path) -> dict:
    """Raw YAML mapping of a config file, before defaults are applied."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc or {}


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    doc = read_config_document(path)
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_document(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    """Inverse of :func:`parse_config`, using table names where they exist."""
    inv_m = {v: k for k, v in MODEL_KEYS.items()}
    inv_t = {v: k for k, v in TRAIN_KEYS.items()}
    md = {inv_m.get(k, k): v for k, v in model.to_dict().items()}
    doc = {"optimizer": "AdamW", "model": md}
    if train is not None:
        doc["train"] = {inv_t.get(k, k): v for k, v in train.to_dict().items()}
    return doc


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    return yaml.safe_dump(config_document(model, train), sort_keys=False)
