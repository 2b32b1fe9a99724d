from pathlib import Path

import pytest
import yaml

from phonsign.config import ConfigError, config_document, dump_config, load_config, parse_config
from phonsign.model import ModelConfig
from phonsign.train import TrainConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_full_config_equals_defaults():
    m, t = load_config(CONFIGS / "full.yaml")
    assert m == ModelConfig()
    assert (m.d_model, m.d_comp, m.gat_heads, m.gat_layers, m.ssm_layers, m.d_state) == (128, 32, 4, 3, 4, 16)
    assert m.proto_counts == (30, 15, 10, 8)
    assert (m.tau, m.lambda_ortho, m.lambda_div, m.label_smoothing, m.dropout) == (0.1, 0.1, 0.01, 0.1, 0.1)
    assert (t.lr, t.weight_decay, t.batch_size, t.epochs, t.warmup_epochs, t.schedule) == \
        (3e-4, 1e-2, 128, 100, 10, "cosine")


def test_empty_document_gives_defaults():
    m, t = parse_config(None)
    assert m == ModelConfig() and t == TrainConfig()


def test_table_names_and_field_names_both_accepted():
    a, _ = parse_config({"model": {"model_dimension": 64}})
    b, _ = parse_config({"model": {"d_model": 64}})
    assert a == b
    with pytest.raises(ConfigError, match="twice"):
        parse_config({"model": {"model_dimension": 64, "d_model": 64}})


@pytest.mark.parametrize("doc", [
    {"modle": {}},
    {"model": {"wings": 2}},
    {"model": []},
    {"optimizer": "SGD"},
    {"train": {"epochs": 0}},
    {"train": {"lr_schedule": "step"}},
    {"model": {"temperature": -1}},
])
def test_invalid_documents_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_dump_round_trip():
    m = ModelConfig(d_model=32, proto_counts=(4, 4, 3, 2), n_classes=9)
    t = TrainConfig(lr=1e-3, epochs=4, warmup_epochs=1, seeds=[1, 2])
    back = parse_config(yaml.safe_load(dump_config(m, t)))
    assert back == (m, t)
    assert "model_dimension" in config_document(m)["model"]


def test_load_errors_name_the_file(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed")
    with pytest.raises(ConfigError, match="bad.yaml"):
        load_config(bad)
    bad.write_text("- a list")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(bad)
    bad.write_text("model: {gat_heads: 0}")
    with pytest.raises(ConfigError, match="bad.yaml"):
        load_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")
