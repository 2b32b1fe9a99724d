import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from phonsign.cli import main
from phonsign.data import read_dataset, read_label_map
from phonsign.model import ModelConfig, init_params, save_checkpoint


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def argv_from_echo(text):
    resolved = yaml.safe_load(text)["resolved"]
    argv = [resolved.pop("command")]
    for key, value in resolved.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, list):
            value = ",".join(map(str, value))
        argv += [flag, value]
    return argv


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--inventory", "2,2,2,2", "--train-frac", "1.0", "--samples-per-class", "20",
                 "--frames", "6", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_gen_data_writes_three_files_and_label_map(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--inventory", "6,5,4,3", "--train-frac", "0.6", "--seed", "7",
                        "--samples-per-class", "1", "--test-per-class", "1", "--frames", "4", "--out", tmp_path],
                       capsys)
    assert code == 0
    sizes = {name: len(read_dataset(tmp_path / f"{name}.phds")) for name in ("train", "test_seen", "test_unseen")}
    assert sizes == {"train": 216, "test_seen": 216, "test_unseen": 144}
    assert len(read_label_map(tmp_path / "labels.tsv")) == 360
    assert "resolved:" in out


def test_resolved_echo_reproduces_the_run(tmp_path, capsys):
    a = tmp_path / "a"
    code, out, _ = run(["gen-data", "--inventory", "3,2,2,2", "--train-frac", "0.75", "--seed", "3",
                        "--frames", "5", "--noise", "0.1", "--out", a], capsys)
    assert code == 0
    echo = (a / "gen-data.resolved.yaml").read_text()
    assert out.startswith(echo)
    argv = argv_from_echo(echo)
    argv[argv.index("--out") + 1] = str(tmp_path / "b")
    assert run(argv, capsys)[0] == 0
    for name in ("train.phds", "test_seen.phds", "test_unseen.phds", "labels.tsv"):
        assert (a / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_untrained_checkpoints_near_chance(tmp_path, data_dir, capsys):
    # an untrained model collapses onto a few classes, so samples are not independent
    # trials; chance is measured over initializations instead
    K = read_dataset(data_dir / "train.phds").n_classes
    cfg = ModelConfig(d_model=8, d_comp=4, d_state=4, gat_heads=2, gat_layers=1, ssm_layers=1,
                      proto_counts=(2, 2, 2, 2), n_classes=K, frames=6)
    acc = []
    for seed in range(20):
        ckpt = tmp_path / f"untrained{seed}.ckpt"
        save_checkpoint(ckpt, init_params(cfg, seed), cfg)
        code, _, _ = run(["eval", "--checkpoint", ckpt, "--data", data_dir / "train.phds", "--out", tmp_path],
                         capsys)
        assert code == 0
        row = json.loads((tmp_path / "eval.json").read_text())["results"][0]
        assert row["n"] == 320 and row["top1"] <= row["top5"]
        acc.append(row["top1"])
    sem = np.std(acc, ddof=1) / np.sqrt(len(acc))
    assert abs(np.mean(acc) - 1 / K) <= 3 * sem


def test_train_then_inspect_and_analyze(tmp_path, data_dir, capsys):
    run_dir = tmp_path / "run"
    code, out, _ = run(["train", "--data", data_dir, "--out", run_dir,
                        "--set", "model.model_dimension=8", "--set", "model.component_dimension=4",
                        "--set", "model.gat_layers=1", "--set", "model.ssm_layers=1",
                        "--set", "model.prototype_counts=[2,2,2,2]", "--set", "model.sign_prototypes=composed",
                        "--set", "train.epochs=1", "--set", "train.warmup_epochs=0"], capsys)
    assert code == 0, out
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 1
    ckpt = run_dir / "model.ckpt"
    code, out, _ = run(["inspect", ckpt, "--out", tmp_path], capsys)
    head = json.loads(out[out.index("{"):])
    assert code == 0 and head["config"]["d_model"] == 8 and head["config"]["class_tuples"]
    code, out, _ = run(["inspect", data_dir / "train.phds", "--out", tmp_path], capsys)
    assert code == 0 and '"records": 320' in out
    code, out, _ = run(["analyze", "--checkpoint", ckpt, "--data", data_dir, "--out", tmp_path], capsys)
    assert code == 0 and "minimal-pair density" in out
    code, _, _ = run(["intervene", "--checkpoint", ckpt, "--data", data_dir, "--pairs", "10",
                      "--out", tmp_path], capsys)
    assert code == 0 and (tmp_path / "intervene.json").exists()
    code, _, _ = run(["probe", "--checkpoint", ckpt, "--data", data_dir, "--out", tmp_path], capsys)
    assert code == 0 and np.array(json.loads((tmp_path / "probe.json").read_text())["matrix"]).shape == (4, 4)


def test_gradcheck_passes(tmp_path, capsys):
    code, out, _ = run(["gradcheck", "--out", tmp_path], capsys)
    assert code == 0
    assert "PASS" in out and "max relative error" in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_err"] < 1e-4


def test_bench_runs_small(tmp_path, capsys):
    code, out, _ = run(["bench", "--T", "8,16", "--reps", "1", "--backend", "python", "--out", tmp_path], capsys)
    assert code == 0 and "samples/sec" in out


@pytest.mark.parametrize("argv", [[], ["train"], ["gen-data", "--bogus"], ["gen-data", "--inventory", "a,b"],
                                  ["bench", "--threads", "0"]])
def test_bad_arguments_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_validation_failures_exit_1_and_name_the_path(tmp_path, data_dir, capsys):
    missing = tmp_path / "nope.ckpt"
    code, _, err = run(["eval", "--checkpoint", missing, "--data", data_dir, "--out", tmp_path], capsys)
    assert code == 1 and str(missing) in err
    bad = tmp_path / "bad.phds"
    bad.write_bytes(b"xx")
    code, _, err = run(["inspect", bad, "--out", tmp_path], capsys)
    assert code == 1 and str(bad) in err
    code, _, err = run(["gen-data", "--inventory", "1,2,2,2", "--out", tmp_path], capsys)
    assert code == 1
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model: {wings: 3}")
    code, _, err = run(["train", "--data", data_dir, "--config", cfg, "--out", tmp_path], capsys)
    assert code == 1 and str(cfg) in err
    code, _, err = run(["train", "--data", data_dir, "--set", "epochs=3", "--out", tmp_path], capsys)
    assert code == 1 and "override" in err


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "phonsign.cli", "inspect", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout
