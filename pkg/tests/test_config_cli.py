import json

import pytest

from sparsefreeze.cli import main
from sparsefreeze.config import load_config
from sparsefreeze.errors import ConfigError
from sparsefreeze.train import read_metrics, run_train, summarize

TINY = """
[dataset]
kind = synthetic
n_train = 200
n_test = 100
classes = 4
dim = 16
spread = 0.5

[model]
arch = mlp:16-12-12-8-4

[sparsity]
s = 0.8

[dst]
schedule = scaled
interval = 2

[train]
epochs = 12
batch_size = 20
seed = 0

[freeze]
target = 0.1

[sieve]
p = 0.2

[optimizer]
lr0 = 0.1

[output]
checkpoint_every = 2
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_load_config_values_and_defaults(tiny):
    cfg = load_config(tiny)
    assert cfg.train.epochs == 12 and cfg.train.batch_size == 20
    assert cfg.optimizer.momentum == 0.9 and cfg.sieve.update_ratio == 0.3
    assert cfg.schedule().search_end <= 12


def test_overrides_apply(tiny):
    cfg = load_config(tiny, {"train": {"seed": "5"}, "sieve": {"p": 0.1}})
    assert cfg.train.seed == 5 and cfg.sieve.p == 0.1


@pytest.mark.parametrize("patch", [
    {"train": {"batch": "3"}},
    {"nonsense": {"a": "1"}},
    {"train": {"epochs": "many"}},
    {"sparsity": {"s": "1.0"}},
    {"freeze": {"scheme": "sometimes"}},
    {"freeze": {"target": "1.2"}},
    {"dst": {"schedule": "explicit", "phases": "0:4:0.05,6:8:0.02"}},
    {"train": {"epochs": "4"}, "dst": {"schedule": "cifar"}},
])
def test_invalid_configs_raise(tiny, patch):
    with pytest.raises(ConfigError):
        load_config(tiny, patch)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini")


def test_cli_exit_codes(tiny, tmp_path, capsys):
    assert main(["budget", "--config", str(tiny)]) == 0
    assert main(["budget", "--config", str(tiny), "--set", "train.batch=3"]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert main(["budget", "--config", str(tiny), "--set", "nodot=3"]) == 2
    assert main(["budget", "--config", str(tiny), "--set", "freeze.target=0.9"]) == 4
    assert "error [freeze-scheduler]" in capsys.readouterr().err
    rc = main(["train", "--config", str(tiny), "--quiet", "--out", str(tmp_path / "r"),
               "--set", "dataset.kind=idx", "--set", "dataset.train_images=/nonexistent/a",
               "--set", "dataset.train_labels=/nonexistent/b"])
    assert rc == 3
    assert main(["report", "--metrics", str(tmp_path / "missing.jsonl")]) == 3
    assert main(["analyze", "structural", "--ref", str(tmp_path / "x.spfd"), "--trace", str(tmp_path)]) == 3


def test_budget_target_zero_is_baseline(tiny, tmp_path, capsys):
    out = tmp_path / "b.json"
    assert main(["budget", "--config", str(tiny), "--set", "freeze.target=0", "--json", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["predicted_total_flops"] == rep["baseline_flops"]


def test_budget_csv_rows(tiny, tmp_path):
    out = tmp_path / "b.csv"
    assert main(["budget", "--config", str(tiny), "--csv", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("block,freeze_epoch")
    assert len(lines) >= 2


def test_train_report_analyze_roundtrip(tiny, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--quiet", "--out", str(run)]) == 0
    for name in ("metrics.jsonl", "summary.json", "timing.json", "final.spfd", "epoch0002.spfd"):
        assert (run / name).exists()
    capsys.readouterr()
    assert main(["report", "--metrics", str(run / "metrics.jsonl"), "--csv", str(tmp_path / "m.csv")]) == 0
    assert "saved by freezing" in capsys.readouterr().out
    assert (tmp_path / "m.csv").read_text().startswith("epoch,")
    for measure in ("structural", "cka", "gradnorm"):
        out = tmp_path / f"{measure}.csv"
        assert main(["analyze", measure, "--ref", str(run / "final.spfd"), "--trace", str(run),
                     "--config", str(tiny), "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[0].startswith("epoch,layer,value") and len(rows) > 4
    assert main(["analyze", "structural", "--ref", str(run / "final.spfd"), "--trace", str(run),
                 "--layer", "nope"]) == 2
    assert main(["analyze", "cka", "--ref", str(run / "final.spfd"), "--trace", str(run)]) == 2


def test_report_malformed_line(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    path.write_text('{"epoch": 0}\nnot json\n')
    assert main(["report", "--metrics", str(path)]) == 3
    assert ":2:" in capsys.readouterr().err


def test_report_empty_log(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    path.write_text("")
    assert main(["report", "--metrics", str(path)]) == 0
    assert "epochs 0" in capsys.readouterr().out
    assert summarize(read_metrics(path))["cum_flops"] == 0.0


def test_metrics_bitwise_deterministic(tiny, tmp_path):
    cfg = load_config(tiny)
    run_train(cfg, tmp_path / "a")
    run_train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "final.spfd").read_bytes() == (tmp_path / "b" / "final.spfd").read_bytes()


def test_measured_flops_match_plan(tiny, tmp_path):
    res = run_train(load_config(tiny), tmp_path / "r")
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["plan"]["predicted_total_flops"] == pytest.approx(res.summary["cum_flops"], rel=1e-12)
