import json
import subprocess
import sys

import pytest

from dara.cli import main
from dara.config import RunConfig
from dara.data import load_dataset
from dara.model import ModelConfig, load_checkpoint
from dara.report import read_pgm
from dara.train import TaskConfig, TrainPlan

TINY_RUN = RunConfig(
    name="tiny",
    model=ModelConfig.tiny(),
    task=TaskConfig(image_size=16, n_pretrain=16, n_train=16, n_test=8),
    pretrain=TrainPlan.scaled(2, lr_model=1e-3, batch_size=8, phase="pretrain"),
    adapt=TrainPlan.scaled(2, lr_model=1e-3, batch_size=8),
)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.json"
    TINY_RUN.save(path)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_pretrain_then_adapt_eval_export(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("pretrain", "--config", cfg_path, "--out", out) == 0
    assert (out / "pretrain_metrics.csv").read_text().startswith("# dara-metrics/1\n")
    assert run("adapt", "--config", cfg_path, "--out", out, "--regime", "ra_only",
               "--pretrained", out / "pretrain.ckpt") == 0
    _, meta = load_checkpoint(out / "adapt_ra_only.ckpt")
    assert meta["stage"] == "ra_only" and meta["model"]["ffn_adapter"] == "ra"
    assert run("eval", "--config", cfg_path, "--out", out,
               "--checkpoint", out / "adapt_ra_only.ckpt") == 0
    record = json.loads((out / "eval_adapt_ra_only.json").read_text())
    assert 0.0 <= record["acc_at_05"] <= 1.0
    assert run("attn-export", "--config", cfg_path, "--out", out,
               "--checkpoint", out / "adapt_ra_only.ckpt", "--index", 0, 2) == 0
    assert read_pgm(out / "attn_2.pgm").shape == (2, 2)
    assert read_pgm(out / "attn_0.pgm").max() == 255


def test_count_params_prints_table(cfg_path, capsys):
    assert run("count-params", "--config", cfg_path, "--regime", "dara") == 0
    text = capsys.readouterr().out
    assert "ra-adapters" in text and "ratio:" in text


def test_grad_check_exit_code(cfg_path, capsys):
    assert run("grad-check", "--config", cfg_path, "--samples", 20) == 0
    assert "pass" in capsys.readouterr().out


def test_gen_data_round_trips(cfg_path, tmp_path):
    out = tmp_path / "d"
    assert run("gen-data", "--config", cfg_path, "--out", out, "--seed", 3) == 0
    samples = load_dataset(out / "train.tsv")
    assert len(samples) == 16 and all(s.difficulty == "relational" for s in samples)


def test_ablate_rows_per_cell_and_seed(tmp_path, capsys):
    run_cfg = TINY_RUN.replace(
        pretrain=TrainPlan.scaled(1, lr_model=1e-3, batch_size=8, phase="pretrain"),
        adapt=TrainPlan.scaled(1, lr_model=1e-3, batch_size=8))
    path = tmp_path / "a.json"
    run_cfg.save(path)
    assert run("ablate", "--config", path, "--out", tmp_path, "--seeds", 2) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "# dara-ablation/1"
    # tiny widths 8/12 give shares 2, 4, 8 around the reference's 4
    assert len(lines) == 2 + 7 * 2


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["adapt", "--regime", "half"],
    ["pretrain", "--nope"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"regime": "half"}')
    assert run("count-params", "--config", path) == 1


def test_missing_file_exits_2(tmp_path):
    assert run("count-params", "--config", tmp_path / "absent.json") == 2
    assert run("eval", "--checkpoint", tmp_path / "absent.ckpt", "--out", tmp_path) == 2


def test_help_per_subcommand():
    for cmd in ("pretrain", "adapt", "eval", "count-params", "grad-check", "ablate",
                "attn-export", "gen-data"):
        proc = subprocess.run([sys.executable, "-m", "dara.cli", cmd, "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and "--config" in proc.stdout


def test_repeated_runs_are_bitwise_identical(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("adapt", "--config", cfg_path, "--out", out, "--seed", 1) == 0
    for name in ("pretrain_metrics.csv", "adapt_dara_metrics.csv", "adapt_dara.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
