import csv
import io
import json
import subprocess
import sys

import pytest

from ccfkit.cli import build_parser, main
from ccfkit.featurestore import load_bank

TINY_GEN = ["--base", "6", "--val", "5", "--novel", "5", "--dim", "6", "--per-class", "20", "--rank", "0"]
TINY_TRAIN = ["--hidden", "16", "--lr", "1e-3", "--batch-size", "64", "--max-epochs", "2",
              "--val-episodes", "5", "--query", "5"]


@pytest.fixture(scope="module")
def tiny_bank(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.fbk"
    assert main(["gen-synthetic", *TINY_GEN, "--seed", "1", "-o", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_bank):
    ckpt = tiny_bank.with_name("tiny.ccf")
    assert main(["train", "--bank", str(tiny_bank), *TINY_TRAIN, "--seed", "0", "-o", str(ckpt)]) == 0
    return ckpt


def test_gen_synthetic_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.fbk", tmp_path / "b.fbk"
    assert main(["gen-synthetic", *TINY_GEN, "--seed", "4", "-o", str(a)]) == 0
    assert main(["gen-synthetic", *TINY_GEN, "--seed", "4", "-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_bank(a).n_classes == 16


def test_gen_synthetic_bad_arguments(tmp_path):
    out = str(tmp_path / "x.fbk")
    assert main(["gen-synthetic", *TINY_GEN[:-4], "--per-class", "0", "--seed", "1", "-o", out]) == 1
    assert main(["gen-synthetic", *TINY_GEN, "-o", out]) == 1  # no seed
    assert main(["gen-synthetic", "--bogus"]) == 1


def test_convert_round_trip(tmp_path, tiny_bank):
    csv_path, back = tmp_path / "t.csv", tmp_path / "back.fbk"
    assert main(["convert", str(tiny_bank), str(csv_path)]) == 0
    assert (tmp_path / "t.splits.json").exists()
    assert main(["convert", str(csv_path), str(back)]) == 0
    assert back.read_bytes() == tiny_bank.read_bytes()


def test_convert_bad_input(tmp_path):
    bad = tmp_path / "bad.fbk"
    bad.write_bytes(b"nope")
    assert main(["convert", str(bad), str(tmp_path / "o.csv")]) == 2


def test_missing_bank_is_usage_error(tmp_path):
    assert main(["train", "--seed", "0", "-o", str(tmp_path / "m.ccf")]) == 1


def test_nonexistent_bank_is_data_error(tmp_path):
    assert main(["train", "--bank", str(tmp_path / "missing.fbk"), "--seed", "0",
                 "-o", str(tmp_path / "m.ccf")]) == 2


def test_train_writes_checkpoint_and_log(tiny_ckpt):
    log = json.loads(tiny_ckpt.with_name(tiny_ckpt.name + ".log.json").read_text())
    assert len(log["epochs"]) >= 1 and "best_epoch" in log


def test_train_is_deterministic(tmp_path, tiny_bank, tiny_ckpt):
    again = tmp_path / "again.ccf"
    assert main(["train", "--bank", str(tiny_bank), *TINY_TRAIN, "--seed", "0", "--threads", "3",
                 "-o", str(again)]) == 0
    assert again.read_bytes() == tiny_ckpt.read_bytes()


def test_eval_json_identical_across_runs_and_threads(tmp_path, tiny_bank, tiny_ckpt):
    outs = []
    for i, threads in enumerate(["1", "1", "8"]):
        out = tmp_path / f"e{i}.json"
        assert main(["eval", "--bank", str(tiny_bank), "--checkpoint", str(tiny_ckpt), "--episodes", "40",
                     "--query", "5", "--seed", "7", "--threads", threads, "-o", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    report = json.loads(outs[0])
    assert report["n_episodes"] == 40 and len(report["per_episode_accuracies"]) == 40


def test_eval_baseline(tmp_path, tiny_bank):
    out = tmp_path / "b.json"
    assert main(["eval", "--bank", str(tiny_bank), "--baseline", "--episodes", "10", "--query", "5",
                 "--seed", "0", "-o", str(out)]) == 0
    assert 0.0 <= json.loads(out.read_text())["mean_accuracy"] <= 1.0


def test_eval_too_few_classes(tmp_path, tiny_bank):
    assert main(["eval", "--bank", str(tiny_bank), "--baseline", "--way", "6", "--episodes", "2",
                 "--seed", "0", "-o", str(tmp_path / "x.json")]) == 2


def test_sweep_rows(tmp_path, tiny_bank):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--bank", str(tiny_bank), "--temps", "0.02,0.05,0.1,0.5,1,2", "--seeds", "3",
                 *TINY_TRAIN[:-6], "--max-epochs", "1", "--seed", "0", "-o", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 18
    assert {r["seed"] for r in rows} == {"0", "1", "2"}


def test_sweep_empty_temperatures(tmp_path, tiny_bank):
    assert main(["sweep", "--bank", str(tiny_bank), "--temps", "", "--seed", "0",
                 "-o", str(tmp_path / "s.csv")]) == 1


def test_analyze(tmp_path, tiny_bank, tiny_ckpt):
    out, per_class, latent = tmp_path / "a.json", tmp_path / "a.csv", tmp_path / "z.csv"
    assert main(["analyze", "--bank", str(tiny_bank), "--checkpoint", str(tiny_ckpt), "-o", str(out),
                 "--csv", str(per_class), "--export-latent", str(latent)]) == 0
    text = out.read_text()
    assert "mean_d" in text and "mean_d_hat" in text
    assert per_class.read_text().startswith("split,class_id,n,mean_d,mean_d_hat")
    assert latent.read_text().startswith("class_id,z0")


def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return action.choices


@pytest.mark.parametrize("name", ["gen-synthetic", "convert", "train", "eval", "sweep", "analyze"])
def test_help_lists_every_flag(name, capsys):
    sub = _subparsers()[name]
    with pytest.raises(SystemExit) as exc:
        main([name, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text, flag
        if action.option_strings and action.dest != "help":
            assert "default" in action.help or "required" in action.help, action.option_strings


def test_console_entry_point(tmp_path):
    out = tmp_path / "s.fbk"
    proc = subprocess.run([sys.executable, "-m", "ccfkit.cli", "gen-synthetic", *TINY_GEN, "--seed", "2",
                           "-o", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()


def test_eval_follows_checkpoint_transform(tmp_path, tiny_bank):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"boxcox.enabled": False}))
    ckpt = tmp_path / "raw.ccf"
    assert main(["train", "--bank", str(tiny_bank), "--config", str(cfg), *TINY_TRAIN, "--seed", "0",
                 "-o", str(ckpt)]) == 0
    out = tmp_path / "e.json"
    assert main(["eval", "--bank", str(tiny_bank), "--checkpoint", str(ckpt), "--episodes", "5",
                 "--query", "5", "--seed", "0", "-o", str(out)]) == 0
    assert json.loads(out.read_text())["config"]["eval.boxcox"] is None
