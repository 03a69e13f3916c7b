import csv
import json

import pytest

from tailor.cli import main
from tailor.config import dump_config, toy_config
from tailor.dataio import read_matrices


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    cfg = toy_config(d=8, h_l=2, h_m=2, encoder_heads=2, ffn_mult=2, epochs=2, batch_size=32)
    path.write_text(dump_config(cfg))
    return path


@pytest.fixture
def synth(tmp_path):
    out = tmp_path / "data"
    assert main(["--seed", "3", "--out-dir", str(out), "gen-synth", "--n-train", "32", "--n-valid", "8",
                 "--n-test", "8"]) == 0
    return out / "manifest.json"


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["gen-synth", "--dims", "1,2"]) == 1


def test_unknown_config_key_exits_2(tmp_path, synth, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpha = 0.1\nlearning_rate = 3\n")
    assert main(["train", "--config", str(bad), "--manifest", str(synth)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_missing_manifest_exits_2(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--manifest", str(tmp_path / "none.json")]) == 2


def test_corrupt_split_exits_2(cfg_file, synth, tmp_path, capsys):
    train_bin = synth.parent / "train.bin"
    train_bin.write_bytes(train_bin.read_bytes()[:100])
    assert main(["--out-dir", str(tmp_path / "run"), "train", "--config", str(cfg_file),
                 "--manifest", str(synth)]) == 2
    assert "record" in capsys.readouterr().err


def test_end_to_end_pipeline(cfg_file, synth, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--out-dir", str(run), "train", "--config", str(cfg_file), "--manifest", str(synth)]) == 0
    assert (run / "best.ckpt").exists() and (run / "train_log.csv").exists()

    assert main(["--out-dir", str(run), "eval", "--config", str(cfg_file), "--manifest", str(synth),
                 "--checkpoint", str(run / "best.ckpt")]) == 0
    report = json.loads((run / "eval_test.json").read_text())
    assert set(report) == {"acc", "p", "r", "microf1"}
    assert all(0 <= v <= 1 for v in report.values())

    corr = tmp_path / "corr"
    assert main(["--out-dir", str(corr), "export-correlations", "--checkpoint", str(run / "best.ckpt"),
                 "--manifest", str(synth)]) == 0
    files = sorted(corr.glob("correlations_head*.csv"))
    assert len(files) == 2
    assert len(list(csv.reader(files[0].open()))) == 7

    emb = tmp_path / "emb"
    assert main(["--out-dir", str(emb), "export-embeddings", "--checkpoint", str(run / "best.ckpt"),
                 "--manifest", str(synth), "--count", "4"]) == 0
    mats, labels = read_matrices(emb / "embeddings.json")
    assert mats["M"].shape == (4, 8, 40)
    assert set(mats) == {"M", "C_v", "C_a", "C_t", "P_v", "P_a", "P_t"}
    assert labels.shape == (4, 6)


def test_eval_with_missing_checkpoint_exits_2(cfg_file, synth, tmp_path):
    assert main(["--out-dir", str(tmp_path), "eval", "--config", str(cfg_file), "--manifest", str(synth),
                 "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_ablate_writes_grid(cfg_file, synth, tmp_path):
    cfg_file.write_text(cfg_file.read_text().replace("epochs = 2", "epochs = 1"))
    assert main(["--out-dir", str(tmp_path), "ablate", "--config", str(cfg_file), "--manifest", str(synth),
                 "--seeds", "0"]) == 0
    rows = list(csv.reader((tmp_path / "ablation.csv").open()))
    assert len(rows) == 9


@pytest.mark.slow
def test_grad_check_passes(capsys):
    assert main(["grad-check"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS end_to_end" in out
