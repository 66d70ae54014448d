import json

import pytest

from vilaco.cli import main

TINY = ["--set", "encoder.dim=16", "--set", "encoder.patch_size=32",
        "--set", "head.decoder_channels=4", "--set", "train.batch=3",
        "--set", "train.epochs=2", "--set", "train.warmup=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    corpus = ws / "corpus"
    assert main(["gen-data", "--out", str(corpus), "--count", "6",
                 "--seed", "5"]) == 0
    run = ws / "run"
    assert main(["train", "--data", str(corpus), "--out", str(run)] + TINY) == 0
    return ws


def test_gen_data_output(workspace):
    corpus = workspace / "corpus"
    assert (corpus / "manifest.tsv").exists()
    assert len(list(corpus.glob("img_*.png"))) == 6


def test_train_artifacts(workspace, capsys):
    run = workspace / "run"
    assert (run / "last.pt").exists()
    assert (run / "config.json").exists()
    log = (run / "train.log").read_text().strip().split("\n")
    assert len(log) == 2
    assert log[0].startswith("epoch=0000")


def test_train_header_echoes_config(workspace, tmp_path, capsys):
    run = tmp_path / "run2"
    code = main(["train", "--data", str(workspace / "corpus"),
                 "--out", str(run), "--lr", "0.002"] + TINY)
    assert code == 0
    out = capsys.readouterr().out
    assert "lr=0.002" in out and "batch=3" in out and "epochs=2" in out


def test_eval_and_report(workspace, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["eval", "--data", str(workspace / "corpus"),
                 "--checkpoint", str(workspace / "run" / "last.pt"),
                 "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert {"pixel_f1", "image_f1", "combined_f1"} <= set(report)
    capsys.readouterr()
    assert main(["report", str(out / "report.json")]) == 0
    text = capsys.readouterr().out
    assert "combined F1" in text


def test_predict_writes_mask(workspace, tmp_path, capsys):
    corpus = workspace / "corpus"
    image = next(iter(sorted(corpus.glob("img_*.png"))))
    code = main(["predict", "--checkpoint", str(workspace / "run" / "last.pt"),
                 "--image", str(image), "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / f"{image.stem}_mask.png").exists()
    out = capsys.readouterr().out
    assert "coarse=" in out and "fine=" in out


def test_exit_code_config_error(workspace, capsys):
    code = main(["train", "--data", str(workspace / "corpus"),
                 "--out", "/tmp/x", "--set", "train.lr=-5"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_io_error(tmp_path, capsys):
    code = main(["eval", "--data", str(tmp_path / "nothing"),
                 "--checkpoint", str(tmp_path / "nothing.pt")])
    assert code == 3
    code = main(["predict", "--checkpoint", str(tmp_path / "nothing.pt"),
                 "--image", str(tmp_path / "ghost.png")])
    assert code == 3
    assert "ghost.png" in capsys.readouterr().err


def test_exit_code_numerical_error(workspace, tmp_path, capsys, monkeypatch):
    import torch
    import vilaco.trainer as trainer_mod

    def explode(self, images, labels, lam):
        nan = torch.tensor(float("nan"), requires_grad=True)
        return nan, nan, nan, nan, 0

    monkeypatch.setattr(trainer_mod.Trainer, "_batch_losses", explode)
    run = tmp_path / "run"
    code = main(["train", "--data", str(workspace / "corpus"),
                 "--out", str(run)] + TINY)
    assert code == 4
    snapshot = run / "abort_snapshot.json"
    assert snapshot.exists()
    payload = json.loads(snapshot.read_text())
    assert payload["diagnostics"]["epoch"] == 0


def test_config_file_and_set_precedence(workspace, tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"train": {"lr": 0.01}}))
    run = tmp_path / "run"
    code = main(["train", "--data", str(workspace / "corpus"),
                 "--out", str(run), "--config", str(cfg_file),
                 "--set", "train.lr=0.003"] + TINY)
    assert code == 0
    assert "lr=0.003" in capsys.readouterr().out
    saved = json.loads((run / "config.json").read_text())
    assert saved["train"]["lr"] == 0.003


def test_resume_extends_training(workspace, tmp_path, capsys):
    run = tmp_path / "resume"
    args = ["train", "--data", str(workspace / "corpus"), "--out", str(run)]
    assert main(args + TINY) == 0
    capsys.readouterr()
    assert main(args + ["--resume", str(run / "last.pt"),
                        "--epochs", "3"]) == 0
    out = capsys.readouterr().out
    assert "epochs=3" in out
    log = (run / "train.log").read_text().strip().split("\n")
    assert log[-1].startswith("epoch=0002")  # exactly one more epoch ran
    assert len(log) == 3
