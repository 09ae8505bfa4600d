import json
import os

import numpy as np
import pytest

from supw.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, main
from supw.imaging import load_labels16, load_mask
from supw.segnet import load_checkpoint
from supw.slic import is_four_connected


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "src"
    assert main(["synth", "--domain", "source", "--n", "20", "--out", str(out), "--size", "32"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    code = main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2",
                 "--input-size", "32", "--slic-k", "16"])
    assert code == EXIT_OK
    return out


def _config_line(text):
    line = next(l for l in text.splitlines() if l.startswith("config: "))
    return json.loads(line[len("config: "):])


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [],
        ["bogus"],
        ["slic", "--image", "x.png", "--k", "0"],
        ["slic", "--image", "x.png", "--m", "-1"],
        ["synth", "--domain", "moon", "--out", "x"],
        ["train", "--data", "d", "--out", "o", "--unknown-flag", "1"],
        ["eval", "--data", "d"],
    ])
    def test_usage_errors_exit_1(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_help_lists_every_flag(self, capsys):
        assert main(["train", "--help"]) == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--data", "--val-data", "--out", "--epochs", "--seed", "--lr0",
                     "--batch-size", "--input-size", "--slic-weight", "--slic-k", "--slic-m",
                     "--isw-weight", "--warmup-epochs", "--no-slic-loss", "--no-isw"):
            assert flag in text

    def test_every_subcommand_has_help(self):
        sub = build_parser()._subparsers._group_actions[0].choices
        assert set(sub) == {"slic", "synth", "train", "eval", "grid", "gradcheck"}

    def test_bad_thread_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SUPW_THREADS", "zero")
        assert main(["synth", "--domain", "source", "--n", "10", "--out", str(tmp_path / "d"),
                     "--size", "16"]) == EXIT_USAGE

    def test_thread_env_accepted(self, monkeypatch, tmp_path):
        monkeypatch.setenv("SUPW_THREADS", "1")
        assert main(["synth", "--domain", "source", "--n", "10", "--out", str(tmp_path / "d"),
                     "--size", "16"]) == EXIT_OK

    def test_size_must_divide_by_8(self, tmp_path):
        assert main(["synth", "--domain", "source", "--out", str(tmp_path), "--size", "30"]) == EXIT_USAGE


class TestRuntimeErrors:
    def test_missing_data_dir_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "nowhere")
        assert main(["train", "--data", missing, "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
        assert missing in capsys.readouterr().err

    def test_missing_image(self, tmp_path):
        assert main(["slic", "--image", str(tmp_path / "none.png")]) == EXIT_RUNTIME

    def test_corrupt_checkpoint(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(20))
        assert main(["eval", "--ckpt", str(bad), "--data", str(dataset)]) == EXIT_RUNTIME

    def test_missing_config_file(self, dataset, tmp_path):
        assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(dataset),
                     "--out", str(tmp_path / "o")]) == EXIT_RUNTIME

    def test_unknown_config_key_is_usage(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochz": 3}))
        assert main(["train", "--config", str(cfg), "--data", str(dataset),
                     "--out", str(tmp_path / "o")]) == EXIT_USAGE


class TestSlic:
    def test_outputs(self, dataset, tmp_path, capsys):
        image = dataset / "images" / sorted(os.listdir(dataset / "images"))[0]
        labels, ov = tmp_path / "l.png", tmp_path / "o.png"
        assert main(["slic", "--image", str(image), "--k", "20", "--m", "10",
                     "--labels-out", str(labels), "--overlay-out", str(ov)]) == 0
        out = capsys.readouterr().out
        assert _config_line(out)["k"] == 20
        lab = load_labels16(labels)
        n = int(out.strip().splitlines()[-1].split()[-1])
        assert lab.max() + 1 == n
        assert is_four_connected(lab)
        assert ov.exists()


class TestTrainEval:
    def test_artifacts(self, trained):
        assert sorted(os.listdir(trained)) == ["best.ckpt", "runlog.jsonl", "timing.jsonl"]
        with open(trained / "runlog.jsonl") as fh:
            records = [json.loads(l) for l in fh]
        assert [r["epoch"] for r in records if "epoch" in r] == [0, 1]

    def test_checkpoint_meta(self, trained):
        net, meta = load_checkpoint(trained / "best.ckpt", with_meta=True)
        assert meta["input_size"] == 32
        assert meta["config"]["slic_k"] == 16

    def test_flag_beats_config(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"epochs": 7, "input_size": 32, "slic_k": 16, "lr0": 0.5}))
        assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o"),
                     "--epochs", "1", "--no-isw"]) == 0
        resolved = _config_line(capsys.readouterr().out)
        assert resolved["epochs"] == 1
        assert resolved["lr0"] == 0.5
        assert resolved["use_isw"] is False

    def test_deterministic(self, dataset, trained, tmp_path):
        out = tmp_path / "again"
        assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2",
                     "--input-size", "32", "--slic-k", "16"]) == 0
        for name in ("best.ckpt", "runlog.jsonl"):
            assert (out / name).read_bytes() == (trained / name).read_bytes()

    def test_eval_report(self, dataset, trained, tmp_path, capsys):
        report, preds = tmp_path / "rep.json", tmp_path / "preds"
        assert main(["eval", "--ckpt", str(trained / "best.ckpt"), "--data", str(dataset),
                     "--report", str(report), "--pred-out", str(preds)]) == 0
        assert "IoU" in capsys.readouterr().out
        rep = json.loads(report.read_text())
        assert set(rep["mean"]) == {"iou", "precision", "recall", "accuracy"}
        assert len(rep["per_image"]) == 2
        for name in rep["per_image"]:
            assert load_mask(preds / name).shape == (32, 32)

    def test_eval_all_split(self, dataset, trained, tmp_path):
        report = tmp_path / "rep.json"
        assert main(["eval", "--ckpt", str(trained / "best.ckpt"), "--data", str(dataset),
                     "--report", str(report), "--split", "all"]) == 0
        assert len(json.loads(report.read_text())["per_image"]) == 20


class TestGradcheck:
    def test_small_suite_passes(self, capsys):
        assert main(["gradcheck", "--no-network"]) == 0
        out = capsys.readouterr().out
        assert "4/4 gradient checks passed" in out
        assert not np.any(["FAIL" in l for l in out.splitlines()])
