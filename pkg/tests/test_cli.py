import json

import numpy as np
import pytest
from PIL import Image

from omsn.archive import ModelArchive
from omsn.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, overlay_rgb
from omsn.data import load_dataset, write_png
from omsn.engine import ops
from omsn.postprocess import FAZ, VESSEL


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--count", "10", "--size", "48", "--seed", "2"]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "multi.omsn"
    code = main(["train", "--data", str(dataset), "--task", "multi", "--preset", "tiny",
                 "--out", str(out), "--epochs", "2", "--seed", "0"])
    assert code == EXIT_OK
    return out


class TestSynth:
    def test_count_and_size(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "10", "--seed", "1"]) == EXIT_OK
        images = sorted((tmp_path / "images").glob("*.png"))
        assert len(images) == 10 and len(list((tmp_path / "labels").glob("*.png"))) == 10
        for p in images:
            with Image.open(p) as im:
                assert im.size == (96, 96) and im.mode == "L"
        assert (tmp_path / "manifest.json").exists()

    def test_bytewise_deterministic(self, tmp_path):
        for d in ("a", "b"):
            main(["synth", "--out", str(tmp_path / d), "--count", "5", "--size", "40", "--seed", "8"])
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @pytest.mark.parametrize("argv", [["--count", "0"], ["--count", "3", "--size", "16"]])
    def test_usage(self, tmp_path, argv):
        assert main(["synth", "--out", str(tmp_path)] + argv) == EXIT_USAGE


class TestTrain:
    def test_multi_outputs(self, trained):
        arc = ModelArchive.load(trained)
        assert arc.config["model"]["output_channels"] == 3 and arc.config["task"] == "multi"
        rows = trained.with_suffix(".log.csv").read_text().splitlines()
        assert rows[0] == "epoch,lr,train_loss,val_dice" and len(rows) >= 2
        summary = json.loads(trained.with_suffix(".summary.json").read_text())
        assert summary["epochs_run"] == 2

    def test_honours_manifest(self, trained, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert ModelArchive.load(trained).config["provenance"]["split"] == manifest

    def test_single_faz(self, dataset, tmp_path):
        out = tmp_path / "faz.omsn"
        assert main(["train", "--data", str(dataset), "--task", "single", "--class", "faz",
                     "--out", str(out), "--epochs", "1"]) == EXIT_OK
        arc = ModelArchive.load(out)
        assert arc.config["model"]["output_channels"] == 1 and arc.config["target_class"] == FAZ

    def test_single_needs_class(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--task", "single",
                     "--out", str(tmp_path / "x.omsn")]) == EXIT_USAGE

    def test_multi_rejects_class(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--task", "multi", "--class", "faz",
                     "--out", str(tmp_path / "x.omsn")]) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--task", "multi",
                     "--out", str(tmp_path / "x.omsn")]) == EXIT_DATA

    def test_bad_config_section(self, dataset, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"optimizer": {}}')
        assert main(["train", "--data", str(dataset), "--task", "multi", "--config", str(cfg),
                     "--out", str(tmp_path / "x.omsn")]) == EXIT_USAGE


class TestPredict:
    def test_outputs(self, trained, dataset, tmp_path):
        image = sorted((dataset / "images").glob("*.png"))[0]
        mask, prob, over = tmp_path / "m.png", tmp_path / "p.png", tmp_path / "o.png"
        assert main(["predict", "--model", str(trained), "--image", str(image), "--out-mask", str(mask),
                     "--out-prob", str(prob), "--overlay", str(over)]) == EXIT_OK
        labels = np.asarray(Image.open(mask))
        assert labels.shape == (48, 48) and set(np.unique(labels)) <= {0, 1, 2}
        for name in ("background", "vessel", "faz"):
            assert (tmp_path / f"p_{name}.png").exists()
        with Image.open(over) as im:
            assert im.size == (48, 48) and im.mode == "RGB"

    def test_size_mismatch(self, trained, tmp_path):
        image = tmp_path / "big.png"
        write_png(image, np.zeros((64, 60)))
        code = main(["predict", "--model", str(trained), "--image", str(image),
                     "--out-mask", str(tmp_path / "m.png")])
        assert code == EXIT_DATA

    def test_size_mismatch_message(self, trained, tmp_path, capsys):
        image = tmp_path / "big.png"
        write_png(image, np.zeros((64, 60)))
        main(["predict", "--model", str(trained), "--image", str(image), "--out-mask", str(tmp_path / "m.png")])
        err = capsys.readouterr().err
        assert "60x64" in err and "48x48" in err

    def test_corrupt_model(self, tmp_path):
        bad = tmp_path / "bad.omsn"
        bad.write_bytes(b"nope")
        assert main(["predict", "--model", str(bad), "--image", "x.png", "--out-mask", "m.png"]) == EXIT_DATA

    def test_overlay_colours(self):
        rgb = overlay_rgb(np.full((2, 2), 0.5), np.array([[0, VESSEL], [FAZ, 0]]))
        assert tuple(rgb[0, 1]) == (255, 0, 0) and tuple(rgb[1, 0]) == (0, 255, 0)
        assert tuple(rgb[0, 0]) == (128, 128, 128)


class TestEval:
    def test_report(self, trained, dataset, tmp_path, capsys):
        report = tmp_path / "r.json"
        assert main(["eval", "--model", str(trained), "--data", str(dataset), "--report", str(report)]) == EXIT_OK
        out = json.loads(report.read_text())
        assert {"per_class", "macro", "mean", "std"} <= set(out)
        assert out["split"] == "test" and len(out["images"]) == 2
        assert "±" in capsys.readouterr().out

    def test_deterministic(self, trained, dataset, tmp_path):
        for name in ("a.json", "b.json"):
            main(["eval", "--model", str(trained), "--data", str(dataset), "--split", "all",
                  "--report", str(tmp_path / name)])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_empty_data(self, trained, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "labels").mkdir()
        assert main(["eval", "--model", str(trained), "--data", str(tmp_path),
                     "--report", str(tmp_path / "r.json")]) == EXIT_DATA

    def test_labels_on_disk_are_valid(self, dataset):
        assert len(load_dataset(dataset)) == 10


class TestGradcheck:
    def test_engine_passes(self, capsys):
        assert main(["gradcheck", "--scope", "engine"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "conv2d" in out and "max rel err" in out

    def test_perturbed_conv_fails(self, monkeypatch, capsys):
        original = ops._conv2d_backward

        def broken(*args, **kwargs):
            dx, dw, db = original(*args, **kwargs)
            return dx, dw * 1.01, db

        monkeypatch.setattr(ops, "_conv2d_backward", broken)
        assert main(["gradcheck", "--scope", "engine"]) == EXIT_CHECK
        assert "FAIL" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [["gradcheck", "--scope", "everything"], [], ["frobnicate"]])
    def test_usage(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("OMSN_THREADS", "zero")
        assert main(["gradcheck", "--scope", "engine"]) == EXIT_USAGE
