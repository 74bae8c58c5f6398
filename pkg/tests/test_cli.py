import csv
import hashlib
import json

import numpy as np
import pytest

from magsd.cli import main
from magsd.dataset import Box, load_image, load_manifest, load_samples

SMALL_NET = ["--input-size", "32", "--stage-channels", "4,4,8", "--stem-channels", "2", "--num-maps", "4",
             "--tiles", "4,4", "--batch-size", "8"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--classes", "3", "--per-class", "6", "--size", "32", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    code = main(["train", "--manifest", str(dataset / "manifest.csv"), "--run-dir", str(run), "--epochs", "1",
                 "--folds", "1", "--k", "3", "--seed", "7", *SMALL_NET])
    assert code == 0
    return run


class TestSynth:
    def test_counts(self, dataset):
        assert len(list((dataset / "images").glob("*.png"))) == 18
        assert len(load_manifest(dataset / "manifest.csv").entries) == 18

    def test_rerun_identical(self, dataset, tmp_path):
        main(["synth", "--classes", "3", "--per-class", "6", "--size", "32", "--seed", "3", "--out", str(tmp_path)])
        assert _sha(tmp_path / "manifest.csv") == _sha(dataset / "manifest.csv")
        assert _sha(tmp_path / "images" / "class2_0005.png") == _sha(dataset / "images" / "class2_0005.png")

    def test_one_class_is_usage_error(self, tmp_path):
        assert main(["synth", "--classes", "1", "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_outputs(self, trained):
        for name in ("config.json", "metrics.json", "fold0/model.pt", "fold0/train_log.csv", "fold0/heldout.csv"):
            assert (trained / name).is_file(), name
        metrics = json.loads((trained / "metrics.json").read_text())
        assert metrics["classes"] == ["class0", "class1", "class2"]
        assert len(metrics["folds"]) == 1 and "mean" in metrics["aggregate"]["multiclass_accuracy"]
        config = json.loads((trained / "config.json").read_text())
        assert config["seed"] == 7 and config["epochs"] == 1

    def test_same_seed_identical_metrics(self, dataset, trained, tmp_path):
        code = main(["train", "--manifest", str(dataset / "manifest.csv"), "--run-dir", str(tmp_path), "--epochs", "1",
                     "--folds", "1", "--k", "3", "--seed", "7", *SMALL_NET])
        assert code == 0
        assert (tmp_path / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()

    def test_rerun_from_resolved_config(self, trained, tmp_path):
        assert main(["train", "--config", str(trained / "config.json"), "--run-dir", str(tmp_path)]) == 0
        assert (tmp_path / "metrics.json").read_bytes() == (trained / "metrics.json").read_bytes()

    def test_config_file_then_flag_precedence(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"manifest = {dataset / 'manifest.csv'}\nepochs = 5\nconsistency = soft\n# comment\n")
        run = tmp_path / "r"
        code = main(["train", "--config", str(cfg), "--epochs", "1", "--folds", "1", "--k", "3",
                     "--consistency", "none", "--augs", "", "--run-dir", str(run), *SMALL_NET])
        assert code == 0
        resolved = json.loads((run / "config.json").read_text())
        assert resolved["epochs"] == 1 and resolved["consistency"] == "none" and resolved["augs"] == []
        with open(run / "fold0" / "train_log.csv") as fh:
            assert all(float(r["d_bar"]) == 0.0 for r in csv.DictReader(fh))

    def test_unknown_key_in_file(self, dataset, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        assert main(["train", "--config", str(cfg), "--manifest", str(dataset / "manifest.csv")]) == 2

    @pytest.mark.parametrize("flags", [["--pooling", "max"], ["--consistency", "kl"], ["--augs", "cutout"],
                                       ["--scales", "4"], ["--clahe", "maybe"]])
    def test_bad_values_are_usage_errors(self, dataset, flags):
        assert main(["train", "--manifest", str(dataset / "manifest.csv"), *flags]) == 2

    def test_unknown_flag(self, dataset):
        with pytest.raises(SystemExit) as info:
            main(["train", "--manifest", str(dataset / "manifest.csv"), "--learning-rate", "0.1"])
        assert info.value.code == 2

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "none.csv"), "--run-dir", str(tmp_path / "r")]) == 3


class TestEvaluate:
    def test_outputs(self, dataset, trained, tmp_path):
        code = main(["evaluate", "--checkpoint", str(trained / "fold0" / "model.pt"),
                     "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path)])
        assert code == 0
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert report["n"] == 18
        assert sorted(p.name for p in tmp_path.glob("roc_*.csv")) == ["roc_class0.csv", "roc_class1.csv", "roc_class2.csv"]
        with open(tmp_path / "roc_class1.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["threshold", "fpr", "tpr"]
        assert (float(rows[1][1]), float(rows[1][2])) == (0.0, 0.0) and (float(rows[-1][1]), float(rows[-1][2])) == (1.0, 1.0)
        with open(tmp_path / "confusion.csv") as fh:
            cm = [list(map(int, r[1:])) for r in list(csv.reader(fh))[1:]]
        assert np.sum(cm) == 18

    def test_single_roc_class(self, dataset, trained, tmp_path):
        main(["evaluate", "--checkpoint", str(trained / "fold0" / "model.pt"),
              "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path), "--roc-class", "class2"])
        assert [p.name for p in tmp_path.glob("roc_*.csv")] == ["roc_class2.csv"]

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert main(["evaluate", "--checkpoint", str(tmp_path / "x.pt"), "--manifest", str(dataset / "manifest.csv")]) == 3

    def test_class_count_mismatch(self, trained, tmp_path):
        main(["synth", "--classes", "2", "--per-class", "3", "--size", "32", "--out", str(tmp_path / "d")])
        code = main(["evaluate", "--checkpoint", str(trained / "fold0" / "model.pt"),
                     "--manifest", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "e")])
        assert code == 3


class TestLocalize:
    def _run(self, dataset, trained, out, threshold):
        return main(["localize", "--checkpoint", str(trained / "fold0" / "model.pt"),
                     "--manifest", str(dataset / "manifest.csv"), "--threshold", threshold, "--out", str(out)])

    def test_zero_threshold_full_frame(self, dataset, trained, tmp_path):
        assert self._run(dataset, trained, tmp_path, "0.0") == 0
        result = json.loads((tmp_path / "localization.json").read_text())
        truth = {s.id: s.annotation_box() for s in load_samples(load_manifest(dataset / "manifest.csv"))}
        for entry in result["samples"]:
            assert entry["box"] == Box(0, 0, 32, 32).to_dict()
            assert entry["iou"] == pytest.approx(truth[entry["id"]].area / (32 * 32), abs=1e-12)
        assert len(list((tmp_path / "heatmaps").glob("*.png"))) == 18

    def test_above_one_is_empty(self, dataset, trained, tmp_path):
        self._run(dataset, trained, tmp_path, "1.01")
        result = json.loads((tmp_path / "localization.json").read_text())
        assert result["mean_iou"] == 0.0 and all(e["box"] is None for e in result["samples"])

    def test_sweep(self, dataset, trained, tmp_path):
        assert self._run(dataset, trained, tmp_path, "sweep") == 0
        with open(tmp_path / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["threshold"]) for r in rows] == pytest.approx(np.arange(21) * 0.05)
        best = max(float(r["mean_iou"]) for r in rows)
        assert json.loads((tmp_path / "localization.json").read_text())["mean_iou"] == best

    def test_bad_threshold(self, dataset, trained, tmp_path):
        assert self._run(dataset, trained, tmp_path, "high") == 2

    def test_no_annotations(self, dataset, trained, tmp_path):
        lines = (dataset / "manifest.csv").read_text().splitlines()
        stripped = ["path,label"] + [",".join(line.split(",")[:2]) for line in lines[1:]]
        (dataset / "plain.csv").write_text("\n".join(stripped) + "\n")
        code = main(["localize", "--checkpoint", str(trained / "fold0" / "model.pt"),
                     "--manifest", str(dataset / "plain.csv"), "--out", str(tmp_path)])
        assert code == 3


def test_augment_preview(dataset, trained, tmp_path):
    code = main(["augment-preview", "--checkpoint", str(trained / "fold0" / "model.pt"),
                 "--manifest", str(dataset / "manifest.csv"), "--index", "4", "--map", "1", "--out", str(tmp_path)])
    assert code == 0
    assert load_image(tmp_path / "preview.png").shape == (32, 128)
    assert (tmp_path / "attention_map1.png").is_file()


def test_preprocess(dataset, tmp_path):
    code = main(["preprocess", "--manifest", str(dataset / "manifest.csv"), "--out", str(tmp_path),
                 "--input-size", "64", "--tiles", "4x4"])
    assert code == 0
    assert load_image(tmp_path / "images" / "class0_0000.png").shape == (64, 64)
