import csv
import hashlib
import shutil

import numpy as np
import pytest
import yaml
from PIL import Image
from threadpoolctl import threadpool_limits

from cxrcam import cli, dataio, metrics

SMALL = ["--set", "dataset.preprocess.size=32"]


def tree_digests(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def read_history(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fixture_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_fixture")
    assert run("gen-fixture", "--out", root, "--per-class", "12,6,6", "--size", 32) == 0
    return root


@pytest.fixture(scope="module")
def trained(fixture_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    code = run("train", "--dataset", fixture_root, "--out", out, "--epochs", 3, "--lr", 1e-3, *SMALL)
    assert code == 0
    return out


class TestStats:
    def test_table(self, fixture_root, capsys):
        assert run("stats", fixture_root) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        rows = {line.split()[0]: line for line in lines}
        for name in dataio.CLASSES:
            assert name in rows and "25.0%" in rows[name]
        assert "96" in rows["Total"]

    def test_empty_dir(self, tmp_path, capsys):
        assert run("stats", tmp_path) == cli.EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_missing_dir(self, tmp_path):
        assert run("stats", tmp_path / "nope") == cli.EXIT_USAGE


class TestGenFixture:
    def test_defaults(self, tmp_path):
        assert run("gen-fixture", "--out", tmp_path) == 0
        manifest = dataio.scan_dataset(tmp_path)
        assert manifest.total == 360
        with Image.open(manifest.items("test")[0][0]) as img:
            assert img.size == (64, 64) and img.mode == "L"

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            run("gen-fixture", "--out", tmp_path / name, "--per-class", 2, "--size", 32, "--seed", 3)
        assert tree_digests(tmp_path / "a") == tree_digests(tmp_path / "b")

    def test_with_confound(self, tmp_path):
        run("gen-fixture", "--out", tmp_path, "--per-class", 3, "--size", 32, "--with-confound")
        r0, r1, c0, c1 = dataio.marker_box(32)
        marked = set()
        for split in dataio.SPLITS:
            for path, label in dataio.scan_dataset(tmp_path).items(split):
                if np.all(np.asarray(Image.open(path))[r0:r1, c0:c1] == 255):
                    marked.add(label)
        assert marked == {dataio.CONFOUND_CLASS}

    def test_bad_per_class(self, tmp_path):
        assert run("gen-fixture", "--out", tmp_path, "--per-class", "1,2") == cli.EXIT_USAGE


class TestTrain:
    def test_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"model.cxr", "history.csv", "run_config.yaml"}
        rows = read_history(trained / "history.csv")
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
        config = yaml.safe_load((trained / "run_config.yaml").read_text())
        assert config["train"]["epochs"] == 3 and config["dataset"]["preprocess"]["size"] == 32

    def test_defaults_on_full_fixture(self, full_fixture, tmp_path):
        with threadpool_limits(1):
            assert run("train", "--dataset", full_fixture.root, "--out", tmp_path) == 0
        rows = read_history(tmp_path / "history.csv")
        assert len(rows) <= 10
        assert float(rows[-1]["val_acc"]) >= 0.95

    def test_zero_lr_flat_loss(self, fixture_root, tmp_path):
        assert run("train", "--dataset", fixture_root, "--out", tmp_path, "--epochs", 3,
                   "--lr", 0, *SMALL) == 0
        rows = read_history(tmp_path / "history.csv")
        assert len({r["val_loss"] for r in rows}) == 1
        train = [float(r["train_loss"]) for r in rows]
        np.testing.assert_allclose(train, train[0], rtol=1e-6)

    def test_early_stop_on_rotated_validation(self, fixture_root, tmp_path):
        # Validation images sit under the wrong class directories, so learning
        # the training labels only makes validation loss worse.
        root = tmp_path / "data"
        shutil.copytree(fixture_root, root)
        val = root / "val"
        names = list(dataio.CLASSES)
        for name in names:
            (val / name).rename(val / (name + ".tmp"))
        for name, target in zip(names, names[1:] + names[:1]):
            (val / (name + ".tmp")).rename(val / target)
        assert run("train", "--dataset", root, "--out", tmp_path / "run", "--epochs", 10,
                   "--lr", 3e-3, "--set", "train.early_stop_patience=2", *SMALL) == 0
        assert len(read_history(tmp_path / "run" / "history.csv")) < 10

    def test_config_file_and_overrides(self, fixture_root, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({
            "dataset": {"root": str(fixture_root), "preprocess": {"size": 32}},
            "train": {"epochs": 1, "base_lr": 1e-3},
            "output": {"dir": "out"},
        }))
        assert run("train", "--config", cfg, "--set", "train.epochs=2") == 0
        assert len(read_history(tmp_path / "out" / "history.csv")) == 2
        assert run("train", "--config", cfg, "--set", "train.epochs=2", "--epochs", 1,
                   "--out", tmp_path / "flag") == 0
        assert len(read_history(tmp_path / "flag" / "history.csv")) == 1

    def test_unknown_config_key(self, fixture_root, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text(yaml.safe_dump({"train": {"epochz": 3}}))
        assert run("train", "--config", cfg, "--dataset", fixture_root) == cli.EXIT_USAGE
        assert "epochz" in capsys.readouterr().err

    def test_unknown_set_key(self, fixture_root, tmp_path):
        assert run("train", "--dataset", fixture_root, "--out", tmp_path,
                   "--set", "model.depth=3") == cli.EXIT_USAGE

    def test_invalid_train_value(self, fixture_root, tmp_path):
        assert run("train", "--dataset", fixture_root, "--out", tmp_path,
                   "--set", "train.plateau_factor=2") == cli.EXIT_USAGE

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--out", tmp_path) == cli.EXIT_USAGE

    def test_empty_split(self, tmp_path):
        for split in dataio.SPLITS:
            (tmp_path / split / "NORMAL").mkdir(parents=True)
        assert run("train", "--dataset", tmp_path, "--out", tmp_path / "run") == cli.EXIT_DATA


class TestEval:
    def test_report(self, trained, fixture_root, tmp_path, capsys):
        assert run("eval", trained / "model.cxr", "--dataset", fixture_root,
                   "--out", tmp_path) == 0
        text = (tmp_path / "report.txt").read_text()
        assert capsys.readouterr().out == text
        fields = dict(line.split(": ", 1) for line in text.splitlines()[:7])
        for key in ("accuracy", "loss", "auc_macro", "f1_macro", "recall_macro", "precision_macro"):
            assert np.isfinite(float(fields[key]))
        cm = metrics.read_confusion_csv(tmp_path / "confusion.csv")
        assert cm.sum() == 24
        assert float(fields["accuracy"]) == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-6)
        assert (tmp_path / "roc.csv").exists()

    def test_untrained_model_near_chance(self, fixture_root, tmp_path):
        assert run("train", "--dataset", fixture_root, "--out", tmp_path / "m", "--epochs", 0,
                   "--seed", 4, *SMALL) == 0
        assert run("eval", tmp_path / "m" / "model.cxr", "--dataset", fixture_root,
                   "--out", tmp_path / "e") == 0
        cm = metrics.read_confusion_csv(tmp_path / "e" / "confusion.csv")
        assert abs(np.trace(cm) / cm.sum() - 0.25) <= 0.15

    def test_missing_model(self, fixture_root, tmp_path):
        assert run("eval", tmp_path / "none.cxr", "--dataset", fixture_root,
                   "--out", tmp_path) == cli.EXIT_USAGE

    def test_corrupt_model(self, fixture_root, tmp_path):
        (tmp_path / "junk.cxr").write_bytes(b"junk")
        assert run("eval", tmp_path / "junk.cxr", "--dataset", fixture_root,
                   "--out", tmp_path) == cli.EXIT_USAGE

    def test_undecodable_image(self, trained, fixture_root, tmp_path, capsys):
        root = tmp_path / "data"
        shutil.copytree(fixture_root, root)
        (root / "test" / "NORMAL" / "zz_broken.png").write_bytes(b"not a png")
        assert run("eval", trained / "model.cxr", "--dataset", root,
                   "--out", tmp_path / "e") == cli.EXIT_DATA
        assert "zz_broken.png" in capsys.readouterr().err


class TestExplain:
    def test_first_n(self, trained, fixture_root, tmp_path):
        assert run("explain", trained / "model.cxr", "--dataset", fixture_root,
                   "--first-n", 4, "--out", tmp_path) == 0
        with open(tmp_path / "manifest.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(list((tmp_path / "overlays").iterdir())) == 4
        # one image per class, taken in class order
        assert [r["filename"].split("_")[0] for r in rows] == [f"true-{c}" for c in dataio.CLASSES]

    def test_alpha_zero_is_grayscale(self, trained, fixture_root, tmp_path):
        path = dataio.scan_dataset(fixture_root).items("test")[0][0]
        assert run("explain", trained / "model.cxr", path, "--alpha", 0, "--out", tmp_path) == 0
        (png,) = (tmp_path / "overlays").iterdir()
        out = np.asarray(Image.open(png))
        gray = np.asarray(Image.open(path))
        for c in range(3):
            np.testing.assert_array_equal(out[..., c], gray)

    def test_batch_invariance(self, trained, fixture_root, tmp_path):
        paths = [p for p, _ in dataio.scan_dataset(fixture_root).items("test")[::6]]
        assert run("explain", trained / "model.cxr", *paths, "--out", tmp_path / "all") == 0
        together = tree_digests(tmp_path / "all" / "overlays")
        single = {}
        for i, path in enumerate(paths):
            assert run("explain", trained / "model.cxr", path, "--out", tmp_path / str(i)) == 0
            single.update(tree_digests(tmp_path / str(i) / "overlays"))
        assert single == together and len(together) == len(paths)

    def test_bad_layer(self, trained, fixture_root, tmp_path):
        assert run("explain", trained / "model.cxr", "--dataset", fixture_root,
                   "--layer", "nope", "--out", tmp_path) == cli.EXIT_USAGE

    def test_bad_alpha(self, trained, fixture_root, tmp_path):
        assert run("explain", trained / "model.cxr", "--dataset", fixture_root,
                   "--alpha", 2, "--out", tmp_path) == cli.EXIT_USAGE


class TestRoundRobin:
    def test_order(self, fixture_root):
        manifest = dataio.scan_dataset(fixture_root)
        idx = cli.first_n_round_robin(manifest, "test", 6)
        labels = [manifest.items("test")[i][1] for i in idx]
        assert labels == [0, 1, 2, 3, 0, 1]

    def test_more_than_available(self, fixture_root):
        manifest = dataio.scan_dataset(fixture_root)
        assert len(cli.first_n_round_robin(manifest, "test", 1000)) == 24


def test_internal_error_exit_code(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli.dataio, "scan_dataset", boom)
    assert run("stats", tmp_path) == cli.EXIT_INTERNAL


def test_module_entry_point(fixture_root):
    import subprocess
    import sys

    done = subprocess.run([sys.executable, "-m", "cxrcam", "stats", str(fixture_root)],
                          capture_output=True, text=True)
    assert done.returncode == 0 and "Total" in done.stdout
