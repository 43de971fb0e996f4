import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

import synth
from hybfer import model_zoo as mz
from hybfer import sift_features as sf
from hybfer.cli import main


def sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: tiny CSVs, a K=4 codebook, and a base checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    csv7 = str(root / "tiny.csv")
    csv6 = str(root / "ck.csv")
    synth.make_fer_csv(csv7, 8, 4, 4)
    synth.make_fer_csv(csv6, 10, 0, 0, num_classes=6, seed=1)
    assert main(["fit-codebook", "--data", csv7, "--out", "book.bovw",
                 "--k", "4", "--seed", "3", "--out-dir", str(root)]) == 0
    assert main(["train", "--model", "cnn", "--data", csv7, "--epochs", "1",
                 "--batch-size", "8", "--seed", "7", "--out", "base.ckpt",
                 "--out-dir", str(root)]) == 0
    return {"root": root, "csv7": csv7, "csv6": csv6,
            "book": str(root / "book.bovw"), "base": str(root / "base.ckpt")}


class TestTrainCommand:
    def test_smoke_contract(self, ws, tmp_path):
        out = str(tmp_path / "m.ckpt")
        code = main(["train", "--model", "cnn", "--data", ws["csv7"],
                     "--epochs", "2", "--batch-size", "8", "--seed", "7",
                     "--out", out])
        assert code == 0
        assert os.path.exists(out)
        history = [json.loads(line) for line in open(out + ".history.jsonl")]
        assert [h["epoch"] for h in history] == [1, 2]
        for entry in history:
            assert set(entry) == {"epoch", "train_loss", "train_acc", "val_acc"}
            assert entry["val_acc"] is not None  # csv7 has public rows

    def test_hybrid_variants_train(self, ws, tmp_path):
        for model, extra in (("cnn-sift", ["--codebook", ws["book"]]),
                             ("cnn-dsift", [])):
            out = str(tmp_path / f"{model}.ckpt")
            code = main(["train", "--model", model, "--data", ws["csv7"],
                         "--epochs", "1", "--batch-size", "8", "--out", out] + extra)
            assert code == 0
            ckpt = mz.load_checkpoint(out)
            assert ckpt.variant == {"cnn-sift": "cnn_sift", "cnn-dsift": "cnn_dsift"}[model]

    def test_sift_variant_without_codebook_is_usage_error(self, ws, tmp_path, capsys):
        code = main(["train", "--model", "cnn-sift", "--data", ws["csv7"],
                     "--out", str(tmp_path / "x.ckpt")])
        assert code == 2
        err = capsys.readouterr().err
        assert "--codebook" in err and "usage" in err

    def test_missing_data_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.csv")
        code = main(["train", "--model", "cnn", "--data", missing,
                     "--out", str(tmp_path / "x.ckpt")])
        assert code == 1
        assert "nope.csv" in capsys.readouterr().err

    def test_same_flags_same_bytes(self, ws, tmp_path):
        outs = []
        for rep in ("r1", "r2"):
            out = str(tmp_path / f"{rep}.ckpt")
            assert main(["train", "--model", "cnn", "--data", ws["csv7"],
                         "--epochs", "2", "--batch-size", "8", "--seed", "11",
                         "--out", out]) == 0
            outs.append(out)
        assert open(outs[0], "rb").read() == open(outs[1], "rb").read()
        assert (open(outs[0] + ".history.jsonl", "rb").read()
                == open(outs[1] + ".history.jsonl", "rb").read())

    def test_divergent_run_exits_three(self, ws, tmp_path, capsys):
        with np.errstate(all="ignore"):
            code = main(["train", "--model", "cnn", "--data", ws["csv7"],
                         "--epochs", "2", "--batch-size", "4",
                         "--learning-rate", "1e8", "--out", str(tmp_path / "x.ckpt")])
        assert code == 3
        assert "epoch" in capsys.readouterr().err

    def test_input_file_not_mutated(self, ws, tmp_path):
        before = sha256(ws["csv7"])
        main(["train", "--model", "cnn", "--data", ws["csv7"], "--epochs", "1",
              "--batch-size", "8", "--out", str(tmp_path / "m.ckpt")])
        assert sha256(ws["csv7"]) == before


class TestEvaluateCommand:
    def test_accuracy_line_and_confusion(self, ws, tmp_path, capsys):
        conf = str(tmp_path / "confusion.csv")
        code = main(["evaluate", "--checkpoint", ws["base"], "--data", ws["csv7"],
                     "--split", "private", "--confusion", conf])
        assert code == 0
        lines = [l for l in capsys.readouterr().out.splitlines()
                 if l.startswith("accuracy=")]
        assert len(lines) == 1
        value = lines[0].split("=", 1)[1]
        assert len(value.split(".")[1]) == 4
        rows = open(conf).read().splitlines()
        assert rows[0] == "actual," + ",".join(f"pred_{j}" for j in range(7))
        assert len(rows) == 8
        total = sum(int(v) for row in rows[1:] for v in row.split(",")[1:])
        assert total == 4  # csv7 private rows

    def test_three_identical_checkpoints_match_single(self, ws, tmp_path, capsys):
        def accuracy(args):
            assert main(args) == 0
            out = capsys.readouterr().out
            return [l for l in out.splitlines() if l.startswith("accuracy=")][0]

        single = accuracy(["evaluate", "--checkpoint", ws["base"], "--data",
                           ws["csv7"], "--split", "train",
                           "--confusion", str(tmp_path / "c1.csv")])
        triple = accuracy(["evaluate", "--checkpoint", ws["base"], "--checkpoint",
                           ws["base"], "--checkpoint", ws["base"], "--data",
                           ws["csv7"], "--split", "train",
                           "--confusion", str(tmp_path / "c3.csv")])
        assert single == triple

    def test_class_count_mismatch_exits_one(self, ws, tmp_path, capsys):
        tuned = str(tmp_path / "six.ckpt")
        assert main(["finetune", "--checkpoint", ws["base"], "--data", ws["csv6"],
                     "--epochs", "1", "--batch-size", "8", "--no-augment",
                     "--out", tuned]) == 0
        code = main(["evaluate", "--checkpoint", ws["base"], "--checkpoint", tuned,
                     "--data", ws["csv7"], "--split", "train",
                     "--confusion", str(tmp_path / "c.csv")])
        assert code == 1
        assert "class count" in capsys.readouterr().err

    def test_missing_data_exits_one(self, ws, tmp_path, capsys):
        code = main(["evaluate", "--checkpoint", ws["base"],
                     "--data", str(tmp_path / "gone.csv"), "--split", "train",
                     "--confusion", str(tmp_path / "c.csv")])
        assert code == 1
        assert "gone.csv" in capsys.readouterr().err


class TestFitCodebookCommand:
    def test_small_k_writes_codebook(self, ws, capsys):
        book = sf.load_codebook(ws["book"])
        assert book.k == 4
        assert book.centroids.shape == (4, 128)

    def test_prints_count_and_objective(self, ws, tmp_path, capsys):
        assert main(["fit-codebook", "--data", ws["csv7"], "--k", "4",
                     "--out", str(tmp_path / "b.bovw")]) == 0
        out = capsys.readouterr().out
        assert any(l.startswith("descriptors=") for l in out.splitlines())
        assert any(l.startswith("objective=") for l in out.splitlines())

    def test_same_seed_identical_files(self, ws, tmp_path):
        paths = [str(tmp_path / f"{rep}.bovw") for rep in ("a", "b")]
        for path in paths:
            assert main(["fit-codebook", "--data", ws["csv7"], "--k", "4",
                         "--seed", "3", "--out", path]) == 0
        assert open(paths[0], "rb").read() == open(paths[1], "rb").read()

    def test_oversized_k_advises_smaller(self, ws, tmp_path, capsys):
        code = main(["fit-codebook", "--data", ws["csv7"], "--k", "2048",
                     "--out", str(tmp_path / "b.bovw")])
        assert code == 1
        assert "smaller --k" in capsys.readouterr().err


class TestPredictCommand:
    def test_prints_label_name_probs(self, ws, tmp_path, capsys):
        code = main(["predict", "--checkpoint", ws["base"], "--data", ws["csv7"],
                     "--split", "train", "--index", "1", "--out-dir", str(tmp_path)])
        assert code == 0
        out = dict(l.split("=", 1) for l in capsys.readouterr().out.splitlines())
        assert 0 <= int(out["label"]) < 7
        assert out["name"]
        probs = [float(v) for v in out["probs"].split(",")]
        assert len(probs) == 7
        assert abs(sum(probs) - 1.0) <= 1e-4

    def test_index_out_of_range(self, ws, tmp_path, capsys):
        code = main(["predict", "--checkpoint", ws["base"], "--data", ws["csv7"],
                     "--split", "train", "--index", "99", "--out-dir", str(tmp_path)])
        assert code == 1
        assert "--index" in capsys.readouterr().err


class TestAugmentCommand:
    def test_expands_training_rows_only(self, ws, tmp_path):
        out = str(tmp_path / "aug.csv")
        assert main(["augment", "--data", ws["csv7"], "--out", out,
                     "--seed", "5"]) == 0
        lines = open(out).read().splitlines()
        assert len(lines) == 1 + 8 * 11 + 8  # header, train x11, tests passthrough

    def test_deterministic_and_nonmutating(self, ws, tmp_path):
        before = sha256(ws["csv7"])
        outs = [str(tmp_path / f"{rep}.csv") for rep in ("a", "b")]
        for out in outs:
            assert main(["augment", "--data", ws["csv7"], "--out", out,
                         "--seed", "5"]) == 0
        assert open(outs[0], "rb").read() == open(outs[1], "rb").read()
        assert sha256(ws["csv7"]) == before


class TestFinetuneCommand:
    def test_single_fit_produces_six_class_checkpoint(self, ws, tmp_path):
        out = str(tmp_path / "ft.ckpt")
        assert main(["finetune", "--checkpoint", ws["base"], "--data", ws["csv6"],
                     "--epochs", "1", "--batch-size", "8", "--no-augment",
                     "--out", out]) == 0
        ckpt = mz.load_checkpoint(out)
        assert ckpt.num_classes == 6
        assert os.path.exists(out + ".history.jsonl")

    def test_folds_mode_reports_every_fold(self, ws, tmp_path, capsys):
        out = str(tmp_path / "folds.jsonl")
        code = main(["finetune", "--checkpoint", ws["base"], "--data", ws["csv6"],
                     "--epochs", "1", "--batch-size", "8", "--no-augment",
                     "--folds", "2", "--out", out])
        assert code == 0
        folds = [json.loads(line) for line in open(out)]
        assert [f["heldout_size"] for f in folds] == [5, 5]
        assert [f["train_size"] for f in folds] == [5, 5]
        assert "mean_accuracy=" in capsys.readouterr().out


class TestManifests:
    def test_train_manifest_checksums_match_artifacts(self, ws, tmp_path):
        out = str(tmp_path / "m.ckpt")
        assert main(["train", "--model", "cnn", "--data", ws["csv7"],
                     "--epochs", "1", "--batch-size", "8", "--seed", "4",
                     "--out", out]) == 0
        manifest = json.load(open(out + ".manifest.json"))
        assert manifest["command"] == "train"
        assert manifest["seed"] == 4
        assert ws["csv7"] in manifest["inputs"]
        assert set(manifest["outputs"]) == {out, out + ".history.jsonl"}
        for path, digest in manifest["outputs"].items():
            assert sha256(path) == digest

    def test_evaluate_manifest_written(self, ws, tmp_path):
        conf = str(tmp_path / "c.csv")
        assert main(["evaluate", "--checkpoint", ws["base"], "--data", ws["csv7"],
                     "--split", "public", "--confusion", conf]) == 0
        manifest = json.load(open(conf + ".manifest.json"))
        assert manifest["outputs"] == {conf: sha256(conf)}

    def test_out_dir_collects_outputs(self, ws, tmp_path):
        out_dir = tmp_path / "runs"
        assert main(["train", "--model", "cnn", "--data", ws["csv7"],
                     "--epochs", "1", "--batch-size", "8", "--out", "m.ckpt",
                     "--out-dir", str(out_dir)]) == 0
        assert (out_dir / "m.ckpt").exists()
        assert (out_dir / "m.ckpt.history.jsonl").exists()
        assert (out_dir / "m.ckpt.manifest.json").exists()


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["explode"]) == 2
        capsys.readouterr()

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert main(["train", "--model", "cnn"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        capsys.readouterr()


class TestConsoleEntry:
    def test_module_invocation_round_trip(self, ws, tmp_path):
        out = str(tmp_path / "m.ckpt")
        proc = subprocess.run(
            [sys.executable, "-m", "hybfer", "train", "--model", "cnn",
             "--data", ws["csv7"], "--epochs", "1", "--batch-size", "8",
             "--out", out],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "epoch 1/1" in proc.stdout
        assert os.path.exists(out)
