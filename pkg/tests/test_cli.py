"""Command line behaviour: artifacts, error paths, reproducibility.

Everything runs in-process through main() with tiny synthetic configs so
the whole file stays fast; the release-size claims live in the
acceptance tests.
"""

import json

import numpy as np
import pytest

from bgnn.cli import MetricsLog, main
from bgnn.modelio import (
    read_model,
    save_xyz_dataset,
    synth_dataset,
)
from bgnn.network import forward_eval


def write_config(path, variant="float", points=24, epochs=1, extra=""):
    path.write_text(
        f"""
[model]
variant = {variant}
size = mini
classes = 3
points = {points}

[data]
kind = synth
points = {points}
train_per_class = 6
test_per_class = 3

[train]
epochs = {epochs}
batch_size = 8
seed = 3
{extra}
"""
    )
    return path


@pytest.fixture()
def cfg_path(tmp_path):
    return write_config(tmp_path / "run.ini")


def metrics_lines(out_dir):
    return (out_dir / "metrics.tsv").read_text().strip().split("\n")


class TestTrain:
    def test_writes_artifacts(self, tmp_path, cfg_path):
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "model.bgnn").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["seed"] == 3
        assert manifest["threads"] == 1
        assert len(manifest["config_sha256"]) == 64
        for line in metrics_lines(out):
            epoch, split, metric, value = line.split("\t")
            int(epoch)
            float(value)
            assert split in ("train", "test")
            assert metric in ("loss", "accuracy")

    def test_final_eval_is_from_saved_file(self, tmp_path, cfg_path):
        out = tmp_path / "out"
        main(["train", "--config", str(cfg_path), "--out", str(out)])
        last = [ln for ln in metrics_lines(out) if ln.startswith("1\t")]
        assert [ln.split("\t")[1] for ln in last] == ["train", "test"]

    def test_same_seed_same_bytes(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["train", "--config", str(cfg_path), "--out", str(a)])
        main(["train", "--config", str(cfg_path), "--out", str(b)])
        assert (a / "model.bgnn").read_bytes() == (b / "model.bgnn").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["train", "--config", str(cfg_path), "--out", str(a)])
        main(["train", "--config", str(cfg_path), "--out", str(b), "--seed", "9"])
        assert json.loads((b / "manifest.json").read_text())["seed"] == 9
        assert (a / "model.bgnn").read_bytes() != (b / "model.bgnn").read_bytes()

    def test_unknown_config_keys_fail(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\nbogus = 1\n\n[junk]\nx = 2\n")
        rc = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "unknown config keys" in err
        assert "model.bogus" in err and "junk" in err

    def test_missing_config_fails(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path / "o")]) == 1
        assert "needs --config" in capsys.readouterr().err

    def test_nonexistent_config_fails(self, tmp_path, capsys):
        rc = main(["train", "--config", str(tmp_path / "nope.ini"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestInfer:
    def test_matches_training_final_eval(self, tmp_path, cfg_path):
        tout, iout = tmp_path / "t", tmp_path / "i"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        rc = main(["infer", "--model", str(tout / "model.bgnn"),
                   "--config", str(cfg_path), "--out", str(iout)])
        assert rc == 0
        final = {
            ln.split("\t")[1]: ln.split("\t")[3]
            for ln in metrics_lines(tout) if ln.startswith("1\t")
        }
        inferred = {
            ln.split("\t")[1]: ln.split("\t")[3] for ln in metrics_lines(iout)
        }
        # repr'd floats, so string equality means bitwise agreement
        assert inferred["train"] == final["train"]
        assert inferred["test"] == final["test"]
        assert "all" in inferred

    def test_predictions_file_covers_dataset(self, tmp_path, cfg_path):
        tout, iout = tmp_path / "t", tmp_path / "i"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        main(["infer", "--model", str(tout / "model.bgnn"),
              "--config", str(cfg_path), "--out", str(iout)])
        lines = (iout / "predictions.tsv").read_text().strip().split("\n")
        assert lines[0] == "split\tindex\tlabel\tpredicted"
        assert len(lines) - 1 == 18 + 9
        split, idx, label, pred = lines[1].split("\t")
        assert split == "train" and idx == "0"
        assert int(label) in (0, 1, 2) and int(pred) in (0, 1, 2)

    def test_xyz_directory_as_data(self, tmp_path, cfg_path):
        tout, iout = tmp_path / "t", tmp_path / "i"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        ds = synth_dataset(2, 1, n_points=24, seed=5)
        save_xyz_dataset(ds, tmp_path / "clouds")
        rc = main(["infer", "--model", str(tout / "model.bgnn"),
                   "--data", str(tmp_path / "clouds"), "--out", str(iout)])
        assert rc == 0
        assert (iout / "predictions.tsv").is_file()

    def test_point_count_mismatch_fails(self, tmp_path, cfg_path, capsys):
        tout = tmp_path / "t"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        other = write_config(tmp_path / "other.ini", points=32)
        rc = main(["infer", "--model", str(tout / "model.bgnn"),
                   "--config", str(other), "--out", str(tmp_path / "i")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "24" in err and "32" in err

    def test_needs_a_dataset_source(self, tmp_path, cfg_path, capsys):
        tout = tmp_path / "t"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        rc = main(["infer", "--model", str(tout / "model.bgnn"),
                   "--out", str(tmp_path / "i")])
        assert rc == 1
        assert "--config or --data" in capsys.readouterr().err


class TestConvert:
    def test_deploy_file_matches_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "b.ini", variant="bf2")
        tout, cout = tmp_path / "t", tmp_path / "c"
        main(["train", "--config", str(cfg), "--out", str(tout)])
        rc = main(["convert", "--model", str(tout / "model.bgnn"),
                   "--out", str(cout)])
        assert rc == 0
        src, _ = read_model(tout / "model.bgnn")
        dep, info = read_model(cout / "model.deploy.bgnn")
        assert info["kind"] == 0
        rng = np.random.default_rng(7)
        coords = rng.standard_normal((24, 3))
        assert np.array_equal(forward_eval(src, coords), forward_eval(dep, coords))
        checkpoint_size = (tout / "model.bgnn").stat().st_size
        assert (cout / "model.deploy.bgnn").stat().st_size < checkpoint_size

    def test_stage1_checkpoint_is_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "b.ini", variant="bf2",
                           extra="\n[distill]\nstage1_epochs = 1\n")
        dout = tmp_path / "d"
        assert main(["distill", "--config", str(cfg), "--stage", "1",
                     "--out", str(dout)]) == 0
        rc = main(["convert", "--model", str(dout / "model.bgnn"),
                   "--out", str(tmp_path / "c")])
        assert rc == 1
        assert "deployment" in capsys.readouterr().err


class TestDistill:
    def fast_cfg(self, tmp_path, variant="bf2"):
        extra = ("\n[distill]\nstage1_epochs = 1\nstage2_epochs = 1\n"
                 "stage3_epochs = 1\n")
        return write_config(tmp_path / "d.ini", variant=variant, extra=extra)

    def test_float_variant_is_rejected(self, tmp_path, cfg_path, capsys):
        rc = main(["distill", "--config", str(cfg_path),
                   "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "binary variant" in capsys.readouterr().err

    def test_cascade_trains_teacher_and_stages(self, tmp_path):
        cfg = self.fast_cfg(tmp_path)
        out = tmp_path / "d"
        assert main(["distill", "--config", str(cfg), "--out", str(out)]) == 0
        for name in ("teacher.bgnn", "model.stage1.bgnn", "model.stage2.bgnn",
                     "model.stage3.bgnn", "model.bgnn"):
            assert (out / name).is_file()
        splits = {ln.split("\t")[1] for ln in metrics_lines(out)}
        assert {"teacher/train", "stage1/train", "stage2/train",
                "stage3/train"} <= splits

    def test_teacher_from_file_skips_training(self, tmp_path, cfg_path):
        tout = tmp_path / "t"
        main(["train", "--config", str(cfg_path), "--out", str(tout)])
        cfg = self.fast_cfg(tmp_path)
        out = tmp_path / "d"
        rc = main(["distill", "--config", str(cfg), "--stage", "direct",
                   "--model", str(tout / "model.bgnn"), "--out", str(out)])
        assert rc == 0
        assert not (out / "teacher.bgnn").exists()
        assert (out / "model.bgnn").is_file()
        splits = {ln.split("\t")[1] for ln in metrics_lines(out)}
        assert not any(s.startswith("teacher/") for s in splits)

    def test_scratch_needs_no_teacher(self, tmp_path):
        cfg = self.fast_cfg(tmp_path, variant="rf")
        out = tmp_path / "d"
        rc = main(["distill", "--config", str(cfg), "--stage", "scratch",
                   "--out", str(out)])
        assert rc == 0
        assert not (out / "teacher.bgnn").exists()
        assert (out / "model.stage3.bgnn").is_file()

    def test_stage_flag_stops_early(self, tmp_path):
        cfg = self.fast_cfg(tmp_path)
        out = tmp_path / "d"
        rc = main(["distill", "--config", str(cfg), "--stage", "2",
                   "--out", str(out)])
        assert rc == 0
        assert (out / "model.stage2.bgnn").is_file()
        assert not (out / "model.stage3.bgnn").exists()
        model, info = read_model(out / "model.bgnn")
        assert info["extra"]["stage"] == "stage2"
        assert model.spec.quantizer == "sign"
        assert model.spec.weight_quantizer == "none"


class TestBench:
    def test_writes_report_files(self, tmp_path):
        cfg = tmp_path / "b.ini"
        cfg.write_text(
            "[bench]\nruns = 2\ngemm_m = 16\ngemm_n = 16\ngemm_d = 64\n"
            "pairwise_n = 16\npairwise_d = 64\n"
        )
        out = tmp_path / "b"
        assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        text = (out / "bench.txt").read_text()
        assert "gemm" in text and "pairwise" in text and "forward" in text
        table = (out / "bench.tsv").read_text().strip().split("\n")
        assert table[0].startswith("kind\tname")
        assert len(table) > 5
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "bench"


class TestMetricsLog:
    def test_appends_tab_separated_lines(self, tmp_path, capsys):
        log = MetricsLog(tmp_path / "m.tsv")
        log(0, "train", "loss", 0.5)
        log(1, "test", "accuracy", 0.25)
        lines = (tmp_path / "m.tsv").read_text().strip().split("\n")
        assert lines == ["0\ttrain\tloss\t0.5", "1\ttest\taccuracy\t0.25"]
        assert "0\ttrain\tloss\t0.5" in capsys.readouterr().out

    def test_keeps_existing_lines(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("0\ttrain\tloss\t1.0\n")
        MetricsLog(path, echo=False)(1, "train", "loss", 0.5)
        assert path.read_text().count("\n") == 2
