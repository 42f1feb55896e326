"""Command-line workflows: gen-data, train, eval, compare; exit codes."""

import json
from pathlib import Path

import pytest

from domexperts.cli import main
from domexperts.fileio import dump_json
from domexperts.scenes import dataset_digest, load_dataset
from domexperts.schema import DomainDimension, DomainSchema, bin_metadata, save_schema

SCENE = {"image_size": 32, "altitude_cells": 3, "seed": 5,
         "objects_min": 1, "objects_max": 2}

MODEL = {"stages": {"stage_count": 3, "channels": [4, 6, 8], "in_channels": 1},
         "anchors": {"sizes": [6.0, 16.0], "class_count": 1}}

TRAIN = {"epochs_pretrain": 1, "epochs_expert": 1, "batch_size": 4,
         "learning_rate": 0.01, "seed": 3}


def three_bin_schema():
    return DomainSchema((DomainDimension.equidistant(
        "altitude", "altitude_m", 5.0, 100.0, 3),))


def write_manifest(directory: Path, runs, train=TRAIN, n_train=12, n_test=6,
                   schema_file="schema.json", scene=SCENE) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    save_schema(three_bin_schema(), directory / "schema.json")
    dump_json(scene, directory / "scene.json")
    manifest = {
        "out_dir": "runs",
        "dataset": {"path": "data",
                    "generate": {"spec": "scene.json", "n_train": n_train,
                                 "n_test": n_test, "balance": "balanced"}},
        "schema": schema_file,
        "model": MODEL,
        "train": train,
        "runs": runs,
    }
    path = directory / "manifest.json"
    dump_json(manifest, path)
    return path


DEFAULT_RUNS = [{"name": "baseline", "kind": "baseline"},
                {"name": "altitude@2", "kind": "experts", "split_stage": 2}]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One manifest trained end to end, shared by eval and compare tests."""
    root = tmp_path_factory.mktemp("cli")
    manifest = write_manifest(root, DEFAULT_RUNS)
    assert main(["train", "--manifest", str(manifest)]) == 0
    return {
        "root": root,
        "manifest": manifest,
        "test_dir": root / "data" / "test",
        "schema": root / "schema.json",
        "baseline_ckpt": root / "runs" / "baseline" / "model.ckpt",
        "expert_ckpt": root / "runs" / "altitude@2" / "model.ckpt",
    }


class TestGenData:
    def test_generates_and_prints_count_table(self, tmp_path, capsys):
        dump_json(SCENE, tmp_path / "scene.json")
        rc = main(["gen-data", "--spec", str(tmp_path / "scene.json"),
                   "--out", str(tmp_path / "ds"), "--n-train", "12", "--n-test", "6"])
        assert rc == 0
        out = capsys.readouterr().out
        assert (tmp_path / "ds" / "train" / "annotations.json").exists()
        assert (tmp_path / "ds" / "test" / "annotations.json").exists()
        assert "train images" in out
        assert "altitude" in out

    def test_same_seed_same_digest(self, tmp_path):
        dump_json(SCENE, tmp_path / "scene.json")
        for name in ("a", "b"):
            assert main(["gen-data", "--spec", str(tmp_path / "scene.json"),
                         "--out", str(tmp_path / name), "--n-train", "8",
                         "--n-test", "4"]) == 0
        assert dataset_digest(tmp_path / "a" / "train") == \
            dataset_digest(tmp_path / "b" / "train")

    def test_uavdt_like_preset_is_heavily_skewed(self, tmp_path):
        dump_json(SCENE, tmp_path / "scene.json")
        rc = main(["gen-data", "--spec", str(tmp_path / "scene.json"),
                   "--out", str(tmp_path / "ds"), "--n-train", "60",
                   "--n-test", "12", "--preset", "uavdt-like"])
        assert rc == 0
        train = load_dataset(tmp_path / "ds" / "train")
        schema = three_bin_schema()
        objects = {}
        for rec in train.records:
            key = str(bin_metadata(rec.metadata, schema))
            objects[key] = objects.get(key, 0) + len(rec.annotations)
        share = max(objects.values()) / sum(objects.values())
        assert share > 0.70

    def test_bad_weights_exit_code_2(self, tmp_path):
        dump_json(SCENE, tmp_path / "scene.json")
        rc = main(["gen-data", "--spec", str(tmp_path / "scene.json"),
                   "--out", str(tmp_path / "ds"), "--n-train", "8", "--n-test", "4",
                   "--balance", "imbalanced", "--weights", "0.5,0.5"])
        assert rc == 2


class TestTrain:
    def test_dry_run_prints_budgets_and_trains_nothing(self, tmp_path, capsys):
        manifest = write_manifest(tmp_path, DEFAULT_RUNS)
        rc = main(["train", "--manifest", str(manifest), "--dry-run"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "baseline" in out and "altitude@2" in out
        assert "steps" in out
        assert not (tmp_path / "runs" / "baseline" / "model.ckpt").exists()

    def test_produces_checkpoints_and_records(self, trained):
        assert trained["baseline_ckpt"].exists()
        assert trained["expert_ckpt"].exists()
        record = json.loads(
            (trained["root"] / "runs" / "baseline" / "record.json").read_text())
        assert record["manifest_digest"]
        assert record["dataset_digest"]
        assert record["kind"] == "baseline"
        from domexperts.experts import load_model
        model = load_model(trained["expert_ckpt"])
        assert model.name == "altitude@2"

    def test_rerun_resumes_without_retraining(self, trained, capsys):
        before = trained["baseline_ckpt"].read_bytes()
        rc = main(["train", "--manifest", str(trained["manifest"])])
        assert rc == 0
        out = capsys.readouterr().out
        assert "resum" in out or "skip" in out
        assert trained["baseline_ckpt"].read_bytes() == before

    def test_missing_schema_fails_before_training(self, tmp_path):
        manifest = write_manifest(tmp_path, DEFAULT_RUNS, schema_file="absent.json")
        rc = main(["train", "--manifest", str(manifest)])
        assert rc == 2
        assert not (tmp_path / "runs" / "baseline").exists()

    def test_duplicate_run_names_rejected(self, tmp_path):
        runs = [{"name": "x", "kind": "baseline"},
                {"name": "x", "kind": "experts", "split_stage": 1}]
        manifest = write_manifest(tmp_path, runs)
        assert main(["train", "--manifest", str(manifest)]) == 2

    def test_locked_output_rejected(self, tmp_path):
        manifest = write_manifest(tmp_path, DEFAULT_RUNS)
        lock = tmp_path / "runs" / ".domexperts.lock"
        lock.parent.mkdir(parents=True)
        lock.write_text("held")
        assert main(["train", "--manifest", str(manifest)]) == 2

    def test_divergence_exits_3(self, tmp_path):
        train = dict(TRAIN, learning_rate=1e12, epochs_pretrain=10)
        manifest = write_manifest(tmp_path, [{"name": "baseline", "kind": "baseline"}],
                                  train=train)
        assert main(["train", "--manifest", str(manifest)]) == 3


class TestEval:
    def test_model_eval_writes_report_detections_and_fps_note(self, trained,
                                                              tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--model", str(trained["expert_ckpt"]),
                   "--dataset", str(trained["test_dir"]),
                   "--schema", str(trained["schema"]),
                   "--thresholds", "0.5,0.7", "--out", str(out), "--name", "experts"])
        assert rc == 0
        doc = json.loads((out / "eval.json").read_text())
        assert doc["name"] == "experts"
        assert doc["dataset_digest"] == dataset_digest(trained["test_dir"])
        assert set(doc["report"]["full"]) == {"0.5", "0.7"}
        assert (out / "eval.txt").exists()
        assert (out / "detections.json").exists()
        printed = capsys.readouterr().out
        assert "images/s" in printed
        assert "op count" in printed

    def test_detection_dump_eval_needs_no_model(self, trained, tmp_path):
        first = tmp_path / "first"
        assert main(["eval", "--model", str(trained["baseline_ckpt"]),
                     "--dataset", str(trained["test_dir"]),
                     "--schema", str(trained["schema"]), "--out", str(first)]) == 0
        second = tmp_path / "second"
        rc = main(["eval", "--detections", str(first / "detections.json"),
                   "--dataset", str(trained["test_dir"]),
                   "--schema", str(trained["schema"]), "--out", str(second)])
        assert rc == 0
        a = json.loads((first / "eval.json").read_text())
        b = json.loads((second / "eval.json").read_text())
        assert a["report"]["full"] == b["report"]["full"]

    def test_no_per_domain_omits_stratification_and_averages(self, trained, tmp_path):
        out = tmp_path / "flat"
        rc = main(["eval", "--model", str(trained["baseline_ckpt"]),
                   "--dataset", str(trained["test_dir"]),
                   "--no-per-domain", "--out", str(out)])
        assert rc == 0
        doc = json.loads((out / "eval.json").read_text())
        assert doc["report"]["per_domain"] == {}
        assert doc["report"]["averages"] == {}
        assert doc["report"]["domains"] == []
        table = (out / "eval.txt").read_text()
        assert "average" not in table

    def test_model_and_dump_together_rejected(self, trained, tmp_path):
        rc = main(["eval", "--model", str(trained["baseline_ckpt"]),
                   "--detections", str(tmp_path / "nope.json"),
                   "--dataset", str(trained["test_dir"]),
                   "--schema", str(trained["schema"]), "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_eval_without_schema_needs_no_per_domain_off(self, trained, tmp_path):
        rc = main(["eval", "--model", str(trained["baseline_ckpt"]),
                   "--dataset", str(trained["test_dir"]),
                   "--out", str(tmp_path / "x")])
        assert rc == 2


class TestCompare:
    @pytest.fixture()
    def reports(self, trained, tmp_path):
        paths = []
        for name, ckpt in (("baseline", trained["baseline_ckpt"]),
                           ("altitude@2", trained["expert_ckpt"])):
            out = tmp_path / name.replace("@", "_")
            rc = main(["eval", "--model", str(ckpt),
                       "--dataset", str(trained["test_dir"]),
                       "--schema", str(trained["schema"]),
                       "--out", str(out), "--name", name])
            assert rc == 0
            paths.append(out / "eval.json")
        return paths

    def test_table_with_deltas(self, reports, tmp_path, capsys):
        out = tmp_path / "cmp"
        rc = main(["compare", "--reports", str(reports[0]), str(reports[1]),
                   "--out", str(out)])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "baseline" in printed and "altitude@2" in printed
        assert "+0.0000" in printed  # baseline row deltas against itself
        assert (out / "comparison.txt").exists()
        rows = json.loads((out / "comparison.json").read_text())["rows"]
        assert rows[0]["delta_overall"] == 0.0

    def test_mismatched_digests_rejected(self, trained, tmp_path):
        train_dir = trained["root"] / "data" / "train"
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        assert main(["eval", "--model", str(trained["baseline_ckpt"]),
                     "--dataset", str(trained["test_dir"]),
                     "--schema", str(trained["schema"]), "--out", str(a_dir)]) == 0
        assert main(["eval", "--model", str(trained["baseline_ckpt"]),
                     "--dataset", str(train_dir),
                     "--schema", str(trained["schema"]), "--out", str(b_dir),
                     "--name", "other"]) == 0
        rc = main(["compare", "--reports", str(a_dir / "eval.json"),
                   str(b_dir / "eval.json"), "--out", str(tmp_path / "cmp")])
        assert rc == 2

    def test_sweep_plot_emitted(self, reports, tmp_path):
        out = tmp_path / "cmp"
        rc = main(["compare", "--reports", str(reports[0]), str(reports[1]),
                   "--out", str(out), "--plots"])
        assert rc == 0
        assert list(out.glob("*.png"))
