import json

import numpy as np
import pytest

from fusionseg.cli import cli_dispatch, load_config_file, worker_count
from fusionseg.cloud import load_cloud, save_cloud
from fusionseg.datagen import load_dataset
from fusionseg.nn import (Checkpoint, FusionConfig, init_params,
                          load_checkpoint, save_checkpoint)

SMALL_YAML = """
model:
  k: 4
  edgeconv_widths: [8]
  residual_widths: [8]
  head_widths: [16]
train:
  epochs: 2
  lr0: 0.01
  batch_size: 2
scene:
  density: 30.0
preprocess:
  budget: 256
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(SMALL_YAML)
    return str(path)


@pytest.fixture()
def dataset_dir(tmp_path, config_path):
    out = tmp_path / "data"
    assert cli_dispatch(["gen", "--scenes", "3", "--config", config_path,
                         "--output", str(out)]) == 0
    return str(out)


@pytest.fixture()
def checkpoint_path(tmp_path, config_path, dataset_dir):
    run = tmp_path / "run"
    assert cli_dispatch(["train", "--dataset", dataset_dir, "--config",
                         config_path, "--output", str(run)]) == 0
    return str(run / "best.ckpt")


class TestWorkerCount:
    def test_default(self, monkeypatch):
        monkeypatch.delenv("FUSIONSEG_THREADS", raising=False)
        assert worker_count() == 0

    def test_env(self, monkeypatch):
        monkeypatch.setenv("FUSIONSEG_THREADS", "4")
        assert worker_count() == 4

    def test_garbage(self, monkeypatch):
        monkeypatch.setenv("FUSIONSEG_THREADS", "lots")
        assert worker_count(2) == 2


class TestConfigFile:
    def test_load(self, config_path):
        cfg = load_config_file(config_path)
        assert cfg["model"]["k"] == 4
        assert cfg["train"]["epochs"] == 2

    def test_unknown_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("scene:\n  neurons: 5\n")
        code = cli_dispatch(["gen", "--scenes", "1", "--config", str(path),
                             "--output", str(tmp_path / "d")])
        assert code == 1
        assert "neurons" in capsys.readouterr().err


class TestGen:
    def test_writes_manifest_and_scenes(self, dataset_dir):
        scenes = load_dataset(dataset_dir)
        assert len(scenes) == 3
        with open(f"{dataset_dir}/manifest.json") as f:
            manifest = json.load(f)
        assert len(manifest["scenes"]) == 3

    def test_zero_scenes_usage_error(self, tmp_path, config_path):
        code = cli_dispatch(["gen", "--scenes", "0", "--config", config_path,
                             "--output", str(tmp_path / "d")])
        assert code == 2

    def test_missing_required_flag(self):
        assert cli_dispatch(["gen"]) == 2

    def test_unknown_command(self):
        assert cli_dispatch(["transmogrify"]) == 2


class TestTrainEvalRoundTrip:
    def test_train_writes_checkpoints(self, checkpoint_path, tmp_path):
        ckpt = load_checkpoint(checkpoint_path)
        assert ckpt.config.k == 4
        assert (tmp_path / "run" / "history.jsonl").exists()

    def test_eval_text_and_json(self, checkpoint_path, dataset_dir,
                                config_path, capsys):
        assert cli_dispatch(["eval", "--dataset", dataset_dir, "--checkpoint",
                             checkpoint_path, "--config", config_path]) == 0
        out = capsys.readouterr().out
        assert "overall accuracy" in out
        assert cli_dispatch(["eval", "--dataset", dataset_dir, "--checkpoint",
                             checkpoint_path, "--config", config_path,
                             "--report", "json"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert "overall_accuracy" in data and "miou" in data

    def test_eval_seven_class(self, checkpoint_path, dataset_dir, config_path,
                              capsys):
        assert cli_dispatch(["eval", "--dataset", dataset_dir, "--checkpoint",
                             checkpoint_path, "--config", config_path,
                             "--classes", "7", "--report", "json"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert "Unlabeled" not in data["per_class_iou"]

    def test_finetune(self, checkpoint_path, dataset_dir, config_path,
                      tmp_path):
        run = tmp_path / "ft"
        assert cli_dispatch(["finetune", "--dataset", dataset_dir,
                             "--checkpoint", checkpoint_path, "--config",
                             config_path, "--output", str(run)]) == 0
        tuned = load_checkpoint(run / "last.ckpt")
        base = load_checkpoint(checkpoint_path)
        changed = [n for (n, a), (_, b) in zip(tuned.params.items(),
                                               base.params.items())
                   if not np.array_equal(a.value, b.value)]
        assert changed and all(n.startswith("head.") for n in changed)


class TestSegment:
    def test_segment_then_eval_equivalence(self, checkpoint_path, dataset_dir,
                                           tmp_path, capsys):
        scenes = load_dataset(dataset_dir)
        src = tmp_path / "scene.pcsb"
        save_cloud(scenes[0].with_points(scenes[0].points), src, "binary")
        out = tmp_path / "seg"
        assert cli_dispatch(["segment", "--input", str(src), "--checkpoint",
                             checkpoint_path, "--output", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        labeled = load_cloud(info["output"])
        assert labeled.has_labels and len(labeled) == len(scenes[0])
        counts = {str(c): int(n)
                  for c, n in enumerate(np.bincount(labeled.labels,
                                                    minlength=8)) if n}
        assert counts == info["per_class_counts"]

    def test_missing_input(self, checkpoint_path, tmp_path):
        code = cli_dispatch(["segment", "--input", str(tmp_path / "no.pcsb"),
                             "--checkpoint", checkpoint_path])
        assert code == 1


class TestStream:
    def test_directory_stream(self, checkpoint_path, tmp_path, capsys):
        rng = np.random.default_rng(0)
        frames = tmp_path / "frames"
        frames.mkdir()
        for i in range(2):
            for s in ("A", "B"):
                from fusionseg.cloud import LabeledCloud
                pts = rng.random((200, 3)) * [4.0, 4.0, 2.0]
                save_cloud(LabeledCloud(pts),
                           frames / f"frame_{i}_{s}.pcsb", "binary")
        out = tmp_path / "streamed"
        assert cli_dispatch(["stream", "--frames", str(frames),
                             "--checkpoint", checkpoint_path,
                             "--voxel-size", "0.1",
                             "--output", str(out)]) == 0
        lines = [json.loads(l) for l in
                 capsys.readouterr().out.strip().splitlines()]
        assert [l["frame_index"] for l in lines] == [0, 1]
        for l in lines:
            assert set(l["latency_ms"]) == {"preprocess", "inference",
                                            "postprocess", "total"}
        assert (out / "frame_0000_labeled.pcsb").exists()


class TestInfo:
    def test_checkpoint_info(self, checkpoint_path, capsys):
        assert cli_dispatch(["info", "--checkpoint", checkpoint_path]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["parameters"] > 0 and data["config"]["k"] == 4

    def test_dataset_info(self, dataset_dir, capsys):
        assert cli_dispatch(["info", "--dataset", dataset_dir]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["scenes"] == 3 and data["points_total"] > 0

    def test_no_args_usage_error(self):
        assert cli_dispatch(["info"]) == 2
