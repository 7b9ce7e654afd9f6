import csv
import json
import logging
import os

import pytest
import yaml

from mtrseg.cli import main
from mtrseg.config import MATRICES, PRESETS, RunConfig, load_matrix
from mtrseg.errors import ConfigError

TINY = {
    "name": "tiny",
    "data": {"num_classes": 4, "image_size": 32, "samples_train": 24, "samples_eval": 8},
    "schedule": {"base": 2, "increment": 1},
    "model": {"image_size": 32, "dim": 16, "num_queries": 6, "decoder_layers": 2, "heads": 2, "ffn_dim": 32},
    "train": {"base_iters": 3, "inc_iters_per_class": 2, "batch_size": 2, "log_every": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


def _read(path):
    with open(path, "rb") as f:
        data = f.read()
    return data if str(path).endswith(".ckpt") else data.decode()


class TestConfig:
    def test_presets_validate(self):
        for name in PRESETS:
            cfg = RunConfig.preset(name)
            assert len(cfg.schedule().all_classes) == 8
        assert RunConfig.preset("toy-4-1").schedule().steps == 5
        assert RunConfig.preset("toy-joint").schedule().steps == 1
        assert RunConfig.preset("finetune-baseline").model_config().use_task_queries is False

    def test_round_trip_through_yaml(self, tmp_path):
        cfg = RunConfig.preset("toy-4-2")
        path = tmp_path / "c.yaml"
        path.write_text(cfg.dump())
        assert RunConfig.load(str(path)).tree == cfg.tree

    def test_unknown_field_is_named(self):
        with pytest.raises(ConfigError, match="train.bogus"):
            RunConfig.from_tree({"train": {"bogus": 1}})

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("name: x\ntrain:\n  lr: [1e-4\n")
        with pytest.raises(ConfigError, match="line"):
            RunConfig.load(str(path))

    def test_schema_version_checked(self):
        with pytest.raises(ConfigError):
            RunConfig.from_tree({"schema_version": 2})

    def test_unknown_toggle(self):
        with pytest.raises(ConfigError):
            RunConfig().with_toggles({"feature_kd": "off"})
        assert RunConfig().with_toggles({"aux": "off"}).tree["loss"]["enabled"]["aux"] is False

    def test_step_one_key_ignores_kd_only_changes(self):
        a = RunConfig.preset("toy-4-1")
        assert a.step_one_key() == a.with_toggles({"os_kd": "off"}).step_one_key()
        assert a.step_one_key() == RunConfig.preset("finetune-baseline").step_one_key()
        assert a.step_one_key() != a.override({"loss": {"focal": False}}).step_one_key()

    def test_finetune_drops_teacher_only_options(self):
        loss = RunConfig.preset("finetune-baseline").tree["loss"]
        assert not loss["old_negatives"] and loss["matching"]["teacher_guard"] == 0.0
        assert loss["matching"]["objectness_weight"] == RunConfig.preset("toy-4-1").tree["loss"]["matching"]["objectness_weight"]
        with pytest.raises(ConfigError):
            RunConfig.preset("toy-4-1").override({"loss": {"cls_scope": "all"}}).objective()

    def test_output_root_env(self, monkeypatch):
        monkeypatch.setenv("MTRSEG_OUT", "/tmp/somewhere")
        assert RunConfig.preset("toy-4-1").out_dir() == "/tmp/somewhere/toy-4-1"

    def test_matrices(self, tmp_path, caplog):
        assert len(load_matrix("objectness")) == 4
        assert set(MATRICES) >= {"objectness", "class-kd", "components", "forgetting"}
        path = tmp_path / "m.yaml"
        path.write_text(yaml.safe_dump([{"name": "a", "toggles": {"aux": "off"}},
                                        {"name": "b", "toggles": {"aux": "off"}}]))
        with caplog.at_level(logging.WARNING):
            rows = load_matrix(str(path))
        assert [r["name"] for r in rows] == ["a"] and "duplicates" in caplog.text


class TestCommands:
    def test_generate_is_deterministic(self, tiny_config, tmp_path, capsys):
        assert main(["generate", "--config", tiny_config, "--out", str(tmp_path / "a")]) == 0
        assert main(["generate", "--config", tiny_config, "--out", str(tmp_path / "b")]) == 0
        ma, mb = _read(tmp_path / "a" / "manifest.json"), _read(tmp_path / "b" / "manifest.json")
        assert ma == mb and json.loads(ma)["classes"] == [0, 1, 2, 3]

    def test_generate_with_preset_lists_eight_classes(self, tmp_path, capsys):
        tree = dict(PRESETS["toy-4-1"])
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({**tree, "data": {"samples_train": 16, "samples_eval": 8}}))
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
        assert json.loads(capsys.readouterr().out)["classes"] == list(range(8))

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("data: {num_classes: 0}\n")
        assert main(["generate", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
        assert main(["run", "--config", str(path), "--toggle", "nope=on"]) == 2

    def test_unwritable_output(self, tiny_config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["generate", "--config", tiny_config, "--out", str(blocker / "sub")]) == 4

    def test_run_layout_eval_replay_and_report(self, tiny_config, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["run", "--config", tiny_config, "--out", str(run)]) == 0
        names = set(os.listdir(run))
        assert {"config.yaml", "train_log.jsonl", "metrics.json", "metrics.csv", "step_1.ckpt", "step_3.ckpt"} <= names
        metrics = json.loads(_read(run / "metrics.json"))
        assert [s["step"] for s in metrics["steps"]] == [1, 2, 3]
        assert _read(run / "metrics.csv").splitlines()[0] == "step,base,inc,all,avg"
        capsys.readouterr()
        assert main(["eval", str(run), "--json", "--check"]) == 0
        assert json.loads(capsys.readouterr().out) == metrics
        assert main(["eval", str(run / "step_2.ckpt"), "--json"]) == 0
        step2 = json.loads(capsys.readouterr().out)["final"]
        assert set(map(int, step2["per_class_iou"])) <= {0, 1, 2}
        assert main(["report", str(run)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("step,base,inc,all,avg")
        assert {"miou_per_step.png", "per_class_iou.png", "losses.png"} <= set(os.listdir(run))

    def test_finetune_baseline_logs_zero_kd(self, tiny_config, tmp_path):
        run = tmp_path / "ft"
        assert main(["run", "--config", tiny_config, "--baseline", "finetune", "--out", str(run)]) == 0
        records = [json.loads(l) for l in _read(run / "train_log.jsonl").splitlines()]
        for r in records:
            assert all(r[k] == 0.0 for k in ("os_kd", "mask_kd", "pe_kd", "cls_kd_u", "cls_kd_m", "aux"))

    def test_resume_matches_uninterrupted(self, tiny_config, tmp_path):
        assert main(["run", "--config", tiny_config, "--out", str(tmp_path / "full")]) == 0
        assert main(["run", "--config", tiny_config, "--out", str(tmp_path / "part"), "--stop-after", "2"]) == 0
        assert main(["run", "--resume", str(tmp_path / "part")]) == 0
        assert _read(tmp_path / "full" / "metrics.json") == _read(tmp_path / "part" / "metrics.json")

    def test_eval_schedule_mismatch(self, tiny_config, tmp_path):
        run = tmp_path / "run"
        assert main(["run", "--config", tiny_config, "--out", str(run), "--stop-after", "1"]) == 0
        other = tmp_path / "other.yaml"
        other.write_text(yaml.safe_dump({**TINY, "schedule": {"base": 2, "increment": 2}}))
        assert main(["eval", str(run / "step_1.ckpt"), "--config", str(other)]) == 5

    def test_ablate_rows_and_empty_matrix(self, tiny_config, tmp_path, capsys):
        matrix = tmp_path / "m.yaml"
        matrix.write_text(yaml.safe_dump([
            {"name": "full"},
            {"name": "no-os", "toggles": {"os_kd": "off"}},
            {"name": "dup", "toggles": {"os_kd": "off"}},
        ]))
        out = tmp_path / "abl"
        assert main(["ablate", "--config", tiny_config, "--matrix", str(matrix), "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out / "ablation.csv")))
        assert [r["name"] for r in rows] == ["full", "no-os"]
        # the second row reused the first row's step-1 model
        assert _read(out / "full" / "step_1.ckpt") == _read(out / "no-os" / "step_1.ckpt")
        assert json.loads(_read(out / "full" / "metrics.json"))["steps"][0] == json.loads(_read(out / "no-os" / "metrics.json"))["steps"][0]
        assert main(["report", str(out)]) == 0
        assert os.path.exists(out / "ablation.png")

        empty = tmp_path / "empty.yaml"
        empty.write_text("[]\n")
        capsys.readouterr()
        assert main(["ablate", "--config", tiny_config, "--matrix", str(empty), "--out", str(tmp_path / "e")]) == 0
        assert capsys.readouterr().out == "name,base,inc,all,avg\n"
