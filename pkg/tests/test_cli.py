import json

import pytest

from widin.cli import ExperimentConfig, format_defaults, main, parse_config
from widin.errors import ConfigError, MissingArtifact
from widin.evaluation import canonical_json

SMALL = [
    "--set", "world.num_classes=4",
    "--set", "world.d=16",
    "--set", "world.d_v=20",
    "--set", "data.n_train=8",
    "--set", "data.n_test=4",
    "--set", "train.epochs=2",
    "--set", "train.probe_epochs=2",
    "--set", "train.batch=16",
]  # fmt: skip


def metrics(path):
    data = json.loads(path.read_text())
    data.pop("timestamp")
    return canonical_json(data)


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        f = tmp_path / "empty.cfg"
        f.write_text("")
        cfg = parse_config(f, env={})
        assert cfg == ExperimentConfig()
        assert cfg.train_config().tau == 0.07 and cfg.train_config().batch == 64

    def test_file_and_overrides(self, tmp_path):
        f = tmp_path / "a.cfg"
        f.write_text("# comment\ntrain.k = 2.5\nworld.num_classes=6\nablation.ks = 1,2\nablation.schedules = P,DC;PD,C\n")
        cfg = parse_config(f, ["train.k=3", "seed=11"], env={})
        assert cfg.train.k == 3.0 and cfg.world.num_classes == 6 and cfg.seed == 11
        assert cfg.ablation.ks == (1.0, 2.0) and cfg.ablation.schedules == ("P,DC", "PD,C")
        assert cfg.world_spec().seed == 11 and cfg.train_config().seed == 11

    def test_env_seed_wins(self):
        assert parse_config(None, ["seed=3"], env={"WIDIN_SEED": "17"}).seed == 17

    def test_defaults_round_trip(self, tmp_path):
        f = tmp_path / "d.cfg"
        f.write_text(format_defaults())
        assert parse_config(f, env={}) == ExperimentConfig()

    @pytest.mark.parametrize(
        "item,key",
        [
            ("train.bogus=1", "train.bogus"),
            ("train.tau=abc", "train.tau"),
            ("train.batch=1.5", "train.batch"),
            ("train.tau=-1", "train.tau"),
            ("train.schedule=X", "train.schedule"),
            ("world.d=9", "world.d"),
            ("longtail.few=80", "longtail.few"),
            ("train.k=nan", "train.k"),
            ("seed=-2", "seed"),
        ],
    )
    def test_bad_values_name_key(self, item, key):
        with pytest.raises(ConfigError) as info:
            parse_config(None, [item], env={})
        assert info.value.key == key

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifact):
            parse_config(tmp_path / "nope.cfg", env={})


class TestMain:
    def test_defaults_command(self, capsys):
        assert main(["defaults"]) == 0
        assert "train.tau = 0.07" in capsys.readouterr().out

    def test_config_error_exit(self, tmp_path):
        assert main(["gen-world", "--out", str(tmp_path), "--set", "train.tau=0"]) == 2

    def test_missing_artifact_exit(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 3

    def test_corrupt_artifact_exit(self, tmp_path):
        out = tmp_path / "run"
        assert main(["gen-world", "--out", str(out), *SMALL]) == 0
        (out / "world.widn").write_bytes(b"garbage")
        assert main(["train", "--out", str(out), *SMALL]) == 11

    def test_pipeline_and_determinism(self, tmp_path):
        runs = [tmp_path / "a", tmp_path / "b"]
        for out in runs:
            for command in ("gen-world", "train", "eval", "probe-domain"):
                assert main([command, "--out", str(out), *SMALL]) == 0, command
        for command in ("gen-world", "train", "eval", "probe-domain"):
            a, b = (metrics(out / f"metrics_{command}.json") for out in runs)
            assert a == b
        report = json.loads((runs[0] / "metrics_eval.json").read_text())
        assert [arm["arm"] for arm in report["arms"]] == ["linear-probe", "mlp-probe", "zero-shot", "zero-shot*", "worded-zero-shot"]
        assert (runs[0] / "checkpoint.widn").exists() and (runs[0] / "metrics_eval.csv").exists()

    def test_seed_changes_metrics(self, tmp_path, monkeypatch):
        assert main(["gen-world", "--out", str(tmp_path / "a"), *SMALL]) == 0
        monkeypatch.setenv("WIDIN_SEED", "9")
        assert main(["gen-world", "--out", str(tmp_path / "b"), *SMALL]) == 0
        a, b = (metrics(tmp_path / d / "metrics_gen-world.json") for d in "ab")
        assert a != b

    def test_checkpoint_from_other_world(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, seed in ((a, "1"), (b, "2")):
            assert main(["gen-world", "--out", str(out), "--set", f"seed={seed}", *SMALL]) == 0
        assert main(["train", "--out", str(a), "--set", "seed=1", *SMALL]) == 0
        (b / "checkpoint.widn").write_bytes((a / "checkpoint.widn").read_bytes())
        assert main(["eval", "--out", str(b), "--set", "seed=2", *SMALL]) == 15

    def test_ablation_and_bridge_commands(self, tmp_path):
        out = str(tmp_path)
        assert main(["gen-world", "--out", out, *SMALL]) == 0
        assert main(["ablate-schedule", "--out", out, *SMALL, "--set", "ablation.schedules=P,DC;PD,C"]) == 0
        arms = json.loads((tmp_path / "metrics_ablate-schedule.json").read_text())["arms"]
        assert [a["arm"] for a in arms] == ["P,DC", "PD,C"]
        assert main(["bridge", "--out", out, *SMALL]) == 0
        bridge = json.loads((tmp_path / "metrics_bridge.json").read_text())
        assert "avg_ratio" in bridge["extra"] and (tmp_path / "checkpoint_bridge.widn").exists()

    def test_longtail_command(self, tmp_path):
        args = ["longtail", "--out", str(tmp_path), *SMALL, "--set", "longtail.num_classes=5", "--set", "longtail.n_max=20"]
        assert main(args) == 0
        report = json.loads((tmp_path / "metrics_longtail.json").read_text())
        assert report["extra"]["train_counts"][0] == 20
        assert set(report["longtail"]) == {"widin_margins", "linear_probe"}

    def test_gradcheck_command(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "metrics_gradcheck.json").read_text())
        assert report["extra"]["passed"] and report["extra"]["max_error"] < 1e-6
