import json
from pathlib import Path

import numpy as np
import pytest

from mtmpc.bench import cli
from mtmpc.bench.artifacts import ModelArtifact
from mtmpc.bench.closedloop import cost_regret, offset_artifact, run_cell, run_closed_loop
from mtmpc.bench.config import (Baseline, builtin_study, builtin_study_dict, load_study, resolve_study,
                                study_from_dict)
from mtmpc.bench.pipeline import collect_study, train_study
from mtmpc.bench.report import final_window_stats, run_benchmark, summarize
from mtmpc.errors import ConfigurationError, InvalidArgumentError
from mtmpc.features import FeatureModel

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FAST_OPT = {"iterations": 40, "restarts": 1}


def tiny_study(**overrides):
    d = builtin_study_dict("sinusoid_study")
    d.update({"duration": 2.0, "n_seeds": 2, "train_tasks": ["task1", "task2"], "eval_tasks": ["task1"],
              "baselines": ["Nominal", "GroundTruth", "OffsetCompensation", "MultiTask"],
              "optimizer": dict(FAST_OPT, init_scale=2.0), "horizon": 0.5})
    d.update(overrides)
    return d


class TestBaseline:
    def test_parse_and_label(self):
        b = Baseline.parse("SingleTask:task1")
        assert (b.kind, b.task_id, b.label, b.spec) == ("SingleTask", "task1", "SingleTask(task1)",
                                                        "SingleTask:task1")
        assert b.adaptive and b.artifact_name == "single_task1"
        assert not Baseline.parse("GroundTruth").adaptive

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            Baseline.parse("Oracle")
        with pytest.raises(ConfigurationError):
            Baseline.parse("SingleTask")


class TestConfig:
    @pytest.mark.parametrize("name", ["sinusoid_study", "sinexp_study", "door_study"])
    def test_config_files_match_builtins(self, name):
        assert load_study(CONFIGS / f"{name}.json").to_dict() == builtin_study(name).to_dict()
        assert resolve_study(name).to_dict() == builtin_study(name).to_dict()

    def test_field_precise_errors(self):
        d = builtin_study_dict("sinusoid_study")
        d["baselines"][2] = "Oracle"
        with pytest.raises(ConfigurationError, match=r"baselines\[2\]"):
            study_from_dict(d)
        d = builtin_study_dict("sinusoid_study")
        d["dt"] = -1
        with pytest.raises(ConfigurationError, match="dt"):
            study_from_dict(d)
        d = builtin_study_dict("sinusoid_study")
        d["eval_tasks"] = ["task9"]
        with pytest.raises(ConfigurationError, match="task9"):
            study_from_dict(d)

    def test_json_error_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"name": "x",\n  "dt": }\n')
        with pytest.raises(ConfigurationError, match="line 2"):
            load_study(p)

    def test_horizon_steps(self):
        study = builtin_study("sinusoid_study")
        assert round(study.horizon / study.dt) == 75

    def test_digest_tracks_training_fields_only(self):
        a = builtin_study("sinusoid_study")
        assert a.training_digest() == builtin_study("sinusoid_study", n_seeds=3).training_digest()
        assert a.training_digest() != builtin_study("sinusoid_study", E=4).training_digest()


class TestArtifact:
    def make(self, rng):
        return ModelArtifact(name="multitask", baseline="MultiTask", plant_kind="VerticalLoad", channels=[1],
                             feature=FeatureModel.from_frequencies(rng.normal(size=(3, 1))),
                             log_lambdas=rng.normal(size=6), log_sigma_w=rng.normal(size=2),
                             task_ids=["a", "b"], config_digest="0123456789abcdef", objective=-1.25)

    def test_byte_identical_round_trip(self, rng, tmp_path):
        a = self.make(rng)
        text = a.to_json()
        assert ModelArtifact.from_json(text).to_json() == text
        path = a.save(tmp_path)
        assert ModelArtifact.load(path).to_json() == path.read_text() == text

    def test_schema_mismatch(self, rng):
        d = self.make(rng).to_dict()
        d["schema_version"] = 99
        with pytest.raises(ConfigurationError):
            ModelArtifact.from_dict(d)


class TestClosedLoop:
    def test_ground_truth_equals_nominal_on_zero_residual(self):
        study = study_from_dict(tiny_study(tasks={"name": "sinusoid_study", "amplitude": 0.0},
                                           eval_tasks=["task2"]))
        plant, task = study.build_plant(), study.task("task2")
        gt = run_cell(study, plant, task, Baseline("GroundTruth"), None, [0, 1])
        nom = run_cell(study, plant, task, Baseline("Nominal"), None, [0, 1])
        np.testing.assert_array_equal(gt.inputs, nom.inputs)
        np.testing.assert_array_equal(gt.costs, nom.costs)

    def test_same_seed_bit_identical(self):
        study = study_from_dict(tiny_study())
        plant, task = study.build_plant(), study.task("task1")
        art = offset_artifact(study, plant)
        _, c1 = run_closed_loop(plant, task, Baseline("OffsetCompensation"), art, study, 3)
        _, c2 = run_closed_loop(plant, task, Baseline("OffsetCompensation"), art, study, 3)
        assert np.float64(c1).tobytes() == np.float64(c2).tobytes()

    def test_seed_results_independent_of_batching(self):
        study = study_from_dict(tiny_study())
        plant, task = study.build_plant(), study.task("task1")
        art = offset_artifact(study, plant)
        both = run_cell(study, plant, task, Baseline("OffsetCompensation"), art, [0, 1])
        alone = run_cell(study, plant, task, Baseline("OffsetCompensation"), art, [1])
        np.testing.assert_allclose(both.costs[1], alone.costs[0], rtol=1e-12)

    def test_offset_converges_on_constant_task(self):
        study = study_from_dict(tiny_study(duration=8.0))
        plant, task = study.build_plant(), study.task("task1")
        batch = run_cell(study, plant, task, Baseline("OffsetCompensation"), offset_artifact(study, plant),
                         [0, 1, 2])
        K = batch.adapter_mean.shape[1]
        second_half = batch.adapter_mean[:, K // 2:, 0]
        assert np.all(np.abs(second_half + 1.6) <= 0.05 * 1.6)
        assert not batch.failed.any()

    def test_missing_artifact(self):
        study = study_from_dict(tiny_study())
        with pytest.raises(ConfigurationError, match="mtmpc train"):
            run_cell(study, study.build_plant(), study.task("task1"), Baseline("MultiTask"), None, [0])

    def test_cost_regret(self):
        assert cost_regret(10.0, 10.0) == 0.0
        assert cost_regret(10.5, 10.0) == 0.5
        with pytest.raises(InvalidArgumentError):
            cost_regret(float("nan"), 1.0)


class TestReport:
    def test_single_seed_quantiles(self):
        rows = [{"baseline": "B", "task": "t", "seed": 0, "cost": 3.0, "regret": 0.7, "failed": False}]
        (c,) = summarize(rows, [("B", "t")])
        assert c.median == c.q25 == c.q75 == 0.7

    def test_failed_seeds_excluded_and_counted(self):
        rows = [{"baseline": "B", "task": "t", "seed": i, "cost": 1.0, "regret": float(i), "failed": i == 0}
                for i in range(3)]
        (c,) = summarize(rows, [("B", "t")])
        assert (c.n_attempted, c.n_succeeded, c.n_failed, c.median) == (3, 2, 1, 1.5)

    def test_ground_truth_only_study(self, tmp_path):
        study = study_from_dict(tiny_study(baselines=["GroundTruth"], eval_tasks=["task1", "task2"]))
        report = run_benchmark(study, out_dir=tmp_path)
        assert all(r["regret"] == 0.0 for r in report.rows)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert "25%" in summary["quantiles"] and len(summary["cells"]) == 2

    def test_final_window_stats(self):
        t = np.linspace(0, 1, 300)
        settled = np.stack([1 - np.exp(-20 * t), 2 * (1 - np.exp(-20 * t))], -1)[None]
        drifting = np.stack([t], -1)[None]
        d_s, s_s = final_window_stats(settled)
        d_d, s_d = final_window_stats(drifting)
        assert s_s[0] < 0.01 and d_d[0] > 100 * d_s[0]
        np.testing.assert_allclose(s_d[0], np.std(t[200:]), rtol=1e-2)

    def test_sinusoid_report_structure(self, tmp_path):
        d = tiny_study(eval_tasks=["task1", "task2", "task3", "task4"], n_seeds=1, duration=1.0,
                       train_tasks=["task1", "task2", "task3"],
                       baselines=builtin_study_dict("sinusoid_study")["baselines"])
        study = study_from_dict(d)
        report = run_benchmark(study, train=True, out_dir=tmp_path)
        non_gt = [c for c in report.summary if c.baseline != "GroundTruth"]
        assert len(non_gt) == 4 * 6
        assert {c.task for c in non_gt} == {"task1", "task2", "task3", "task4"}
        header = (tmp_path / "results.csv").read_text().splitlines()[0]
        assert header == "study,baseline,task,seed,cost,regret,failed"
        for name in ("adapter_traces.csv", "diagnostics.csv"):
            assert (tmp_path / name).exists()


class TestCli:
    @pytest.fixture
    def config(self, tmp_path):
        path = tmp_path / "tiny.json"
        path.write_text(json.dumps(tiny_study(out=str(tmp_path / "out"))))
        return path

    def test_usage_errors_exit_1(self, capsys):
        assert cli.main([]) == 1
        assert cli.main(["report"]) == 1
        assert cli.main(["report", "--config", "no_such_study"]) == 1

    def test_gradcheck_exit_0(self, capsys):
        assert cli.main(["gradcheck", "--seed", "1"]) == 0
        assert "max relative gradient error" in capsys.readouterr().out

    def test_report_without_models_names_train(self, config, capsys):
        assert cli.main(["report", "--config", str(config)]) == 1
        assert "mtmpc train" in capsys.readouterr().err

    def test_pipeline(self, config, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["collect", "--config", str(config)]) == 0
        assert (out / "datasets.json").exists()
        assert cli.main(["train", "--config", str(config)]) == 0
        first = (out / "models" / "multitask.json").read_bytes()
        assert cli.main(["train", "--config", str(config)]) == 0
        assert (out / "models" / "multitask.json").read_bytes() == first
        assert cli.main(["report", "--config", str(config), "--seeds", "2"]) == 0
        assert (out / "results.csv").exists() and (out / "summary.json").exists()
        assert cli.main(["run", "--config", str(config), "--baseline", "MultiTask", "--every", "50"]) == 0
        assert list(out.glob("run_MultiTask_task1_0.csv"))
        assert cli.main(["run", "--config", str(config), "--baseline", "Oracle"]) == 1

    def test_collect_then_train_matches_library(self, tmp_path):
        study = study_from_dict(tiny_study())
        arts = train_study(study, collect_study(study))
        arts2 = train_study(study)
        assert arts["multitask"].to_json() == arts2["multitask"].to_json()
