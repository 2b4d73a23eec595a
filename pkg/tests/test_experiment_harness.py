import json
import threading

import numpy as np
import pandas as pd
import pytest

import experiment_harness
from experiment_harness import (
    ExperimentSpec,
    MetricsFrame,
    load_config,
    load_metrics,
    moving_average,
    run_experiment,
    run_trial,
    trial_seeds,
)
from simulation_errors import ConfigurationError, NumericError, OutputError
from tests.helpers import small_scenario


def small_spec(out_dir, algorithms=("masc", "full", "fp"), **overrides):
    scenario = small_scenario(train_slots=20, test_slots=5)
    settings = dict(scenario=scenario, algorithms=list(algorithms), seeds=[5, 6], output_dir=out_dir, window=4)
    settings.update(overrides)
    return ExperimentSpec(**settings)


def test_moving_average_examples():
    np.testing.assert_allclose(moving_average([3.0] * 10, 4), [3.0] * 10)
    np.testing.assert_array_equal(moving_average([1.0, 5.0, 2.0], 1), [1.0, 5.0, 2.0])
    np.testing.assert_allclose(moving_average([2.0, 4.0, 6.0, 8.0], 3), [2.0, 3.0, 4.0, 6.0])
    assert moving_average(np.arange(400), 200)[399] == pytest.approx(299.5)
    with pytest.raises(ConfigurationError):
        moving_average([1.0], 0)


def test_trial_seeds_extend_without_changing_earlier_trials():
    assert trial_seeds(10, 3) == [10, 11, 12]
    assert trial_seeds(10, 5)[:3] == trial_seeds(10, 3)


def test_load_config_from_preset():
    spec = load_config("two-layer")
    assert spec.scenario.num_aps == 5
    assert spec.seeds == list(range(10))
    assert spec.algorithms == ["masc", "wmmse", "fp", "full", "random"]
    spec = load_config("two-layer", seed=7, trials=3, algorithms=["fp"])
    assert spec.seeds == [7, 8, 9]
    assert spec.scenario.trials == 3


def test_load_config_rejects_oracle_on_large_scenarios():
    with pytest.raises(ConfigurationError, match="at most 4 APs"):
        load_config("three-layer", algorithms=["oracle"])


def test_load_config_from_yaml(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "experiment:\n"
        "  algorithms: [wmmse, full]\n"
        "  seeds: [3, 9]\n"
        "  window: 50\n"
        "scenario:\n"
        "  preset: two-layer\n"
        "  train_slots: 100\n"
    )
    spec = load_config(path, output_dir=tmp_path / "out")
    assert spec.algorithms == ["wmmse", "full"]
    assert spec.seeds == [3, 9]
    assert spec.window == 50
    assert spec.scenario.train_slots == 100
    assert spec.output_dir == tmp_path / "out"


@pytest.mark.parametrize("body, fragment", [
    ("scenario:\n  preset: two-layer\n  T_d: -5\n", "scenario.T_d"),
    ("scenario:\n  preset: two-layer\nextra: 1\n", "Unknown top-level keys"),
    ("experiment:\n  algorithms: [masc, masc]\nscenario:\n  preset: two-layer\n", "experiment"),
    ("experiment:\n  algorithms: [dqn]\nscenario:\n  preset: two-layer\n", "experiment.algorithms"),
])
def test_load_config_errors(tmp_path, body, fragment):
    path = tmp_path / "bad.yaml"
    path.write_text(body)
    with pytest.raises(ConfigurationError, match=fragment):
        load_config(path)


def test_metrics_frame_aggregates():
    trials = [
        pd.DataFrame({"slot": [1, 2, 3], "stage": ["train", "train", "test"], "fp": [1.0, 3.0, 5.0]}),
        pd.DataFrame({"slot": [1, 2, 3], "stage": ["train", "train", "test"], "fp": [3.0, 5.0, 9.0]}),
    ]
    metrics = MetricsFrame(algorithms=["fp"], trials=trials, window=1)
    aggregate = metrics.aggregate()
    np.testing.assert_allclose(aggregate["fp_mean"], [2.0, 4.0, 7.0])
    np.testing.assert_allclose(aggregate["fp_std"], [1.0, 1.0, 2.0])
    summary = metrics.summary().set_index("stage")
    assert summary.loc["train", "mean_sum_rate"] == pytest.approx(4.0)
    assert summary.loc["test", "mean_sum_rate"] == pytest.approx(7.0)
    assert list(metrics.moving_averages("test")["slot"]) == [3]


def test_algorithms_share_channel_realizations(tmp_path):
    spec = small_spec(tmp_path)
    result = run_trial(spec, 0)
    masc, full = result.records["masc"], result.records["full"]
    assert [r.slot for r in masc] == [r.slot for r in full] == list(range(1, 26))
    for a, b in zip(masc, full):
        np.testing.assert_allclose(a.gains.g, b.gains.g, rtol=1e-12)
    assert list(result.frame.columns) == ["slot", "stage", "masc", "full", "fp"]
    assert (result.frame["stage"] == "test").sum() == 5
    assert result.diagnostics["first_update_slot"] == 7


def test_adding_an_algorithm_keeps_the_others(tmp_path):
    alone = run_trial(small_spec(tmp_path, algorithms=("full",)), 1)
    together = run_trial(small_spec(tmp_path, algorithms=("random", "full")), 1)
    np.testing.assert_array_equal(alone.frame["full"], together.frame["full"])


def test_run_experiment_writes_outputs(tmp_path):
    out = tmp_path / "run"
    progress = []
    metrics = run_experiment(small_spec(out), on_trial_done=lambda done, total: progress.append((done, total)))
    assert progress[-1] == (2, 2)
    for name in ("trial_00.csv", "trial_01.csv", "aggregate.csv", "plot_train.csv", "plot_test.csv",
                 "summary.csv", "timings.json", "manifest.json"):
        assert (out / name).is_file()
    assert (out / "records" / "trial_01_masc_training_log.csv").is_file()
    assert pd.read_csv(out / "records" / "trial_00_fp.csv").columns[0] == "slot"

    summary = pd.read_csv(out / "summary.csv")
    assert len(summary) == 3 * 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["trial_seeds"] == [5, 6]
    assert "summary.csv" in manifest["files"]

    stacked = metrics.stacked()
    aggregate = pd.read_csv(out / "aggregate.csv")
    expected = stacked.groupby("slot")["fp"].mean().to_numpy()
    np.testing.assert_allclose(aggregate["fp_mean"], expected, rtol=1e-12)


def test_rerun_is_byte_identical(tmp_path):
    run_experiment(small_spec(tmp_path / "a"))
    run_experiment(small_spec(tmp_path / "b", max_workers=2))
    for name in ("trial_00.csv", "trial_01.csv", "aggregate.csv", "summary.csv", "plot_train.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_metrics_rebuilds_frame(tmp_path):
    out = tmp_path / "run"
    original = run_experiment(small_spec(out, algorithms=("full", "random")))
    restored = load_metrics(out)
    assert restored.algorithms == ["full", "random"]
    assert restored.window == 4
    pd.testing.assert_frame_equal(restored.summary(), original.summary(), check_exact=False, rtol=1e-12)
    with pytest.raises(OutputError):
        load_metrics(tmp_path / "empty")


def test_trial_failure_names_the_trial(tmp_path, monkeypatch):
    def failing(spec, index, on_progress=None):
        raise NumericError("critic diverged")

    monkeypatch.setattr(experiment_harness, "run_trial", failing)
    with pytest.raises(NumericError, match=r"trial 0 \(seed 5\): critic diverged"):
        run_experiment(small_spec(tmp_path))


@pytest.mark.parametrize("workers", [1, 2])
def test_progress_callback_runs_on_calling_thread(tmp_path, workers):
    seen = []

    def on_trial_done(done, total):
        seen.append((done, total, threading.current_thread()))

    run_experiment(small_spec(tmp_path, algorithms=("full", "random"), max_workers=workers),
                   on_trial_done=on_trial_done)
    assert [(done, total) for done, total, _ in seen] == [(1, 2), (2, 2)]
    assert all(thread is threading.main_thread() for _, _, thread in seen)


def test_experience_log_is_written_when_enabled(tmp_path):
    out = tmp_path / "run"
    run_experiment(small_spec(out, algorithms=("masc",), experience_log=True))
    log = pd.read_csv(out / "records" / "trial_00_masc_experiences.csv")
    # experiences assemble T_d slots after they happen
    assert list(log["slot"]) == list(range(1, 20 - 3 + 1))
    assert {"a_1", "a_2", "R", "s_1_p_prev"} <= set(log.columns)
    manifest = json.loads((out / "manifest.json").read_text())
    assert "records/trial_01_masc_experiences.csv" in manifest["files"]

    run_experiment(small_spec(tmp_path / "plain", algorithms=("masc",)))
    assert not (tmp_path / "plain" / "records" / "trial_00_masc_experiences.csv").exists()
