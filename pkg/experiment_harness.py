import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
import pydantic
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from channel_model import ChannelSimulator
from experience_replay import GlobalExperience, write_experience_log
from masc_trainer import run_testing, run_training
from network_environment import SlotRecord, write_records_csv
from power_baselines import evaluate_baseline, solver_timing
from scenario_config import (
    PRESETS,
    ScenarioConfig,
    format_validation_error,
    load_yaml,
    scenario_from_mapping,
    validate_scenario,
)
from simulation_errors import ConfigurationError, OutputError, SimulationError

logger = logging.getLogger(__name__)

Algorithm = Literal["masc", "wmmse", "fp", "full", "random", "oracle"]
ALGORITHMS = ("masc", "wmmse", "fp", "full", "random", "oracle")
STAGES = ("train", "test")
FLOAT_FORMAT = "%.17g"
TIMING_SAMPLE_SLOTS = 20


class ExperimentSpec(BaseModel):
    """One experiment: a scenario, the algorithms to compare and the trial seeds."""
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioConfig
    algorithms: List[Algorithm] = Field(default_factory=lambda: list(ALGORITHMS[:-1]), min_length=1)
    seeds: List[int] = Field(min_length=1)
    output_dir: Path = Path("results")
    window: int = Field(200, ge=1)
    max_workers: int = Field(1, ge=1)
    experience_log: bool = False

    @field_validator("algorithms")
    @classmethod
    def _unique_algorithms(cls, value: List[str]) -> List[str]:
        if len(set(value)) != len(value):
            raise ValueError("algorithms must not repeat")
        return value


def trial_seeds(master_seed: int, trials: int) -> List[int]:
    """Trial i uses master_seed + i, so adding trials never changes earlier ones."""
    return [master_seed + i for i in range(trials)]


def load_config(source: Union[str, Path], seed: Optional[int] = None, trials: Optional[int] = None,
                output_dir: Optional[Union[str, Path]] = None,
                algorithms: Optional[Sequence[str]] = None) -> ExperimentSpec:
    """
    Build an experiment from a preset name or a YAML file.

    The YAML file has an `experiment:` section (algorithms, seed or seeds,
    output_dir, window, max_workers) and a `scenario:` section (optional
    `preset` plus overrides). Keyword arguments override both.

    Args:
        source: Preset name ("two-layer", "three-layer") or path to a YAML file
        seed: Master seed; trial seeds are seed, seed + 1, ...
        trials: Number of trials, overriding scenario.trials
        output_dir: Output directory
        algorithms: Algorithms to run

    Returns:
        Validated ExperimentSpec
    """
    if str(source) in PRESETS:
        raw: Dict[str, Any] = {"scenario": {"preset": str(source)}}
    else:
        raw = load_yaml(source)

    unknown = set(raw) - {"experiment", "scenario"}
    if unknown:
        raise ConfigurationError(f"Unknown top-level keys: {', '.join(sorted(unknown))}")

    scenario_data = dict(raw.get("scenario") or {})
    if trials is not None:
        scenario_data["trials"] = trials
    scenario = scenario_from_mapping(scenario_data)

    experiment = dict(raw.get("experiment") or {})
    master_seed = experiment.pop("seed", 0) if seed is None else seed
    experiment.pop("seed", None)
    if "seeds" not in experiment or seed is not None or trials is not None:
        experiment["seeds"] = trial_seeds(int(master_seed), scenario.trials)
    if output_dir is not None:
        experiment["output_dir"] = output_dir
    if algorithms is not None:
        experiment["algorithms"] = list(algorithms)

    try:
        spec = ExperimentSpec.model_validate({**experiment, "scenario": scenario})
    except ValidationError as e:
        raise ConfigurationError(format_validation_error(e, "experiment")) from e

    report = validate_scenario(spec.scenario, spec.algorithms)
    for warning in report['warnings']:
        logger.warning(warning)
    if not report['valid']:
        raise ConfigurationError("; ".join(report['errors']))
    logger.info(
        f"Loaded experiment: scenario {spec.scenario.name}, {spec.scenario.num_aps} APs, "
        f"algorithms {spec.algorithms}, {len(spec.seeds)} trials"
    )
    return spec


def moving_average(series, window: int) -> np.ndarray:
    """out[t] = mean(series[max(0, t - window + 1) .. t])."""
    if window < 1:
        raise ConfigurationError(f"Moving-average window must be >= 1, got {window}")
    values = pd.Series(np.asarray(series, dtype=float))
    return values.rolling(window=window, min_periods=1).mean().to_numpy()


@dataclass
class TrialResult:
    """Per-slot sum-rates and full records of one trial."""
    index: int
    seed: int
    frame: pd.DataFrame
    records: Dict[str, List[SlotRecord]] = field(default_factory=dict)
    training_log: Optional[pd.DataFrame] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    experiences: Optional[List[GlobalExperience]] = None


@dataclass
class MetricsFrame:
    """
    Sum-rate per slot, algorithm and trial, with cross-trial aggregates.

    Each trial frame has columns slot, stage and one column per algorithm
    (sum-rate in bps).
    """
    algorithms: List[str]
    trials: List[pd.DataFrame]
    window: int = 200

    def stacked(self) -> pd.DataFrame:
        frames = [frame.assign(trial=i) for i, frame in enumerate(self.trials)]
        return pd.concat(frames, ignore_index=True)

    def aggregate(self) -> pd.DataFrame:
        """Cross-trial mean and standard deviation per slot."""
        grouped = self.stacked().groupby(["slot", "stage"], sort=False)[self.algorithms]
        mean = grouped.mean().add_suffix("_mean")
        std = grouped.std(ddof=0).add_suffix("_std")
        result = pd.concat([mean, std], axis=1).reset_index()
        return result.sort_values("slot", kind="stable").reset_index(drop=True)

    def moving_averages(self, stage: str) -> pd.DataFrame:
        """Cross-trial mean of each algorithm, smoothed over the window, within one stage."""
        aggregate = self.aggregate()
        subset = aggregate[aggregate["stage"] == stage]
        out = pd.DataFrame({"slot": subset["slot"].to_numpy()})
        for algorithm in self.algorithms:
            out[algorithm] = moving_average(subset[f"{algorithm}_mean"].to_numpy(), self.window)
        return out

    def summary(self) -> pd.DataFrame:
        """
        One row per algorithm and stage.

        The training value is the mean over the last window of the stage,
        where the policy has settled; the test value averages the whole stage.
        """
        rows = []
        stacked = self.stacked()
        for algorithm in self.algorithms:
            for stage in STAGES:
                per_trial = []
                for _, frame in stacked[stacked["stage"] == stage].groupby("trial", sort=True):
                    values = frame[algorithm].to_numpy()
                    if stage == "train":
                        values = values[-self.window:]
                    if values.size:
                        per_trial.append(float(np.mean(values)))
                rows.append({
                    "algorithm": algorithm,
                    "stage": stage,
                    "mean_sum_rate": float(np.mean(per_trial)) if per_trial else np.nan,
                    "std_sum_rate": float(np.std(per_trial)) if per_trial else np.nan,
                    "trials": len(per_trial),
                })
        return pd.DataFrame(rows)


def _records_column(records: Sequence[SlotRecord]) -> pd.Series:
    return pd.Series({record.slot: record.sum_rate for record in records}, dtype=float)


def run_trial(spec: ExperimentSpec, index: int,
              on_progress: Optional[Callable[[str], None]] = None) -> TrialResult:
    """
    Run every requested algorithm on one trial's channel realization.

    All algorithms see the same gain sequence: slot t uses trace[t] for
    t = 0 .. train_slots + test_slots + 1.
    """
    config = spec.scenario
    seed = spec.seeds[index]
    channel_seq, masc_seq, random_seq = np.random.SeedSequence(seed).spawn(3)
    channel = ChannelSimulator(config, np.random.default_rng(channel_seq))
    trace = channel.generate_trace(config.train_slots + config.test_slots + 2)
    train_gains = trace[1:config.train_slots + 1]
    test_gains = trace[config.train_slots + 1:config.train_slots + config.test_slots + 1]

    slots = np.arange(1, config.train_slots + config.test_slots + 1)
    frame = pd.DataFrame({
        "slot": slots,
        "stage": np.where(slots <= config.train_slots, "train", "test"),
    })
    result = TrialResult(index=index, seed=seed, frame=frame)

    for algorithm in spec.algorithms:
        started = time.perf_counter()
        if algorithm == "masc":
            masc_rng = np.random.default_rng(masc_seq)
            training = run_training(config, masc_rng, gains=trace,
                                    checkpoint_dir=spec.output_dir / "checkpoints" / f"trial_{index:02d}",
                                    keep_experiences=spec.experience_log)
            testing = run_testing(
                training.actor_set, config, masc_rng,
                gains=trace[config.train_slots:],
                start_slot=config.train_slots,
                initial_powers=training.final_powers if training.records else None,
            )
            records = training.records + testing
            result.training_log = training.training_log
            if spec.experience_log:
                result.experiences = training.experiences
            result.diagnostics = {
                **training.diagnostics,
                "first_update_slot": training.first_update_slot,
                "replacement_slots": training.replacement_slots,
                "actor_neurons": training.actor_set.neuron_count(),
                "critic_neurons": training.critic_pair.neuron_count(),
            }
            result.timings.update({f"masc_{name}": value for name, value in training.timings.items()})
        else:
            random_rng = np.random.default_rng(random_seq)
            records = (
                evaluate_baseline(algorithm, train_gains, config, random_rng, start_slot=1)
                + evaluate_baseline(algorithm, test_gains, config, random_rng, start_slot=config.train_slots + 1)
            )
            if algorithm in ("wmmse", "fp"):
                result.timings.update(solver_timing(algorithm, trace[:TIMING_SAMPLE_SLOTS], config))
        result.records[algorithm] = records
        frame[algorithm] = frame["slot"].map(_records_column(records)).to_numpy()
        result.timings[f"{algorithm}_total_seconds"] = time.perf_counter() - started
        if on_progress is not None:
            on_progress(algorithm)
        logger.info(f"Trial {index} (seed {seed}): {algorithm} done")
    return result


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise OutputError(f"Could not write {path}: {e}") from e
    return path


def _write_json(data: Dict[str, Any], path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, default=str), encoding="utf-8")
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise OutputError(f"Could not write {path}: {e}") from e
    return path


def write_trial_outputs(result: TrialResult, out_dir: Path) -> List[Path]:
    """Write the per-trial sum-rate table, full records, the MASC training log and any experience log."""
    paths = [_write_csv(result.frame, out_dir / f"trial_{result.index:02d}.csv")]
    for algorithm, records in result.records.items():
        paths.append(write_records_csv(records, out_dir / "records" / f"trial_{result.index:02d}_{algorithm}.csv"))
    if result.training_log is not None:
        paths.append(_write_csv(result.training_log, out_dir / "records" / f"trial_{result.index:02d}_masc_training_log.csv"))
    if result.experiences is not None:
        paths.append(write_experience_log(result.experiences,
                                          out_dir / "records" / f"trial_{result.index:02d}_masc_experiences.csv"))
    return paths


def emit_plot_data(frame: MetricsFrame, out_dir: Union[str, Path]) -> List[Path]:
    """Write moving-average curves per stage and the summary table."""
    out_dir = Path(out_dir)
    paths = []
    for stage in STAGES:
        paths.append(_write_csv(frame.moving_averages(stage), out_dir / f"plot_{stage}.csv"))
    paths.append(_write_csv(frame.summary(), out_dir / "summary.csv"))
    return paths


def build_manifest(spec: ExperimentSpec, files: Sequence[Path]) -> Dict[str, Any]:
    """Everything needed to rerun the experiment exactly."""
    return {
        "experiment": spec.model_dump(mode="json"),
        "trial_seeds": list(spec.seeds),
        "files": sorted(str(Path(p).relative_to(spec.output_dir)) for p in files),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
    }


def run_experiment(spec: ExperimentSpec,
                   on_trial_done: Optional[Callable[[int, int], None]] = None) -> MetricsFrame:
    """
    Run all trials, then write per-trial, aggregate, plot and manifest files.

    Args:
        spec: Validated experiment
        on_trial_done: Called with (finished trials, total trials) as trials complete

    Returns:
        MetricsFrame over all trials, ordered by trial index
    """
    out_dir = spec.output_dir
    total = len(spec.seeds)
    logger.info(f"Running {total} trials with up to {spec.max_workers} workers into {out_dir}")

    by_index: Dict[int, TrialResult] = {}
    with ThreadPoolExecutor(max_workers=spec.max_workers) as pool:
        futures = {pool.submit(run_trial, spec, index): index for index in range(total)}
        # on_trial_done always runs on the calling thread
        for future in as_completed(futures):
            index = futures[future]
            try:
                by_index[index] = future.result()
            except SimulationError as e:
                logger.error(f"Trial {index} (seed {spec.seeds[index]}) failed: {e}")
                for pending in futures:
                    pending.cancel()
                raise type(e)(f"trial {index} (seed {spec.seeds[index]}): {e}") from e
            if on_trial_done is not None:
                on_trial_done(len(by_index), total)
    results = [by_index[index] for index in range(total)]

    files: List[Path] = []
    for result in results:
        files.extend(write_trial_outputs(result, out_dir))
    metrics = MetricsFrame(algorithms=list(spec.algorithms), trials=[r.frame for r in results], window=spec.window)
    files.append(_write_csv(metrics.aggregate(), out_dir / "aggregate.csv"))
    files.extend(emit_plot_data(metrics, out_dir))

    timings = {
        f"trial_{r.index:02d}": {"seed": r.seed, "timings": r.timings, "diagnostics": r.diagnostics}
        for r in results
    }
    _write_json(timings, out_dir / "timings.json")
    manifest_path = out_dir / "manifest.json"
    _write_json(build_manifest(spec, files + [manifest_path]), manifest_path)
    logger.info(f"Experiment finished: {len(files) + 2} files in {out_dir}")
    return metrics


def load_metrics(out_dir: Union[str, Path], window: Optional[int] = None) -> MetricsFrame:
    """Rebuild a MetricsFrame from the trial CSVs of a finished run."""
    out_dir = Path(out_dir)
    paths = sorted(out_dir.glob("trial_*.csv"))
    if not paths:
        raise OutputError(f"No trial CSVs found in {out_dir}")
    trials = [pd.read_csv(path) for path in paths]
    algorithms = [column for column in trials[0].columns if column not in ("slot", "stage")]
    if window is None:
        manifest = out_dir / "manifest.json"
        window = json.loads(manifest.read_text())["experiment"]["window"] if manifest.is_file() else 200
    return MetricsFrame(algorithms=algorithms, trials=trials, window=window)
