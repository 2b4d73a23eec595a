import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from experiment_harness import ALGORITHMS, emit_plot_data, load_config, load_metrics, run_experiment
from scenario_config import PRESETS
from simulation_errors import SimulationError

logger = logging.getLogger(__name__)

COMMAND_ALGORITHMS = {
    "train": ["masc"],
    "baseline": ["wmmse", "fp", "full", "random"],
    "oracle": ["oracle"],
}


def parse_algorithms(text: str) -> List[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in ALGORITHMS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown algorithms {unknown}; choose from {list(ALGORITHMS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetnet-power",
        description="Distributed power control for heterogeneous networks: training, baselines and reports",
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("train", "train and test the multi-agent policy"),
        ("baseline", "evaluate the classical baselines"),
        ("oracle", "run the grid-search oracle (at most 4 APs)"),
    ):
        command = commands.add_parser(name, help=help_text)
        source = command.add_mutually_exclusive_group()
        source.add_argument("--config", type=Path, help="YAML experiment file")
        source.add_argument("--preset", choices=sorted(PRESETS), default="two-layer", help="built-in scenario")
        command.add_argument("--seed", type=int, help="master seed; trial i uses seed + i")
        command.add_argument("--trials", type=int, help="number of trials")
        command.add_argument("--out", type=Path, help="output directory")
        command.add_argument("--algos", type=parse_algorithms,
                             help=f"comma-separated subset of {','.join(ALGORITHMS)}")
        if name == "train":
            command.add_argument("--experience-log", action="store_true",
                                 help="also write every assembled MASC experience per trial")

    report = commands.add_parser("report", help="rebuild aggregate and plot data from trial CSVs")
    report.add_argument("--out", type=Path, required=True, help="directory of a finished run")
    report.add_argument("--window", type=int, help="moving-average window")
    return parser


def run_command(args: argparse.Namespace) -> None:
    if args.command == "report":
        metrics = load_metrics(args.out, args.window)
        metrics.aggregate().to_csv(args.out / "aggregate.csv", index=False, float_format="%.17g")
        for path in emit_plot_data(metrics, args.out):
            logger.info(f"Wrote {path}")
        print(metrics.summary().to_string(index=False))
        return

    spec = load_config(
        args.config if args.config is not None else args.preset,
        seed=args.seed,
        trials=args.trials,
        output_dir=args.out,
        algorithms=args.algos or COMMAND_ALGORITHMS[args.command],
    )
    if getattr(args, "experience_log", False):
        spec = spec.model_copy(update={"experience_log": True})
    metrics = run_experiment(spec)
    print(metrics.summary().to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        run_command(args)
    except SimulationError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 4
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
