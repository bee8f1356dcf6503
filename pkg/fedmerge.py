"""
Command-line entry point for the federated-local merging simulator.

    python fedmerge.py run --config configs/default.json [--seed N] [--out DIR]
    python fedmerge.py tradeoff --inputs "results/*/summary.json" --out tradeoff.csv
    python fedmerge.py theory --trials 100
"""

import argparse
import json
import logging
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'backend', 'src'))

from dotenv import load_dotenv  # noqa: E402

from errors import ConfigError, FormatError, InvariantViolation, PoolExhaustedError  # noqa: E402
from models.experiment_config import (  # noqa: E402
    DEFAULT_OUT_DIR, ENV_LOG_LEVEL, ENV_OUT_DIR, ENV_WORKERS, ExperimentConfig
)
from models.rng import Rng  # noqa: E402
from services.experiment_service import run_experiment  # noqa: E402
from services.report_service import __version__, load_summaries, report_tradeoff, write_csv  # noqa: E402
from services.theory_oracle_service import check_suite_args, run_theory_suite  # noqa: E402

logger = logging.getLogger("fedmerge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(data)


def cmd_run(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig().validate()
    config = config.with_env().with_overrides(seed=args.seed, out_dir=args.out, workers=args.workers)
    result = run_experiment(config.validate())
    methods = result.summary['methods']
    print(f"Run finished (seed {config.seed}), artifacts in {config.out_dir}")
    for name in sorted(methods):
        entry = methods[name]
        print(f"  {name:<12} acc={entry['mean_acc']:.4f}  upload/client={entry['upload_bytes_per_client']} B")
    return EXIT_OK


def cmd_tradeoff(args) -> int:
    try:
        summaries = load_summaries(args.inputs)
    except FormatError as e:
        raise ConfigError(str(e)) from e
    table = report_tradeoff(summaries)
    if args.out:
        write_csv(table, args.out)
    print(table.to_string(index=False))
    return EXIT_OK


def theory_workers(args) -> int:
    if args.workers is not None:
        return args.workers
    raw = os.getenv(ENV_WORKERS, "1")
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from e


def cmd_theory(args) -> int:
    workers = theory_workers(args)
    try:
        check_suite_args(args.trials, args.samples, args.dim, args.cs_trials, workers)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out_dir = args.out or os.getenv(ENV_OUT_DIR, DEFAULT_OUT_DIR)
    os.makedirs(out_dir, exist_ok=True)
    result = run_theory_suite(
        args.trials, Rng(args.seed), n_samples=args.samples, d=args.dim,
        cs_trials=args.cs_trials, out_path=os.path.join(out_dir, "theory.csv"), workers=workers,
    )
    print(f"{len(result.checks)} bound checks, {result.violations} violations; "
          f"optimal lambda tighter in {result.tighter_at_optimum}/{result.n_scenarios} scenarios; "
          f"trace Cauchy-Schwarz {result.cs_passes}/{result.cs_trials}")
    if not result.all_hold:
        raise InvariantViolation("Theory suite found violations, see theory.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Personalized federated LoRA with Fisher-based merging')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default=None,
                        help=f'Logging level (default: ${ENV_LOG_LEVEL} or INFO)')
    parser.add_argument('--workers', type=int, default=None,
                        help=f'Parallel workers for client training (default: ${ENV_WORKERS} or 1)')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Train FedIT and local models, merge and report')
    run.add_argument('--config', type=str, default=None, help='Experiment config JSON')
    run.add_argument('--seed', type=int, default=None, help='Override the config seed')
    run.add_argument('--out', type=str, default=None, help='Output directory')
    run.set_defaults(handler=cmd_run)

    tradeoff = sub.add_parser('tradeoff', help='Performance-communication table from run summaries')
    tradeoff.add_argument('--inputs', type=str, required=True, help='Glob of summary.json files or a directory')
    tradeoff.add_argument('--out', type=str, default=None, help='CSV path for the table')
    tradeoff.set_defaults(handler=cmd_tradeoff)

    theory = sub.add_parser('theory', help='Check the excess-loss bound on synthetic quadratics')
    theory.add_argument('--trials', type=int, default=100, help='Number of random scenarios')
    theory.add_argument('--samples', type=int, default=100_000, help='Monte Carlo draws per check')
    theory.add_argument('--dim', type=int, default=8, help='Scenario dimension')
    theory.add_argument('--cs-trials', type=int, default=10_000, help='Trace Cauchy-Schwarz trials')
    theory.add_argument('--seed', type=int, default=0, help='Root seed')
    theory.add_argument('--out', type=str, default=None, help='Output directory for theory.csv')
    theory.set_defaults(handler=cmd_theory)
    return parser


def main(argv=None) -> int:
    load_dotenv(override=True)
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.getenv(ENV_LOG_LEVEL, "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.handler(args)
    except (ConfigError, PoolExhaustedError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except InvariantViolation as e:
        logger.error(f"Invariant violation: {e}")
        return EXIT_INVARIANT
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
