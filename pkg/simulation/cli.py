"""
Chance-constrained powertrain MPC - command line

Run from project root:
    python -m simulation.cli simulate --variant optimized --seed 7
    python -m simulation.cli simulate --config run.json --variant all --out results/
    python -m simulation.cli validate --suite all
    python -m simulation.cli sweep --param delta_bar --values 0.004 0.012 0.05
    python -m simulation.cli schema
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

_PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from core import __version__
from core.exceptions import ConfigurationError, SolverError
from core.powertrain import VARIANTS, compare_controllers, run_mpc, sweep_delta_bar
from utils import config as env
from utils.export import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    build_manifest,
    error_record,
    write_json,
    write_run,
    write_table,
    write_trace,
)
from utils.run_config import RunConfig

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ('delta_bar',)


# ═══════════════════════════════════════════════════════════════════════════════
# Helpers
# ═══════════════════════════════════════════════════════════════════════════════

def _banner(title: str):
    print("\n" + "=" * 80)
    print(title)
    print("=" * 80)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(path)


def resolve_output_dir(cli_out: Optional[str], config: RunConfig) -> Path:
    """CCMPC_OUTPUT_DIR wins over --out, which wins over the config file."""
    if env.OUTPUT_DIR:
        return Path(env.OUTPUT_DIR)
    if cli_out:
        return Path(cli_out)
    return Path(config.output_dir)


def _prepare(args) -> RunConfig:
    config = load_config(args.config).with_overrides(seed=args.seed, n_jobs=getattr(args, 'jobs', None))
    if getattr(args, 'trace', False):
        config = replace(config, solver=replace(config.solver, record_trace=True))
    return config


def _command_line(argv: Sequence[str]) -> str:
    return ' '.join(['ccmpc', *argv])


# ═══════════════════════════════════════════════════════════════════════════════
# Commands
# ═══════════════════════════════════════════════════════════════════════════════

def cmd_simulate(args, argv: Sequence[str]) -> int:
    config = _prepare(args)
    out_dir = resolve_output_dir(args.out, config)
    args.resolved_out = out_dir
    setup = config.build_setup()
    variants = list(VARIANTS) if args.variant == 'all' else [args.variant]

    _banner(f"\U0001f697 CHANCE-CONSTRAINED MPC - {args.variant.upper()} (seed {config.seed})")
    print(f"\U0001f4c1 Output: {out_dir}")
    print(f"\U0001f3af Risk budget: {config.powertrain.delta_bar}  |  mode: {config.distribution_mode}"
          f"  |  guarantee: {setup.guarantee}")

    start = time.time()
    outputs: List[Path] = []
    if args.variant == 'all':
        result = compare_controllers(setup, [config.seed], variants, n_jobs=config.n_jobs)
        logs = {variant: result['logs'][(variant, config.seed)] for variant in variants}
        for variant, log in logs.items():
            outputs += write_run(log.to_frames(), out_dir, prefix=f"{variant}_")
        summary = result['summary']
        outputs.append(write_table(summary, out_dir / 'summary.csv', SUMMARY_COLUMNS))
    else:
        log = run_mpc(args.variant, setup, config.seed)
        logs = {args.variant: log}
        outputs += write_run(log.to_frames(), out_dir)
        summary = None

    for variant, log in logs.items():
        prefix = f"{variant}_" if len(logs) > 1 else ''
        if args.trace:
            outputs.append(write_trace(log.last_trace, out_dir / f"{prefix}solver_trace.csv"))
        if args.dump_scenarios and log.first_scenarios is not None:
            path = out_dir / f"{prefix}scenarios.csv"
            log.first_scenarios.to_csv(path)
            outputs.append(path)

    manifest_path = out_dir / 'manifest.json'
    outputs.append(manifest_path)
    write_json(build_manifest(config.to_dict(), [config.seed], variants, outputs, __version__,
                              setup.guarantee, _command_line(argv)), manifest_path)

    print("\n" + "=" * 80)
    print("\U0001f4ca RESULTS")
    print("=" * 80)
    for variant, log in logs.items():
        row = log.summary()
        marker = '✅' if row['max_joint_violation'] <= row['violation_limit'] else '❌'
        print(f"{marker} {variant:<14s} steps {row['steps']:4d} | degraded {row['degraded_steps']:3d} | "
              f"max violation {row['max_joint_violation']:.4f} (limit {row['violation_limit']:.4f}) | "
              f"min SoC margin {row['min_soc_margin']:+.3f}")
    if summary is not None and 'ordering_holds' in summary:
        held = summary.loc[summary['variant'] == 'optimized', 'ordering_holds']
        if len(held):
            print(f"{'✅' if bool(held.iloc[0]) else '❌'} optimized objective <= uniform allocation")
    print(f"\n⏱️  Runtime: {time.time() - start:.2f}s  |  {len(outputs)} files written")
    print("=" * 80 + "\n")
    return env.EXIT_OK


def cmd_validate(args, argv: Sequence[str]) -> int:
    from simulation.validation import run_suites

    suites = ['all'] if args.suite == 'all' else [args.suite]
    _banner(f"\U0001f9ea VALIDATION - {args.suite}")
    table = run_suites(suites)
    for row in table.itertuples(index=False):
        marker = '✅' if row.passed else '❌'
        print(f"{marker} {row.suite:<13s} {row.check:<36s} {row.detail}")

    failed = int((~table['passed']).sum())
    print("=" * 80)
    print(f"{len(table) - failed}/{len(table)} checks passed")
    print("=" * 80 + "\n")
    return env.EXIT_OK if failed == 0 else env.EXIT_VALIDATION


def cmd_sweep(args, argv: Sequence[str]) -> int:
    config = _prepare(args)
    out_dir = resolve_output_dir(args.out, config)
    args.resolved_out = out_dir
    if any(v <= 0.0 or v >= 1.0 for v in args.values):
        raise ConfigurationError(f"delta_bar values must lie in (0, 1), got {args.values}")
    setup = config.build_setup()

    _banner(f"\U0001f4c8 BUDGET SWEEP - {args.param} over {args.values}")
    frame = sweep_delta_bar(setup, args.values, seed=config.seed, n_jobs=config.n_jobs)
    sweep_path = write_table(frame, out_dir / 'sweep.csv', SWEEP_COLUMNS)
    manifest_path = out_dir / 'manifest.json'
    write_json(build_manifest(config.to_dict(), [config.seed], ['optimized'], [sweep_path, manifest_path],
                              __version__, setup.guarantee, _command_line(argv)), manifest_path)

    for row in frame.itertuples(index=False):
        ok = row.coverage_holds and row.monotone_holds
        print(f"{'✅' if ok else '❌'} delta_bar {row.delta_bar:<8.4g} objective {row.initial_objective_quadratic:.6g} | "
              f"max violation {row.max_joint_violation:.4f} (limit {row.violation_limit:.4f}) | "
              f"certified {bool(row.convexity_certified)}")
    print("=" * 80 + "\n")
    passed = bool(frame['coverage_holds'].all() and frame['monotone_holds'].all())
    return env.EXIT_OK if passed else env.EXIT_VALIDATION


def cmd_schema(args, argv: Sequence[str]) -> int:
    print(json.dumps(RunConfig.schema(), indent=2, sort_keys=True))
    return env.EXIT_OK


COMMANDS = {
    'simulate': cmd_simulate,
    'validate': cmd_validate,
    'sweep': cmd_sweep,
    'schema': cmd_schema,
}


# ═══════════════════════════════════════════════════════════════════════════════
# Main
# ═══════════════════════════════════════════════════════════════════════════════

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ccmpc', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='closed-loop powertrain run')
    simulate.add_argument('--config', help='run file or manifest (JSON)')
    simulate.add_argument('--variant', choices=[*VARIANTS, 'all'], default='optimized')
    simulate.add_argument('--seed', type=int)
    simulate.add_argument('--out', help='output directory')
    simulate.add_argument('--jobs', type=int, help='joblib workers for --variant all')
    simulate.add_argument('--trace', action='store_true', help='write the last solve trace')
    simulate.add_argument('--dump-scenarios', action='store_true', help='write the first step scenarios')

    validate = sub.add_parser('validate', help='run property suites')
    validate.add_argument('--suite', choices=['inequalities', 'convexity', 'solver', 'exlin', 'all'],
                          default='all')

    sweep = sub.add_parser('sweep', help='optimized runs over a parameter grid')
    sweep.add_argument('--config')
    sweep.add_argument('--param', choices=SWEEP_PARAMS, default='delta_bar')
    sweep.add_argument('--values', type=float, nargs='+', default=[0.004, 0.012, 0.05])
    sweep.add_argument('--seed', type=int)
    sweep.add_argument('--out')
    sweep.add_argument('--jobs', type=int)

    sub.add_parser('schema', help='print the run-file JSON schema')
    return parser


def _report_error(exc: BaseException, code: int, out_dir: Optional[Path]) -> Dict:
    record = error_record(exc, code)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        try:
            write_json(record, Path(out_dir) / 'error.json')
        except OSError:
            pass
    return record


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=env.LOG_LEVEL, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    args.resolved_out = None
    try:
        return COMMANDS[args.command](args, argv)
    except (ConfigurationError, json.JSONDecodeError) as exc:
        _report_error(exc, env.EXIT_CONFIG, args.resolved_out)
        return env.EXIT_CONFIG
    except SolverError as exc:
        _report_error(exc, env.EXIT_SOLVER, args.resolved_out)
        return env.EXIT_SOLVER


if __name__ == '__main__':
    sys.exit(main())
