"""
Result export
CSV tables, run manifests and error records with fixed column orders
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10g'

# Column orders documented in the README.
TRAJECTORY_COLUMNS = [
    'step', 'time', 'engine_torque', 'speed', 'soc',
    'engine_command', 'motor_torque', 'brake_torque',
    'speed_request', 'speed_request_mean', 'speed_request_lo', 'speed_request_hi',
    'soc_target', 'engine_torque_limit', 'soc_margin',
    'tracking_cost_transformed', 'tracking_cost_physical',
]
RISK_COLUMNS = ['step', 'risk_engine_torque', 'risk_soc', 'risk_motor_power', 'risk_total', 'n_chance_rows']
VIOLATION_COLUMNS = [
    'step', 'violation_engine_torque', 'violation_soc', 'violation_motor_power',
    'violation_other', 'violation_joint',
]
SOLVER_COLUMNS = [
    'step', 'status', 'degraded', 'iterations', 'phase1_iterations', 'kkt_residual',
    'objective', 'objective_quadratic', 'lambda', 'duality_gap', 'uniform_objective', 'uniform_duality_gap',
    'hessian_pd', 'convexity_certified', 'speed_clamps',
]
SUMMARY_COLUMNS = [
    'variant', 'seed', 'steps', 'degraded_steps', 'mean_objective_quadratic',
    'tracking_cost_transformed', 'tracking_cost_physical',
    'max_joint_violation', 'mean_joint_violation', 'violation_limit',
    'min_soc_margin', 'mean_soc_margin', 'max_budget_gap', 'speed_clamps', 'ordering_holds',
]
SWEEP_COLUMNS = [
    'delta_bar', 'mean_objective_quadratic', 'initial_objective_quadratic',
    'max_joint_violation', 'violation_limit', 'coverage_holds', 'convexity_certified',
    'monotone_holds',
]
TRACE_COLUMNS = ['phase', 'mu', 'barrier', 'stationarity', 'step']

TABLES = {
    'trajectory': TRAJECTORY_COLUMNS,
    'risk': RISK_COLUMNS,
    'violation': VIOLATION_COLUMNS,
    'solver': SOLVER_COLUMNS,
}


def write_table(frame: pd.DataFrame, path: Union[str, Path], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        frame = frame.reindex(columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def write_run(frames: Dict[str, pd.DataFrame], out_dir: Union[str, Path], prefix: str = '') -> List[Path]:
    """The four per-run tables; ``prefix`` separates variants in a comparison."""
    out_dir = Path(out_dir)
    written = []
    for name, columns in TABLES.items():
        written.append(write_table(frames[name], out_dir / f"{prefix}{name}.csv", columns))
    return written


def write_trace(trace: Iterable[Dict], path: Union[str, Path]) -> Path:
    return write_table(pd.DataFrame(list(trace)), path, TRACE_COLUMNS)


def write_json(data: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write('\n')
    return path


def build_manifest(config: Dict, seeds: Sequence[int], variants: Sequence[str], outputs: Sequence[Path],
                   version: str, guarantee: str, command: str) -> Dict:
    """Run manifest; re-reading its 'config' entry reproduces the run."""
    return {
        'manifest_version': 1,
        'software_version': version,
        'command': command,
        'config': config,
        'seeds': [int(s) for s in seeds],
        'variants': list(variants),
        'guarantee': guarantee,
        'outputs': sorted(Path(p).name for p in outputs),
    }


def error_record(exc: BaseException, exit_code: int) -> Dict:
    return {'error': type(exc).__name__, 'message': str(exc), 'exit_code': exit_code}


def _json_default(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")
