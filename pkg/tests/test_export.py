"""
Tests for utils/export.py

Validates column order of the result tables, manifests and error records.
"""

import json

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError
from utils.export import (
    TRAJECTORY_COLUMNS,
    build_manifest,
    error_record,
    write_json,
    write_run,
    write_table,
    write_trace,
)


def _frames():
    return {
        'trajectory': pd.DataFrame([{'speed': 60.0, 'step': 0, 'time': 0.1}]),
        'risk': pd.DataFrame([{'step': 0, 'risk_total': 0.012}]),
        'violation': pd.DataFrame([{'step': 0, 'violation_joint': 0.0}]),
        'solver': pd.DataFrame([{'step': 0, 'status': 'optimal'}]),
    }


class TestTables:

    def test_fixed_column_order(self, tmp_path):
        path = write_table(pd.DataFrame([{'b': 2, 'a': 1}]), tmp_path / 'out.csv', ['a', 'b', 'c'])
        assert path.read_text().splitlines()[0] == 'a,b,c'

    def test_write_run_creates_four_tables(self, tmp_path):
        written = write_run(_frames(), tmp_path / 'run', prefix='optimized_')
        assert sorted(p.name for p in written) == [
            'optimized_risk.csv', 'optimized_solver.csv', 'optimized_trajectory.csv', 'optimized_violation.csv',
        ]
        header = (tmp_path / 'run' / 'optimized_trajectory.csv').read_text().splitlines()[0]
        assert header.split(',') == TRAJECTORY_COLUMNS

    def test_float_format(self, tmp_path):
        path = write_table(pd.DataFrame({'x': [1.0 / 3.0]}), tmp_path / 'f.csv')
        assert path.read_text().splitlines()[1] == '0.3333333333'

    def test_trace(self, tmp_path):
        path = write_trace([{'phase': 'main', 'mu': 1.0, 'barrier': 2.0, 'stationarity': 0.1, 'step': 1.0}],
                           tmp_path / 'trace.csv')
        assert pd.read_csv(path).shape == (1, 5)


class TestJson:

    def test_numpy_values(self, tmp_path):
        path = write_json({'arr': np.array([1.0, 2.0]), 'where': tmp_path}, tmp_path / 'x.json')
        data = json.loads(path.read_text())
        assert data['arr'] == [1.0, 2.0]
        assert data['where'] == str(tmp_path)

    def test_manifest(self, tmp_path):
        manifest = build_manifest({'seed': 1}, [1, 2], ['optimized'], [tmp_path / 'b.csv', tmp_path / 'a.csv'],
                                  '0.3.0', 'unconditional', 'simulate')
        assert manifest['manifest_version'] == 1
        assert manifest['outputs'] == ['a.csv', 'b.csv']
        assert manifest['seeds'] == [1, 2]
        assert manifest['config'] == {'seed': 1}

    def test_error_record(self):
        record = error_record(ConfigurationError('bad N'), 2)
        assert record == {'error': 'ConfigurationError', 'message': 'bad N', 'exit_code': 2}
