"""
Tests for simulation/cli.py

Validates exit codes, output files, manifests, error records and the
output-directory precedence of the command-line entry point.
"""

import json

import pandas as pd
import pytest

from core import powertrain
from core.exceptions import SolverError
from simulation import cli
from utils import config as env
from tests.conftest import SHORT_STEPS, short_run_config


def _write_config(tmp_path, **overrides):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(short_run_config(**overrides)))
    return path


# ═══════════════════════════════════════════════════════════════════════════════
# simulate
# ═══════════════════════════════════════════════════════════════════════════════

class TestSimulate:

    def test_single_variant(self, tmp_path):
        out = tmp_path / 'out'
        code = cli.main(['simulate', '--config', str(_write_config(tmp_path)), '--variant', 'uniform',
                         '--out', str(out)])
        assert code == env.EXIT_OK
        names = {p.name for p in out.iterdir()}
        assert {'trajectory.csv', 'risk.csv', 'violation.csv', 'solver.csv', 'manifest.json'} <= names
        assert len(pd.read_csv(out / 'trajectory.csv')) == SHORT_STEPS

    def test_manifest_contents(self, tmp_path):
        out = tmp_path / 'out'
        cli.main(['simulate', '--config', str(_write_config(tmp_path)), '--variant', 'optimized',
                  '--seed', '11', '--out', str(out), '--trace', '--dump-scenarios'])
        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['seeds'] == [11]
        assert manifest['variants'] == ['optimized']
        assert manifest['config']['seed'] == 11
        assert manifest['config']['solver']['record_trace'] is True
        assert manifest['guarantee'] == 'conditional_on_shifted_plan'
        assert {'solver_trace.csv', 'scenarios.csv', 'manifest.json'} <= set(manifest['outputs'])
        assert manifest['command'].startswith('ccmpc simulate')

    def test_all_variants_prefixed(self, tmp_path):
        out = tmp_path / 'out'
        code = cli.main(['simulate', '--config', str(_write_config(tmp_path)), '--variant', 'all',
                         '--out', str(out)])
        assert code == env.EXIT_OK
        names = {p.name for p in out.iterdir()}
        for variant in ('deterministic', 'uniform', 'optimized'):
            assert f"{variant}_trajectory.csv" in names
        summary = pd.read_csv(out / 'summary.csv')
        assert list(summary['variant']) == ['deterministic', 'uniform', 'optimized']

    def test_env_output_dir_wins(self, tmp_path, monkeypatch):
        forced = tmp_path / 'forced'
        monkeypatch.setattr(env, 'OUTPUT_DIR', str(forced))
        cli.main(['simulate', '--config', str(_write_config(tmp_path)), '--variant', 'deterministic',
                  '--out', str(tmp_path / 'ignored')])
        assert (forced / 'trajectory.csv').exists()
        assert not (tmp_path / 'ignored').exists()

    def test_solver_failure_exit_code(self, tmp_path, mocker):
        mocker.patch('simulation.cli.run_mpc', side_effect=SolverError('step 0: infeasible first solve'))
        out = tmp_path / 'out'
        code = cli.main(['simulate', '--config', str(_write_config(tmp_path)), '--out', str(out)])
        assert code == env.EXIT_SOLVER
        record = json.loads((out / 'error.json').read_text())
        assert record == {'error': 'SolverError', 'message': 'step 0: infeasible first solve', 'exit_code': 3}

    def test_unknown_config_key(self, tmp_path, capsys):
        path = _write_config(tmp_path, horizon=3)
        code = cli.main(['simulate', '--config', str(path), '--out', str(tmp_path / 'out')])
        assert code == env.EXIT_CONFIG
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record['error'] == 'ConfigurationError'

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{')
        assert cli.main(['simulate', '--config', str(path)]) == env.EXIT_CONFIG

    def test_inconsistent_setup_writes_error_record(self, tmp_path):
        path = _write_config(tmp_path, speed_model={'n_steps': SHORT_STEPS + 6})
        out = tmp_path / 'out'
        assert cli.main(['simulate', '--config', str(path), '--out', str(out)]) == env.EXIT_CONFIG
        assert json.loads((out / 'error.json').read_text())['exit_code'] == env.EXIT_CONFIG

    def test_unknown_variant_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            cli.main(['simulate', '--variant', 'robust'])

    def test_variant_choices_come_from_controller_module(self):
        assert cli.VARIANTS is powertrain.VARIANTS
        assert not hasattr(env, 'VARIANTS')


# ═══════════════════════════════════════════════════════════════════════════════
# validate, sweep, schema
# ═══════════════════════════════════════════════════════════════════════════════

class TestOtherCommands:

    def test_validate_failure_exit_code(self, mocker):
        table = pd.DataFrame([
            {'suite': 'solver', 'check': 'analytic-1d', 'passed': True, 'detail': ''},
            {'suite': 'solver', 'check': 'budget-tightness', 'passed': False, 'detail': 'gap 1e-3'},
        ])
        run_suites = mocker.patch('simulation.validation.run_suites', return_value=table)
        assert cli.main(['validate', '--suite', 'solver']) == env.EXIT_VALIDATION
        run_suites.assert_called_once_with(['solver'])

    def test_validate_success(self, mocker):
        table = pd.DataFrame([{'suite': 'exlin', 'check': 'conjugacy', 'passed': True, 'detail': ''}])
        mocker.patch('simulation.validation.run_suites', return_value=table)
        assert cli.main(['validate']) == env.EXIT_OK

    def test_sweep_rejects_budget_outside_unit_interval(self, tmp_path):
        out = tmp_path / 'out'
        code = cli.main(['sweep', '--config', str(_write_config(tmp_path)), '--values', '0.01', '1.5',
                         '--out', str(out)])
        assert code == env.EXIT_CONFIG
        assert (out / 'error.json').exists()

    def test_sweep_writes_table(self, tmp_path, mocker):
        frame = pd.DataFrame([{
            'delta_bar': 0.012, 'mean_objective_quadratic': 1.0, 'initial_objective_quadratic': 1.0,
            'initial_regularizer': 0.0, 'max_joint_violation': 0.0, 'violation_limit': 0.02,
            'coverage_holds': True, 'convexity_certified': True, 'monotone_holds': True,
        }])
        mocker.patch('simulation.cli.sweep_delta_bar', return_value=frame)
        out = tmp_path / 'out'
        code = cli.main(['sweep', '--config', str(_write_config(tmp_path)), '--values', '0.012', '--out', str(out)])
        assert code == env.EXIT_OK
        assert list(pd.read_csv(out / 'sweep.csv')['delta_bar']) == [0.012]
        assert json.loads((out / 'manifest.json').read_text())['variants'] == ['optimized']

    def test_sweep_failed_coverage(self, tmp_path, mocker):
        frame = pd.DataFrame([{
            'delta_bar': 0.012, 'mean_objective_quadratic': 1.0, 'initial_objective_quadratic': 1.0,
            'initial_regularizer': 0.0, 'max_joint_violation': 0.5, 'violation_limit': 0.02,
            'coverage_holds': False, 'convexity_certified': True, 'monotone_holds': True,
        }])
        mocker.patch('simulation.cli.sweep_delta_bar', return_value=frame)
        code = cli.main(['sweep', '--config', str(_write_config(tmp_path)), '--out', str(tmp_path / 'out')])
        assert code == env.EXIT_VALIDATION

    def test_schema(self, capsys):
        assert cli.main(['schema']) == env.EXIT_OK
        schema = json.loads(capsys.readouterr().out)
        assert schema['title'] == 'ccmpc run configuration'


class TestOutputDirectory:

    def test_cli_flag_over_config(self, monkeypatch):
        monkeypatch.setattr(env, 'OUTPUT_DIR', '')
        config = cli.RunConfig.from_dict({'output_dir': 'from_config'})
        assert cli.resolve_output_dir('from_flag', config).name == 'from_flag'
        assert cli.resolve_output_dir(None, config).name == 'from_config'
