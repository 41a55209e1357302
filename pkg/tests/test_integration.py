"""
End-to-end integration tests for the chance-constrained powertrain MPC.

Runs the command-line entry point and the full closed-loop comparison,
validating reproducibility from seeds and manifests, the closed-loop
chance guarantees and the property suites.
"""

import json

import numpy as np
import pandas as pd
import pytest

from core.powertrain import PowertrainSetup, compare_controllers
from core.uncertainty import mc_margin
from simulation import cli
from simulation.validation import run_suites
from utils import config as env
from tests.conftest import short_run_config


# ═══════════════════════════════════════════════════════════════════════════════
# Helpers
# ═══════════════════════════════════════════════════════════════════════════════

def _simulate(tmp_path, name, config_path, *extra):
    out = tmp_path / name
    code = cli.main(['simulate', '--config', str(config_path), '--out', str(out), *extra])
    assert code == env.EXIT_OK
    return out


@pytest.fixture
def short_config_path(tmp_path, monkeypatch):
    monkeypatch.setattr(env, 'OUTPUT_DIR', '')
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(short_run_config()))
    return path


@pytest.fixture(scope='module')
def full_comparison():
    return compare_controllers(PowertrainSetup(), seeds=(2024,))


# ═══════════════════════════════════════════════════════════════════════════════
# Reproducibility
# ═══════════════════════════════════════════════════════════════════════════════

@pytest.mark.integration
class TestReproducibility:

    def test_same_seed_byte_identical(self, tmp_path, short_config_path):
        a = _simulate(tmp_path, 'a', short_config_path, '--variant', 'all')
        b = _simulate(tmp_path, 'b', short_config_path, '--variant', 'all')
        for path in sorted(a.glob('*.csv')):
            assert path.read_bytes() == (b / path.name).read_bytes(), path.name

    def test_manifest_reproduces_run(self, tmp_path, short_config_path):
        first = _simulate(tmp_path, 'first', short_config_path, '--variant', 'optimized', '--seed', '17')
        second = _simulate(tmp_path, 'second', first / 'manifest.json', '--variant', 'optimized')
        for name in ('trajectory.csv', 'risk.csv', 'violation.csv', 'solver.csv'):
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_different_seeds_differ(self, tmp_path, short_config_path):
        a = _simulate(tmp_path, 'a', short_config_path, '--variant', 'deterministic', '--seed', '1')
        b = _simulate(tmp_path, 'b', short_config_path, '--variant', 'deterministic', '--seed', '2')
        assert (a / 'trajectory.csv').read_bytes() != (b / 'trajectory.csv').read_bytes()

    def test_scenario_dump_round_trip(self, tmp_path, short_config_path):
        from core.uncertainty import ScenarioSet

        out = _simulate(tmp_path, 'dump', short_config_path, '--variant', 'uniform', '--dump-scenarios')
        scenarios = ScenarioSet.from_csv(out / 'scenarios.csv')
        assert scenarios.S == short_run_config()['powertrain']['n_samples']
        assert np.allclose(scenarios.samples[:, 0, 0], scenarios.samples[0, 0, 0])


# ═══════════════════════════════════════════════════════════════════════════════
# Full closed loop (default 120-step run)
# ═══════════════════════════════════════════════════════════════════════════════

@pytest.mark.slow
@pytest.mark.integration
class TestFullRun:

    def test_budget_used_in_full(self, full_comparison):
        solver = pd.DataFrame(full_comparison['logs'][('optimized', 2024)].solver)
        risk = pd.DataFrame(full_comparison['logs'][('optimized', 2024)].risk)
        optimal = (solver['status'] == 'optimal') & (risk['n_chance_rows'] > 0)
        assert optimal.any()
        assert np.all(np.abs(risk.loc[optimal, 'risk_total'] - 0.012) <= 1e-6)
        assert (solver.loc[optimal, 'lambda'] > 0).all()

    def test_optimized_respects_joint_chance(self, full_comparison):
        violation = pd.DataFrame(full_comparison['logs'][('optimized', 2024)].violation)
        limit = 0.012 + mc_margin(0.012, 1024)
        assert limit == pytest.approx(0.012 + 3.0 * np.sqrt(0.012 * 0.988 / 1024))
        assert (violation['violation_joint'] <= limit).all()

    def test_deterministic_violates(self, full_comparison):
        violation = pd.DataFrame(full_comparison['logs'][('deterministic', 2024)].violation)
        assert violation['violation_joint'].max() > 0.12

    def test_optimized_never_worse_than_uniform(self, full_comparison):
        summary = full_comparison['summary']
        assert bool(summary.loc[summary['variant'] == 'optimized', 'ordering_holds'].iloc[0])

    def test_every_variant_completes(self, full_comparison):
        summary = full_comparison['summary']
        assert set(summary['variant']) == {'deterministic', 'uniform', 'optimized'}
        assert (summary['steps'] == 120).all()


@pytest.mark.slow
@pytest.mark.integration
class TestPropertySuites:

    @pytest.mark.parametrize('suite', ['inequalities', 'convexity', 'solver', 'exlin'])
    def test_suite_passes(self, suite):
        table = run_suites([suite])
        failed = table.loc[~table['passed'], ['check', 'detail']]
        assert failed.empty, failed.to_string()
