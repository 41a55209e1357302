"""
Tests for utils/lookup.py

Validates interpolation, end-value holding and rejection of malformed
tables.
"""

import numpy as np
import pytest

from core.exceptions import ConfigurationError
from utils.lookup import MonotoneLookup
from utils.powertrain_data import ENGINE_TORQUE_LIMIT_TABLE, SOC_TARGET_TABLE


class TestMonotoneLookup:

    def test_interpolates(self):
        lookup = MonotoneLookup.from_pairs([0.0, 10.0], [1.0, 3.0])
        assert lookup(5.0) == pytest.approx(2.0)
        assert np.allclose(lookup(np.array([0.0, 2.5, 10.0])), [1.0, 1.5, 3.0])

    def test_holds_end_values(self):
        lookup = MonotoneLookup.from_pairs([0.0, 10.0], [1.0, 3.0])
        assert lookup(-5.0) == pytest.approx(1.0)
        assert lookup(50.0) == pytest.approx(3.0)

    def test_direction_and_range(self):
        lookup = MonotoneLookup.from_pairs(**SOC_TARGET_TABLE)
        assert not lookup.increasing
        assert lookup.range == (28.8, 31.0)
        assert MonotoneLookup.from_pairs(**ENGINE_TORQUE_LIMIT_TABLE).increasing

    @pytest.mark.parametrize('breakpoints,values', [
        ([0.0], [1.0]),
        ([0.0, 1.0], [1.0]),
        ([1.0, 0.0], [1.0, 2.0]),
        ([0.0, 1.0, 2.0], [1.0, 3.0, 2.0]),
        ([0.0, np.inf], [1.0, 2.0]),
    ])
    def test_rejects_malformed(self, breakpoints, values):
        with pytest.raises(ConfigurationError):
            MonotoneLookup.from_pairs(breakpoints, values)

    def test_to_dict(self):
        lookup = MonotoneLookup.from_pairs([0, 1], [2, 2])
        assert lookup.to_dict() == {'breakpoints': [0.0, 1.0], 'values': [2.0, 2.0]}
