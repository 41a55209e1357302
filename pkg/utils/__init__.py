"""
Utility functions
"""

from utils import config
from utils.lookup import MonotoneLookup
from utils.powertrain_data import (
    ENGINE_TORQUE_LIMIT_TABLE,
    SOC_TARGET_TABLE,
    default_exlin_parameters,
)

__all__ = [
    'config',
    'MonotoneLookup',
    'ENGINE_TORQUE_LIMIT_TABLE',
    'SOC_TARGET_TABLE',
    'default_exlin_parameters',
]
