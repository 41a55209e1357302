"""
Configuration constants
"""

import os

from dotenv import load_dotenv

load_dotenv()

# Logging
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

# Output
OUTPUT_DIR = os.getenv('CCMPC_OUTPUT_DIR', '')
N_JOBS = int(os.getenv('CCMPC_N_JOBS', '1'))
DEFAULT_SEED = int(os.getenv('CCMPC_DEFAULT_SEED', '2024'))

# Solver
TOL_KKT = float(os.getenv('CCMPC_TOL_KKT', '1e-8'))
MAX_NEWTON = int(os.getenv('CCMPC_MAX_NEWTON', '500'))

# Closed-loop defaults
DISTRIBUTION_MODES = ('mv', 'bd', 'cdf')
INPUT_BOUND_STRATEGIES = ('shifted', 'first_step_only')

# Exit codes
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
