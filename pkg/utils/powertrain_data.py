"""
Powertrain default data
Project-default lookup tables and synthetic exactly linearizable model parameters
"""

from typing import Dict

# Requested speed grid shared by both lookups (km/h).
SPEED_GRID = (0.0, 40.0, 60.0, 80.0, 120.0)

# Upper bound on the drive-shaft engine torque as a function of requested
# speed (Nm). Project default; increasing in speed.
ENGINE_TORQUE_LIMIT_TABLE = {
    'breakpoints': SPEED_GRID,
    'values': (30.0, 40.0, 50.0, 60.0, 80.0),
}

# Regeneration target for the battery state of charge (Ah). Higher speeds
# leave room for regenerative braking, so the target decreases.
SOC_TARGET_TABLE = {
    'breakpoints': SPEED_GRID,
    'values': (31.0, 30.4, 30.0, 29.6, 28.8),
}

# Channel order
STATE_CHANNELS = ('engine_torque', 'speed', 'soc')
INPUT_CHANNELS = ('engine_command', 'motor_torque', 'brake_torque')


def default_exlin_parameters() -> Dict:
    """
    Synthetic transforms and linear core.

    Phi_i(x) = a_i x + b_i x^3 on the states, Psi_i(u; x) = s_i(x) (u_i + d_i u_i^3)
    on the inputs with s_i(x) = 1 + kappa_i expit(w_i . x). Only the motor
    channel is state dependent.
    """
    return {
        'phi_a': [1.0, 1.0, 1.0],
        'phi_b': [1e-6, 1e-5, 1e-5],
        'psi_d': [1e-6, 1e-6, 1e-6],
        'psi_w': [
            [0.0, 0.0, 0.0],
            [0.0, 0.01, 0.0],
            [0.0, 0.0, 0.0],
        ],
        'psi_kappa': [0.0, 0.1, 0.0],
        'A': [
            [0.8, 0.0, 0.0],
            [0.005, 0.9995, 0.0],
            [0.0, 0.0, 1.0],
        ],
        'B': [
            [0.2, 0.0, 0.0],
            [0.0, 0.005, -0.005],
            [0.0, -1e-3, 0.0],
        ],
        'c': [0.0, -0.01, -1e-3],
    }
