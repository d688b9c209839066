"""Simulation and learning toolkit for intelligent omni-surface control in a MU-MIMO downlink.

Modules
-------
channel      geometry, mobility and Rician sub-channels
ios          surface protocols, coefficients and action sets
transceiver  pilots, MMSE estimation, zero forcing and rates
env          slot-level environment
neural       small numpy networks with exact gradients
agent        branching deep-Q agent
twin         learned environment model
baselines    random and Thompson-sampling policies
harness      run loops, metrics, sweeps and the CLI
"""

from .env import EnvConfig, JointAction, Observation, RewardConfig, SurfaceEnv

__version__ = "0.1.0"

__all__ = ["EnvConfig", "JointAction", "Observation", "RewardConfig", "SurfaceEnv", "__version__"]
