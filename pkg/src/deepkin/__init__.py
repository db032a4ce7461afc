"""Trajectory prediction with a differentiable kinematic bicycle output layer."""

__version__ = "0.1.0"

from .kinematics import ControlInput, KinematicParams, VehicleState, rollout  # noqa: E402
from .geometry import Trajectory, check_feasibility  # noqa: E402
from .models import ModelConfig, TrajectoryModel  # noqa: E402

__all__ = [
    "ControlInput",
    "KinematicParams",
    "ModelConfig",
    "Trajectory",
    "TrajectoryModel",
    "VehicleState",
    "check_feasibility",
    "rollout",
]
