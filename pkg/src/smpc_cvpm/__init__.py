"""Stochastic MPC trajectory planning with a robust feasibility check and violation-probability fallback."""
from .planners import PlannerConfig, TrackedObstacle, WorldState
from .vehicle_models import EgoInput, EgoState, ObstacleModel, ObstacleState

__version__ = "0.1.0"

__all__ = ["PlannerConfig", "TrackedObstacle", "WorldState", "EgoInput", "EgoState", "ObstacleModel",
           "ObstacleState"]
