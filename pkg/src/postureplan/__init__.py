"""Posture-aware trajectory planning for a legged robot with a deformable bounding box."""

from .geometry import CollisionPoint, RobotModel, Trajectory, generate_collision_points
from .mapping import MappingParams, MapSnapshot, MultiElevationMap
from .distance_field import SignedDistanceField, build_sdf, extrude_occupancy
from .planner import PlannerParams, PlanResult, plan

__version__ = "0.1.0"
