"""Physics-based refinement of 2D-keypoint motion into plausible 3D dynamics."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .camera import CameraIntrinsics, Keypoints2D, canonicalize, project, root_relative
from .config import RunConfig, load_config
from .contact import FrictionCone, GroundReactionForce, cone_check
from .cycle import ContactLabels, CycleConfig, CycleState, DynamicCycle
from .dynamics import (
    DynamicsQuantities,
    bias_forces,
    compute_dynamics,
    contact_jacobian,
    forward_dynamics,
    grf_map,
    integrate,
    mass_matrix,
)
from .metrics import MetricsReport, compute_e_smooth, compute_penetration, compute_pose_metrics
from .networks import ContactForceNet, GainNet, PoseNet, TransNet
from .pipeline import MotionFrame, MotionSequence, build_networks, run_pipeline
from .projection import FloorModel, ProjectionResult, project_velocity, projection_backward
from .skeleton import PoseVector, SkeletonModel, VelocityVector, forward_kinematics, load_skeleton
from .spatial import RigidTransform, UnitQuaternion, quat_error, quat_integrate, quat_multiply
from .synthetic import GeneratorConfig, TrainingSample, generate
from .training import Schedule, finetune_2d, joint_train, pretrain

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "CameraIntrinsics",
    "Keypoints2D",
    "canonicalize",
    "project",
    "root_relative",
    "RunConfig",
    "load_config",
    "FrictionCone",
    "GroundReactionForce",
    "cone_check",
    "ContactLabels",
    "CycleConfig",
    "CycleState",
    "DynamicCycle",
    "DynamicsQuantities",
    "bias_forces",
    "compute_dynamics",
    "contact_jacobian",
    "forward_dynamics",
    "grf_map",
    "integrate",
    "mass_matrix",
    "MetricsReport",
    "compute_e_smooth",
    "compute_penetration",
    "compute_pose_metrics",
    "ContactForceNet",
    "GainNet",
    "PoseNet",
    "TransNet",
    "MotionFrame",
    "MotionSequence",
    "build_networks",
    "run_pipeline",
    "FloorModel",
    "ProjectionResult",
    "project_velocity",
    "projection_backward",
    "PoseVector",
    "SkeletonModel",
    "VelocityVector",
    "forward_kinematics",
    "load_skeleton",
    "RigidTransform",
    "UnitQuaternion",
    "quat_error",
    "quat_integrate",
    "quat_multiply",
    "GeneratorConfig",
    "TrainingSample",
    "generate",
    "Schedule",
    "finetune_2d",
    "joint_train",
    "pretrain",
]
