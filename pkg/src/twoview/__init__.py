"""Two-view angiographic 3D/2D registration by differentiable silhouette rendering."""

from .geometry import (
    BehindCamera,
    CameraModel,
    NonUnitAxis,
    Pose,
    Projector,
    Rotation,
    compose_poses,
    coupled_pose,
    exp_so3,
    lateral_pose_from_coupled,
    log_so3,
    perpendicular_coupling,
    perturb_pose,
    project_point,
    project_point_jacobian,
    rodrigues_general,
)
from .images import ConstantImage, GrayImage, binarize, ingest_silhouette, otsu_threshold
from .mesh import (
    EmptyMesh,
    ParseError,
    TriangleMesh,
    add_error,
    load_mesh,
    make_tube_mesh,
    transform_mesh,
)
from .metrics import (
    InvisibleMesh,
    PerturbationRanges,
    PoseError,
    SweepResult,
    default_camera,
    default_gt_pose,
    make_synthetic_case,
    pose_error,
    rotation_error_deg,
    run_sweep,
    translation_error_mm,
)
from .registration import (
    Configuration,
    DimensionMismatch,
    Lambda2Schedule,
    NonFiniteLoss,
    RegistrationConfig,
    RegistrationReport,
    coupled_loss,
    lambda2_at,
    run_registration,
    two_view_loss,
)
from .renderer import (
    RenderSettings,
    SilhouetteImage,
    render_silhouette,
    render_with_pose_gradient,
    signed_distance_point_triangle_2d,
)

__version__ = "0.1.0"

__all__ = [
    "BehindCamera",
    "CameraModel",
    "ConstantImage",
    "Configuration",
    "DimensionMismatch",
    "EmptyMesh",
    "GrayImage",
    "InvisibleMesh",
    "Lambda2Schedule",
    "NonFiniteLoss",
    "NonUnitAxis",
    "ParseError",
    "PerturbationRanges",
    "Pose",
    "PoseError",
    "Projector",
    "RegistrationConfig",
    "RegistrationReport",
    "RenderSettings",
    "Rotation",
    "SilhouetteImage",
    "SweepResult",
    "TriangleMesh",
    "add_error",
    "binarize",
    "compose_poses",
    "coupled_loss",
    "coupled_pose",
    "default_camera",
    "default_gt_pose",
    "exp_so3",
    "ingest_silhouette",
    "lambda2_at",
    "lateral_pose_from_coupled",
    "load_mesh",
    "log_so3",
    "make_synthetic_case",
    "make_tube_mesh",
    "otsu_threshold",
    "perpendicular_coupling",
    "perturb_pose",
    "pose_error",
    "project_point",
    "project_point_jacobian",
    "render_silhouette",
    "render_with_pose_gradient",
    "rodrigues_general",
    "rotation_error_deg",
    "run_registration",
    "run_sweep",
    "transform_mesh",
    "translation_error_mm",
    "two_view_loss",
]
