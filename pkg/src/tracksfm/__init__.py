"""Track-based structure from motion: epipolar initialization, DLT
triangulation, outlier filtering, differentiable bundle adjustment and pose
metrics."""

from .bundle import BAProblem, LMState, ba_cost, lm_gradient_wrt_observations, lm_solve
from .epipolar import batched_eight_point, eight_point, initialize_cameras, sampson_error
from .filtering import FilterConfig, FilterMask, filter_observations, filter_reprojection
from .metrics import auc, cloud_accuracy_completeness, pairwise_errors
from .pipeline import PipelineConfig, reconstruct, select_query_frame
from .scene import Camera, Scene, Track, TrackObservation, project, project_jacobian
from .tracks import SyntheticConfig, generate_synthetic, load_tracks, save_tracks
from .triangulation import ray_point_geometry, triangulate_dlt, triangulation_angle

__version__ = "0.1.0"

__all__ = [
    "BAProblem", "LMState", "ba_cost", "lm_gradient_wrt_observations", "lm_solve",
    "batched_eight_point", "eight_point", "initialize_cameras", "sampson_error",
    "FilterConfig", "FilterMask", "filter_observations", "filter_reprojection",
    "auc", "cloud_accuracy_completeness", "pairwise_errors",
    "PipelineConfig", "reconstruct", "select_query_frame",
    "Camera", "Scene", "Track", "TrackObservation", "project", "project_jacobian",
    "SyntheticConfig", "generate_synthetic", "load_tracks", "save_tracks",
    "ray_point_geometry", "triangulate_dlt", "triangulation_angle",
]
