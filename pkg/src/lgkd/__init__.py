"""LiDAR-guided knowledge distillation for multi-camera BEV 3D detection.

A desk-scale, numpy-based implementation of the full pipeline: camera and
LiDAR geometry, BEV foreground/view masks from point clouds, a minimal
reverse-mode autodiff engine, lift-splat teacher/student detectors, the
distillation loss stack, a synthetic multi-view dataset generator, and
depth/detection evaluation metrics.
"""

from .autodiff import Parameter, Tensor, grad_check
from .bev import (BevGrid, GridSpec, PointCloud, gaussian_smooth,
                  split_view_masks, voxelize_occupancy)
from .config import RunConfig, load_config, save_config
from .distill import (LossWeights, bev_distill_loss, center_focal_loss,
                      coarse_depth_loss, depth_distill_loss, fine_depth_loss,
                      scale_invariant_depth_loss, soft_label_loss,
                      total_distill_loss)
from .geometry import (CameraRig, FrustumSpec, camera_fov_sector, ego_to_lidar,
                       frustum_points, pixel_to_ego, pixel_to_lidar, surround_rig)
from .metrics import (DepthEvalResult, DetEvalResult, eval_depth,
                      eval_detection, eval_range_banded)
from .models import DetectionNet, ModelSpec, detect_decode, lift_splat
from .synthworld import (Box, LidarScan, Scene, cast_lidar, generate_scene,
                         make_sample, render_depth_gt, splat_gt_heatmap)

__version__ = "0.1.0"

__all__ = [
    "BevGrid", "Box", "CameraRig", "DepthEvalResult", "DetEvalResult",
    "DetectionNet", "FrustumSpec", "GridSpec", "LidarScan", "LossWeights",
    "ModelSpec", "Parameter", "PointCloud", "RunConfig", "Scene", "Tensor",
    "bev_distill_loss", "camera_fov_sector", "cast_lidar", "center_focal_loss",
    "coarse_depth_loss", "depth_distill_loss", "detect_decode", "ego_to_lidar",
    "eval_depth", "eval_detection", "eval_range_banded", "fine_depth_loss",
    "frustum_points", "gaussian_smooth", "generate_scene", "grad_check",
    "lift_splat", "load_config", "make_sample", "pixel_to_ego", "pixel_to_lidar",
    "render_depth_gt", "save_config", "scale_invariant_depth_loss",
    "soft_label_loss", "splat_gt_heatmap", "split_view_masks", "surround_rig",
    "total_distill_loss", "voxelize_occupancy",
]
