"""Mask-guided oriented 3D box fitting on LiDAR points, with a small simulator,
a contrastive prototype kernel and a rotated-IoU AP evaluator."""
from .boxsearch import (InsufficientEvidence, LossWeights, SearchConfig, box_loss,
                        fb_from_view_angle, search_box, view_angle)
from .evaluation import Detection, EvalConfig, average_precision, iou_3d, map_report
from .geometry import (AnchorPrior, BoxParams, CameraCalibration, InstanceMaskSet, PointCloud,
                       filter_background, lift_masks, world_to_box_local)
from .lidarsim import LidarSpec, SceneObject, SceneSpec, cast_rays, render_masks

__version__ = "0.1.0"
