"""Detection post-processing toolkit for 2D and 3D pipelines.

Core pieces: axis-aligned box geometry, weighted box clustering and NMS,
slice-to-cube merging, anchor grids with matching and deltas, the combined
cross-entropy + batch-Dice segmentation loss with analytic gradients,
object- and patient-level evaluation, synthetic toy tasks, and patch tiling
plans. A `boxforge` CLI binds the stages into a file-based pipeline.
"""

from .anchors import (
    AnchorAssignment,
    AnchorSet,
    PyramidLevel,
    PyramidSpec,
    decode_deltas,
    encode_deltas,
    generate_anchors,
    match_anchors,
    pyramid_report,
)
from .consolidate import (
    Cluster,
    Detection,
    WbcConfig,
    components_to_detections,
    greedy_cluster,
    merge_slices_to_cubes,
    nms,
    wbc,
    wbc_coords,
    wbc_score,
)
from .evaluation import (
    EvalResult,
    GroundTruthObject,
    average_precision,
    match_predictions,
    mean_ap,
    patient_level_ap,
)
from .geometry import Box, clip, iou, iou_matrix, measure
from .losses import (
    LossBatch,
    dice_ce_grad,
    dice_ce_loss,
    mine_hard_negatives,
    softmax,
    softmax_chain_grad,
)
from .tiling import TilingPlan, all_mirror_sets, expected_views, map_boxes, plan
from .toydata import ScoreModel, ToySample, generate, generate_one, simulate_predictions

__version__ = "0.1.0"

__all__ = [
    "Box",
    "measure",
    "iou",
    "iou_matrix",
    "clip",
    "Detection",
    "Cluster",
    "WbcConfig",
    "greedy_cluster",
    "wbc",
    "wbc_score",
    "wbc_coords",
    "nms",
    "merge_slices_to_cubes",
    "components_to_detections",
    "PyramidLevel",
    "PyramidSpec",
    "AnchorSet",
    "AnchorAssignment",
    "generate_anchors",
    "match_anchors",
    "encode_deltas",
    "decode_deltas",
    "pyramid_report",
    "LossBatch",
    "dice_ce_loss",
    "dice_ce_grad",
    "softmax",
    "softmax_chain_grad",
    "mine_hard_negatives",
    "GroundTruthObject",
    "EvalResult",
    "match_predictions",
    "average_precision",
    "mean_ap",
    "patient_level_ap",
    "TilingPlan",
    "plan",
    "all_mirror_sets",
    "expected_views",
    "map_boxes",
    "ToySample",
    "ScoreModel",
    "generate",
    "generate_one",
    "simulate_predictions",
    "__version__",
]
