"""Sparse 3D voxel convolutions with a toy LiDAR detection pipeline on top.

The layers build bottom-up: point clouds voxelize into SparseTensor grids;
rulebook-driven submanifold and strided convolutions run on them; a small
tape-based autodiff engine makes every block trainable; fusion blocks widen
the receptive field adaptively and a learned filter drops low-value voxels
before the BEV detection head. Evaluation is rotated-box AP over the usual
three difficulty buckets.
"""

from .autodiff import AdamConfig, Tape, adam_step, finite_diff, init_adam
from .config import config_from_dict, config_to_dict, load_config, save_config
from .convs import (
    ConvParams,
    count_flops,
    init_conv,
    per_interior_site_macs,
    sparse_conv,
    stack_flops_for_tensor,
)
from .detector import CellGrid, decode_boxes, detection_loss, encode_box, nms_bev
from .dffm import (
    DffmParams,
    decouple_kernel,
    dffm_forward,
    impulse_support_radius,
    init_dffm,
    receptive_field,
)
from .errors import (
    ConfigError,
    DivergedLossError,
    DuplicateCoordError,
    EmptyBatchError,
    FormatError,
    GenerationError,
    InvalidKernelError,
    NoGroundTruthError,
    NonScalarLossError,
    ShapeMismatchError,
    VoxelflowError,
)
from .evaluation import EvalConfig, EvalResult, ap_r11, ap_r40, evaluate, iou_3d, iou_bev
from .fsm import (
    FsmParams,
    fsm_targets,
    init_fsm,
    predict_importance,
    random_mask_probe,
    select_topk,
)
from .geometry import CLASS_NAMES, Box3D, Detection, bev_corners
from .kitti_io import (
    GroundTruth,
    PointCloud,
    read_detections,
    read_kitti_labels,
    read_velodyne_bin,
    write_detections,
    write_velodyne_bin,
)
from .pipeline import (
    ModelParams,
    RunConfig,
    TimingReport,
    TrainReport,
    evaluate_model,
    infer_timed,
    init_model,
    load_checkpoint,
    make_suite,
    run_frame,
    save_checkpoint,
    train_toy,
)
from .sparse import Rulebook, SparseTensor, build_rulebook, from_dense, height_compress, to_dense
from .synthetic import SceneConfig, gen_scene_batch, gen_synthetic_scene
from .voxelizer import AugmentConfig, VoxelConfig, augment, gt_sample, voxelize

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "AugmentConfig",
    "Box3D",
    "CLASS_NAMES",
    "CellGrid",
    "ConfigError",
    "ConvParams",
    "DffmParams",
    "Detection",
    "DivergedLossError",
    "DuplicateCoordError",
    "EmptyBatchError",
    "EvalConfig",
    "EvalResult",
    "FormatError",
    "FsmParams",
    "GenerationError",
    "GroundTruth",
    "InvalidKernelError",
    "ModelParams",
    "NoGroundTruthError",
    "NonScalarLossError",
    "PointCloud",
    "Rulebook",
    "RunConfig",
    "SceneConfig",
    "ShapeMismatchError",
    "SparseTensor",
    "Tape",
    "TimingReport",
    "TrainReport",
    "VoxelConfig",
    "VoxelflowError",
    "adam_step",
    "ap_r11",
    "ap_r40",
    "augment",
    "bev_corners",
    "build_rulebook",
    "config_from_dict",
    "config_to_dict",
    "count_flops",
    "decode_boxes",
    "decouple_kernel",
    "detection_loss",
    "dffm_forward",
    "encode_box",
    "evaluate",
    "evaluate_model",
    "finite_diff",
    "from_dense",
    "fsm_targets",
    "gen_scene_batch",
    "gen_synthetic_scene",
    "gt_sample",
    "height_compress",
    "impulse_support_radius",
    "infer_timed",
    "init_adam",
    "init_conv",
    "init_dffm",
    "init_fsm",
    "init_model",
    "iou_3d",
    "iou_bev",
    "load_checkpoint",
    "load_config",
    "make_suite",
    "nms_bev",
    "per_interior_site_macs",
    "predict_importance",
    "random_mask_probe",
    "read_detections",
    "read_kitti_labels",
    "read_velodyne_bin",
    "receptive_field",
    "run_frame",
    "save_checkpoint",
    "save_config",
    "select_topk",
    "sparse_conv",
    "stack_flops_for_tensor",
    "to_dense",
    "train_toy",
    "voxelize",
    "write_detections",
    "write_velodyne_bin",
]
