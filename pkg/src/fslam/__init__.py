"""Monocular feature-based visual SLAM with pluggable descriptors, plus an
evaluation harness for exposure robustness experiments."""
from .config import RunConfig, load_run_config
from .dataset_io import SequenceSource, SyntheticScene, generate_synthetic, load_euroc, load_kitti, render_synthetic
from .evaluation import MetricReport, aggregate, compute_ate, compute_rpe, evaluate
from .features import Descriptors, Keypoints, MatchThresholds, PyramidConfig
from .geometry import CameraIntrinsics, Pose, SimTransform
from .imaging import distort_sequence, gamma_transform
from .pipeline import RunResult, System, SystemConfig, run_sequence
from .place_recognition import Vocabulary, train_vocabulary
from .trajectory import Trajectory, read_trajectory, write_trajectory

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Descriptors", "Keypoints", "MatchThresholds", "MetricReport", "Pose", "PyramidConfig",
    "RunConfig", "RunResult", "SequenceSource", "SimTransform", "SyntheticScene", "System", "SystemConfig",
    "Trajectory", "Vocabulary", "aggregate", "compute_ate", "compute_rpe", "distort_sequence", "evaluate",
    "gamma_transform", "generate_synthetic", "load_euroc", "load_kitti", "load_run_config", "read_trajectory",
    "render_synthetic", "run_sequence", "train_vocabulary", "write_trajectory",
]
