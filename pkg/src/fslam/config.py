"""Run configuration: the user-facing parameter set of a SLAM experiment,
read from YAML and validated before any work starts."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .dataset_io import SequenceSource, SyntheticScene, load_euroc, load_kitti, generate_synthetic, render_synthetic
from .errors import ConfigError
from .features import FeatureFile, MatchThresholds, PyramidConfig
from .imaging import GammaParam, gamma_transform
from .pipeline import SystemConfig
from .tracking import TrackingConfig

SOURCES = ("kitti", "euroc", "synthetic", "feature-file")
DESCRIPTOR_SOURCES = ("builtin", "external")


@dataclass
class RunConfig:
    source: str = "synthetic"
    dataset: str | None = None  # dataset root directory
    sequence: str | None = None  # KITTI sequence id
    layout: str | None = None  # kitti | euroc, for the feature-file source
    descriptors: str = "builtin"
    features: str | None = None  # FSLF file with external features
    vocab: str | None = None  # FSLV vocabulary; trained on the sequence when absent
    scale_factor: float = 2.0
    n_levels: int = 3
    th_low: float = 50.0
    th_high: float = 100.0
    ratio: float = 0.9
    # "absolute": distances as given; "dimensionless": multiplied by threshold_multiplier
    threshold_units: str = "absolute"
    threshold_multiplier: float = 0.1
    n_features: int = 1000
    seed: int = 0
    runs: int = 1
    out: str = "out"
    gamma: float = 1.0
    loop_closing: bool = True
    max_frames: int | None = None
    # synthetic source
    render: bool = False  # deliver rendered images instead of precomputed features
    scene_seed: int = 0
    scene: dict = field(default_factory=dict)
    rpe_lengths: list | None = None
    # two-view inlier threshold in pixels, used when features carry pixel noise
    # (detected on images, or synthetic with sigma > 0)
    init_threshold_px: float = 2.0

    def __post_init__(self):
        self.validate(check_paths=False)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.descriptors not in DESCRIPTOR_SOURCES:
            raise ConfigError(f"descriptors must be one of {DESCRIPTOR_SOURCES}, got {self.descriptors!r}")
        if not isinstance(self.runs, int) or self.runs < 1:
            raise ConfigError(f"runs must be an integer >= 1, got {self.runs!r}")
        if self.threshold_units not in ("absolute", "dimensionless"):
            raise ConfigError(f"threshold_units must be absolute or dimensionless, got {self.threshold_units!r}")
        if self.source == "feature-file":
            if self.layout not in ("kitti", "euroc"):
                raise ConfigError("the feature-file source needs layout: kitti or euroc")
            self.descriptors = "external"
        if self.descriptors == "external" and not self.features:
            raise ConfigError("external descriptors need a features file")
        if self.source in ("kitti", "euroc", "feature-file") and not self.dataset:
            raise ConfigError(f"source {self.source} needs a dataset directory")
        if self.max_frames is not None and self.max_frames < 2:
            raise ConfigError("max_frames must be >= 2")
        try:
            GammaParam(float(self.gamma))
            self.pyramid()
            self.thresholds()
            self.synthetic_scene()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if check_paths:
            for name in ("dataset", "features", "vocab"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"{name} path does not exist: {p}")
        return self

    # ---------------------------------------------------------------- builders

    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(float(self.scale_factor), int(self.n_levels))

    def thresholds(self) -> MatchThresholds:
        if self.threshold_units == "dimensionless":
            return MatchThresholds.from_dimensionless(self.th_low, self.th_high, self.threshold_multiplier, self.ratio)
        return MatchThresholds(float(self.th_low), float(self.th_high), float(self.ratio))

    def synthetic_scene(self) -> SyntheticScene:
        return SyntheticScene.from_dict(dict(self.scene))

    def system_config(self, seed: int | None = None) -> SystemConfig:
        seed = self.seed if seed is None else seed
        tracking = TrackingConfig()
        tracking = replace(tracking, ransac=replace(tracking.ransac, seed=seed))
        if self.uses_images() or (self.source == "synthetic" and self.synthetic_scene().sigma > 0):
            tracking = replace(tracking, init_threshold_px=float(self.init_threshold_px))
        return SystemConfig(thresholds=self.thresholds(), pyramid=self.pyramid(), tracking=tracking,
                            n_features=self.n_features, loop_closing=self.loop_closing, seed=seed)

    def uses_images(self) -> bool:
        """True when features are detected on images rather than supplied."""
        if self.descriptors == "external":
            return False
        return self.source != "synthetic" or self.render or float(self.gamma) != 1.0

    def open_source(self) -> SequenceSource:
        g = float(self.gamma)
        transform = None if g == 1.0 else (lambda img: gamma_transform(img, g))
        layout = self.layout if self.source == "feature-file" else self.source
        if layout == "synthetic":
            scene = self.synthetic_scene()
            if self.render or transform is not None:
                return render_synthetic(scene, self.scene_seed, transform)
            return generate_synthetic(scene, self.scene_seed)
        src = load_kitti(self.dataset, self.sequence) if layout == "kitti" else load_euroc(self.dataset)
        if transform is not None and self.descriptors == "builtin":
            inner = src._loader
            src._loader = lambda i: (lambda d: d._replace(image=transform(d.image)))(inner(i))
        return src

    def feature_file(self) -> FeatureFile | None:
        if self.descriptors != "external":
            return None
        return FeatureFile(self.features, self.n_levels)

    # ---------------------------------------------------------------- IO

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return RunConfig.from_dict(data or {})
