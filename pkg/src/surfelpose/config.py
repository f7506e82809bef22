"""Run configuration: JSON in, nested dataclasses out, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .association import DetectorCorruption, RefineParams
from .metrics import AUC_CAP
from .pose_fusion import EkfParams
from .providers import OracleNoise
from .registration import RegistrationParams


class ConfigError(ValueError):
    pass


@dataclass
class AssociationConfig:
    keyframe_every: int = 5
    overlap_threshold: float = 0.3
    band: tuple[float, float] = (0.4, 0.5)
    n: int = 10
    sigma_object: int = 10
    voxel: float = 0.01
    assign_radius: float = 0.03
    refine: bool = True
    measurement_masks: str = "projected"  # projected | raw

    def __post_init__(self):
        self.band = tuple(self.band)
        if self.keyframe_every < 1:
            raise ConfigError("keyframe_every must be >= 1")
        if not 0.0 <= self.overlap_threshold < 1.0:
            raise ConfigError("overlap_threshold must be in [0, 1)")
        if self.measurement_masks not in ("projected", "raw"):
            raise ConfigError("measurement_masks must be 'projected' or 'raw'")
        self.refine_params()  # validates the rest

    def refine_params(self) -> RefineParams:
        return RefineParams(self.n, self.sigma_object, self.band, self.band[0], self.voxel, self.assign_radius)


@dataclass
class ProviderConfig:
    kind: str = "oracle"  # oracle | subprocess
    command: list[str] = field(default_factory=list)
    min_pixels: int = 50

    def __post_init__(self):
        if self.kind not in ("oracle", "subprocess"):
            raise ConfigError("provider kind must be 'oracle' or 'subprocess'")
        if self.kind == "subprocess" and not self.command:
            raise ConfigError("subprocess provider needs a command")


@dataclass
class MetricsConfig:
    auc_cap: float = AUC_CAP
    adds_max_points: int = 2000
    model_spacing: float = 0.003

    def __post_init__(self):
        if not 0 < self.auc_cap <= 1.0:
            raise ConfigError("auc_cap must be in (0, 1] metres")


@dataclass
class RunConfig:
    output_dir: str
    scene: str = "default"  # SceneSpec JSON path, or "default"
    frames: str | None = None  # directory written by `synth`; overrides scene
    seed: int = 0
    n_frames: int | None = None
    method: str = "ekf"  # ekf | single_view
    camera_tracking: str = "registration"  # registration | ground_truth
    scene_noise: dict | None = None
    max_skip_fraction: float = 0.2
    inactive_window: int = 200
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    detector: DetectorCorruption = field(default_factory=DetectorCorruption)
    oracle: OracleNoise = field(default_factory=OracleNoise)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    ekf: EkfParams = field(default_factory=EkfParams)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.method not in ("ekf", "single_view"):
            raise ConfigError("method must be 'ekf' or 'single_view'")
        if self.camera_tracking not in ("registration", "ground_truth"):
            raise ConfigError("camera_tracking must be 'registration' or 'ground_truth'")
        if self.n_frames is not None and self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.scene_noise is not None:
            extra = set(self.scene_noise) - {"depth_sigma", "dropout_prob"}
            if extra:
                raise ConfigError(f"unknown scene_noise keys: {sorted(extra)}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kwargs = {}
    for key, value in data.items():
        t = hints[key]
        if dataclasses.is_dataclass(t):
            kwargs[key] = _build(t, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> tuple[RunConfig, Path]:
    """Parse a run config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data), path.parent


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def stage_seed(root: int, stage: str) -> int:
    """Independent sub-seed for a named pipeline stage."""
    ss = np.random.SeedSequence(root, spawn_key=(zlib.crc32(stage.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
