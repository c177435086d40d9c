"""Run configuration: one INI file with sections, plus ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError
from .geometry import BevGridSpec, DepthBins
from .pillars import PILLAR_CHANNELS, VoxelBounds
from .simulator import LidarParams, RigParams, WorldParams

VERSION = "0.1.0"
MODALITIES = ("both", "camera_only", "lidar_only")
FINETUNE_MODALITIES = ("both", "camera", "lidar")


@dataclass
class WorldSection:
    extent: float = 64.0
    resolution: float = 0.125
    num_classes: int = 6
    obstacle_density: float = 0.05
    feature_dim: int = 16
    nuisance_channels: int = 4
    embedding_seed: int = 0
    feature_noise: float = 1.0
    intensity_noise: float = 0.05
    ego_jitter: float = 2.0

    def params(self) -> WorldParams:
        d = dataclasses.asdict(self)
        d.pop("ego_jitter")
        return WorldParams(**d)


@dataclass
class RigSection:
    num_cameras: int = 6
    feat_h: int = 16
    feat_w: int = 24
    hfov_deg: float = 70.0
    pitch_deg: float = 12.0
    camera_height: float = 1.6
    mount_radius: float = 0.3
    lidar_height: float = 1.8
    ring_min_range: float = 1.5
    ring_max_range: float = 18.0
    ground_beams: int = 40
    upper_beams: int = 8
    azimuth_steps: int = 360
    max_range: float = 30.0
    range_noise: float = 0.0

    def rig_params(self) -> RigParams:
        return RigParams(self.num_cameras, self.feat_h, self.feat_w, self.hfov_deg, self.pitch_deg,
                         self.camera_height, self.mount_radius)

    def lidar_params(self) -> LidarParams:
        return LidarParams(height=self.lidar_height, ring_min_range=self.ring_min_range,
                           ring_max_range=self.ring_max_range, ground_beams=self.ground_beams,
                           upper_beams=self.upper_beams, azimuth_steps=self.azimuth_steps,
                           max_range=self.max_range, range_noise=self.range_noise)


@dataclass
class GridSection:
    x_min: float = -12.0
    x_max: float = 12.0
    z_min: float = -12.0
    z_max: float = 12.0
    cell_size: float = 1.0
    query_x_min: float = -8.0
    query_x_max: float = 8.0
    query_z_min: float = 0.0
    query_z_max: float = 12.0
    voxel_size: float = 0.1
    voxel_y_min: float = -2.5
    voxel_y_max: float = 1.5

    def ego(self, dim: int = 1) -> BevGridSpec:
        return BevGridSpec(self.x_min, self.x_max, self.z_min, self.z_max, self.cell_size, dim)

    def query(self, dim: int = 1) -> BevGridSpec:
        return BevGridSpec(self.query_x_min, self.query_x_max, self.query_z_min, self.query_z_max,
                           self.cell_size, dim)

    def labels(self) -> BevGridSpec:
        """Segmentation output grid: three 2x upsamplings of the ego grid."""
        return self.ego().refined(8)

    def voxel_bounds(self) -> VoxelBounds:
        return VoxelBounds((self.x_min, self.x_max), (self.voxel_y_min, self.voxel_y_max), (self.z_min, self.z_max))


@dataclass
class BinsSection:
    d_min: float = 1.0
    d_max: float = 80.0
    step: float = 0.5

    def bins(self) -> DepthBins:
        return DepthBins(self.d_min, self.d_max, self.step)


@dataclass
class ModelSection:
    feature_dim: int = 16
    camera_channels: int = 16
    lidar_channels: int = len(PILLAR_CHANNELS)
    block_count: int = 1
    window: int = 3
    head_scale: float = 0.1


@dataclass
class AlignmentSection:
    tau0: float = 0.1
    sigma_trans: float = 1.0
    sigma_rot: float = 0.1
    num_samples: int = 8
    normalization: str = "mean"


@dataclass
class TrainSection:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    depth_lr_scale: float = 10.0
    pretrain_epochs: int = 20
    finetune_epochs: int = 20
    batch_size: int = 8
    label_fraction: float = 1.0
    modality_mask: str = "both"
    finetune_modality: str = "both"
    freeze_fusion: bool = False
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0


@dataclass
class IoSection:
    out: str = "runs/default"
    dataset: str = ""
    checkpoint: str = ""


SECTIONS = {
    "world": WorldSection, "rig": RigSection, "grid": GridSection, "bins": BinsSection,
    "model": ModelSection, "alignment": AlignmentSection, "train": TrainSection, "io": IoSection,
}
DATA_SECTIONS = ("world", "rig", "grid", "bins")


@dataclass
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    rig: RigSection = field(default_factory=RigSection)
    grid: GridSection = field(default_factory=GridSection)
    bins: BinsSection = field(default_factory=BinsSection)
    model: ModelSection = field(default_factory=ModelSection)
    alignment: AlignmentSection = field(default_factory=AlignmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self) -> "RunConfig":
        t = self.train
        if not 0 < t.label_fraction <= 1:
            raise ValidationError("train.label_fraction must be in (0, 1]")
        if not t.lr > 0 or not t.depth_lr_scale > 0:
            raise ValidationError("train.lr and train.depth_lr_scale must be positive")
        if t.modality_mask not in MODALITIES:
            raise ValidationError(f"train.modality_mask must be one of {MODALITIES}")
        if t.finetune_modality not in FINETUNE_MODALITIES:
            raise ValidationError(f"train.finetune_modality must be one of {FINETUNE_MODALITIES}")
        if t.batch_size < 1 or t.pretrain_epochs < 0 or t.finetune_epochs < 0:
            raise ValidationError("batch size must be >= 1 and epoch counts >= 0")
        if self.model.camera_channels != self.world.feature_dim:
            raise ValidationError("model.camera_channels must equal world.feature_dim")
        if self.model.lidar_channels != len(PILLAR_CHANNELS):
            raise ValidationError(f"model.lidar_channels is fixed at {len(PILLAR_CHANNELS)} pillar channels")
        if self.alignment.num_samples < 2:
            raise ValidationError("alignment.num_samples must be >= 2")
        if self.alignment.normalization not in ("mean", "sum"):
            raise ValidationError("alignment.normalization must be 'mean' or 'sum'")
        self.world.params()
        self.grid.ego()
        self.grid.query()
        self.bins.bins()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def section_hash(self, sections=None) -> str:
        d = self.to_dict()
        keep = [s for s in SECTIONS if s != "io"] if sections is None else list(sections)
        blob = json.dumps({s: d[s] for s in keep}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def config_hash(self) -> str:
        return self.section_hash()

    @property
    def data_hash(self) -> str:
        return self.section_hash(DATA_SECTIONS)

    def set_value(self, section: str, key: str, raw) -> None:
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ValidationError(f"unknown config key {section}.{key}")
        setattr(sec, key, _coerce(raw, getattr(sec, key), f"{section}.{key}"))

    def override(self, assignments) -> "RunConfig":
        for a in assignments or ():
            if "=" not in a or "." not in a.split("=", 1)[0]:
                raise ValidationError(f"override {a!r} must look like section.key=value")
            lhs, rhs = a.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            self.set_value(sec, key, rhs.strip())
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for sec, vals in d.items():
            for k, v in vals.items():
                cfg.set_value(sec, k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        cfg = cls()
        for sec in parser.sections():
            for k, v in parser.items(sec):
                cfg.set_value(sec, k, v)
        return cfg

    def dump(self, path) -> None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec, vals in self.to_dict().items():
            parser[sec] = {k: str(v) for k, v in vals.items()}
        with open(path, "w") as fh:
            parser.write(fh)


def _coerce(raw, current, name):
    if not isinstance(raw, str):
        raw_s = raw
    else:
        raw_s = raw.strip()
    try:
        if isinstance(current, bool):
            if isinstance(raw_s, bool):
                return raw_s
            low = str(raw_s).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw_s)
        if isinstance(current, int):
            f = float(raw_s)
            if f != int(f):
                raise ValueError(raw_s)
            return int(f)
        if isinstance(current, float):
            return float(raw_s)
        return str(raw_s)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad value {raw!r} for {name}") from exc


def write_default(path) -> None:
    RunConfig().dump(Path(path))
