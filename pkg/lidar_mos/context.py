"""
Run configuration

Every key is declared once in CONFIG_KEYS with its default and type. Values
resolve in order (later wins): defaults, mos_config.json at the project root,
the file named by --config or LIDAR_MOS_CONFIG, --set key=value overrides,
then the dedicated flags (--seed, --threads, --out).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .cylvoxel import CylindricalGridSpec
from .errors import ConfigError
from .kitti_io import SequenceConfig, SequenceLayout
from .loopclosure import LoopConfig
from .loss import LossConfig
from .net.params import STAGE_COUNT, ModelConfig
from .odometry import OdometryConfig
from .residual import SpatialDiffParams
from .synth import SCENARIOS, SensorModel
from .train import DEFAULT_WEIGHT_CLAMP, TrainConfig

_PROJECT_ROOT = Path(__file__).resolve().parent.parent
_CONFIG_PATH = _PROJECT_ROOT / "mos_config.json"
CONFIG_ENV = "LIDAR_MOS_CONFIG"


@dataclass(frozen=True)
class ConfigKey:
    name: str
    default: Any
    kind: str  # int | float | bool | str | int_list | float_list
    help: str
    nullable: bool = False

    def check(self, value: Any) -> Any:
        """Validated (and normalised) value, or ConfigError"""
        if value is None:
            if self.nullable:
                return None
            raise ConfigError(f"{self.name} may not be null")
        if self.kind == "bool":
            if not isinstance(value, bool):
                raise ConfigError(f"{self.name} expects true/false, got {value!r}")
            return value
        if self.kind == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{self.name} expects an integer, got {value!r}")
            return value
        if self.kind == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{self.name} expects a number, got {value!r}")
            value = float(value)
            if math.isnan(value):
                raise ConfigError(f"{self.name} may not be NaN")
            return value
        if self.kind == "str":
            if not isinstance(value, str):
                raise ConfigError(f"{self.name} expects a string, got {value!r}")
            return value
        if self.kind in ("int_list", "float_list"):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{self.name} expects a list, got {value!r}")
            item = ConfigKey(self.name, None, self.kind.removesuffix("_list"), self.help)
            return [item.check(v) for v in value]
        raise ConfigError(f"{self.name}: unknown kind {self.kind}")


_KEYS = [
    # grid
    ConfigKey("grid.h", 24, "int", "radius bins (divisible by 8)"),
    ConfigKey("grid.w", 32, "int", "azimuth bins (divisible by 8)"),
    ConfigKey("grid.l", 8, "int", "height bins (divisible by 8)"),
    ConfigKey("grid.rho_min", 0.0, "float", "inner radius of the grid, meters"),
    ConfigKey("grid.rho_max", 40.0, "float", "outer radius of the grid, meters"),
    ConfigKey("grid.z_min", -3.0, "float", "lowest height, meters"),
    ConfigKey("grid.z_max", 5.0, "float", "highest height, meters"),
    # model
    ConfigKey("model.point_feature_dim", 8, "int", "per-point feature width C"),
    ConfigKey("model.mlp_hidden_sizes", [16], "int_list", "hidden widths of the point MLP"),
    ConfigKey("model.stem_channels", 8, "int", "channels after the stem convolution"),
    ConfigKey("model.stage_channels", [8, 12, 16], "int_list", "channels of the three downsampling stages"),
    ConfigKey("model.ddcm_kernel", 3, "int", "length of the rank-1 context kernels"),
    ConfigKey("model.refine_hidden", 16, "int", "hidden width of the point refinement head"),
    ConfigKey("model.residual_frames", 3, "int", "number of residual scans k"),
    ConfigKey("model.num_classes", 2, "int", "output classes"),
    ConfigKey("model.dtype", "float32", "str", "float32 for training, float64 for gradient checks"),
    ConfigKey("model.leaky_slope", 0.1, "float", "negative slope of LeakyReLU"),
    # loss
    ConfigKey("loss.alpha", 1.0, "float", "weight of the point-level cross-entropy"),
    ConfigKey("loss.beta", 1.0, "float", "weight of the voxel-level loss"),
    ConfigKey("loss.class_weights", None, "float_list", "per-class CE weights; null = inverse frequency",
              nullable=True),
    ConfigKey("loss.weight_clamp", list(DEFAULT_WEIGHT_CLAMP), "float_list", "clamp range of inverse-frequency weights"),
    # train
    ConfigKey("train.epochs", 30, "int", "training epochs"),
    ConfigKey("train.learning_rate", 1e-3, "float", "Adam step size"),
    ConfigKey("train.beta1", 0.9, "float", "Adam first-moment decay"),
    ConfigKey("train.beta2", 0.999, "float", "Adam second-moment decay"),
    ConfigKey("train.epsilon", 1e-8, "float", "Adam denominator epsilon"),
    ConfigKey("train.shuffle", True, "bool", "shuffle samples each epoch (seeded)"),
    # loop closure
    ConfigKey("loop.rings", 20, "int", "descriptor rings R"),
    ConfigKey("loop.sectors", 60, "int", "descriptor sectors S"),
    ConfigKey("loop.rho_max", 40.0, "float", "descriptor radius, meters"),
    ConfigKey("loop.candidates", 5, "int", "ring-key candidates verified per query"),
    ConfigKey("loop.time_gap_min", 30.0, "float", "minimum age of a candidate keyframe, seconds"),
    ConfigKey("loop.accept_threshold", 0.9, "float", "minimum column similarity of a loop"),
    ConfigKey("loop.keyframe_every", 5, "int", "admit every F-th frame as keyframe"),
    ConfigKey("loop.mask_moving", True, "bool", "drop moving points from descriptors"),
    # baseline
    ConfigKey("baseline.neighbor_radius", 1.0, "float", "neighbour search radius, meters"),
    ConfigKey("baseline.distance_threshold", 0.5, "float", "moving if farther than this in every residual scan"),
    # map
    ConfigKey("map.voxel_downsample", 0.0, "float", "cubic voxel size for map thinning; 0 disables"),
    # synth
    ConfigKey("synth.frames", 50, "int", "frames per generated sequence"),
    ConfigKey("synth.rings", 16, "int", "sensor rings"),
    ConfigKey("synth.azimuth_bins", 360, "int", "rays per ring"),
    ConfigKey("synth.max_range", 40.0, "float", "sensor range, meters"),
    ConfigKey("synth.range_jitter", 0.0, "float", "Gaussian range noise sigma, meters"),
    ConfigKey("synth.frame_rate", 10.0, "float", "frames per second"),
    ConfigKey("synth.scenario", "street", "str", f"one of {', '.join(sorted(SCENARIOS))}"),
    # odometry
    ConfigKey("odom.iterations", 20, "int", "ICP iterations per frame"),
    ConfigKey("odom.max_correspondence", 2.0, "float", "ICP correspondence cutoff, meters"),
    # paths and run
    ConfigKey("paths.motion_class_ids", list(range(252, 260)), "int_list", "semantic ids mapped to Moving"),
    ConfigKey("paths.ignore_class_ids", [0, 1], "int_list", "semantic ids mapped to Ignore"),
    ConfigKey("paths.out", "out", "str", "output directory"),
    ConfigKey("seed", 0, "int", "seed for initialisation, shuffling and generation"),
    ConfigKey("threads", 1, "int", "worker threads"),
]

CONFIG_KEYS: dict[str, ConfigKey] = {k.name: k for k in _KEYS}

# Config key prefixes each command reads
COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "synth-gen": ("synth.", "seed", "threads", "paths.out"),
    "baseline-diff": ("baseline.", "model.residual_frames", "paths.", "threads"),
    "train": ("grid.", "model.", "loss.", "train.", "paths.", "seed", "threads"),
    "segment": ("paths.", "threads"),
    "eval-mos": ("paths.",),
    "eval-odom": ("odom.", "paths.", "threads"),
    "loopclose": ("loop.", "synth.frame_rate", "paths."),
    "clean-map": ("map.", "paths."),
}


def keys_for(command: str) -> list[ConfigKey]:
    prefixes = COMMAND_KEYS.get(command, ())
    return [k for k in _KEYS if any(k.name == p or (p.endswith(".") and k.name.startswith(p)) for p in prefixes)]


def _read_json(path: Path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def parse_override(text: str) -> tuple[str, Any]:
    """key=value with the value parsed as JSON, falling back to a bare string"""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


@dataclass
class RunConfig:
    """Resolved, validated configuration of one command run"""
    values: dict[str, Any] = field(default_factory=lambda: {k.name: k.default for k in _KEYS})
    sources: list[str] = field(default_factory=lambda: ["defaults"])

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def update(self, data: Mapping[str, Any], source: str) -> None:
        for name, value in data.items():
            if name not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {name!r} (from {source})")
            self.values[name] = CONFIG_KEYS[name].check(value)
        self.sources.append(source)

    def resolved(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def validate(self) -> "RunConfig":
        v = self.values
        for dim in ("grid.h", "grid.w", "grid.l"):
            if v[dim] < 1 or v[dim] % 8:
                raise ConfigError(f"{dim}={v[dim]} must be a positive multiple of 8 (three halving stages)")
        if not 0.0 <= v["grid.rho_min"] < v["grid.rho_max"]:
            raise ConfigError("need 0 <= grid.rho_min < grid.rho_max")
        if not v["grid.z_min"] < v["grid.z_max"]:
            raise ConfigError("need grid.z_min < grid.z_max")
        if len(v["model.stage_channels"]) != STAGE_COUNT:
            raise ConfigError(f"model.stage_channels needs {STAGE_COUNT} entries")
        if v["model.dtype"] not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        if v["loss.alpha"] < 0 or v["loss.beta"] < 0:
            raise ConfigError("loss.alpha and loss.beta must be >= 0")
        weights = v["loss.class_weights"]
        if weights is not None and (len(weights) != v["model.num_classes"] or min(weights) <= 0):
            raise ConfigError("loss.class_weights needs one positive weight per class")
        clamp = v["loss.weight_clamp"]
        if len(clamp) != 2 or not 0 < clamp[0] <= clamp[1]:
            raise ConfigError("loss.weight_clamp must be [low, high] with 0 < low <= high")
        overlap = set(v["paths.motion_class_ids"]) & set(v["paths.ignore_class_ids"])
        if overlap:
            raise ConfigError(f"class ids both moving and ignored: {sorted(overlap)}")
        for name in ("loop.rings", "loop.sectors", "loop.candidates", "loop.keyframe_every",
                     "train.epochs", "odom.iterations", "synth.frames", "synth.rings",
                     "synth.azimuth_bins", "threads"):
            if v[name] < 1:
                raise ConfigError(f"{name} must be >= 1, got {v[name]}")
        for name in ("loop.rho_max", "synth.max_range", "synth.frame_rate", "odom.max_correspondence",
                     "baseline.neighbor_radius", "baseline.distance_threshold", "train.learning_rate"):
            if not v[name] > 0:
                raise ConfigError(f"{name} must be > 0, got {v[name]}")
        if v["loop.time_gap_min"] < 0 or v["synth.range_jitter"] < 0 or v["map.voxel_downsample"] < 0:
            raise ConfigError("loop.time_gap_min, synth.range_jitter and map.voxel_downsample must be >= 0")
        if v["model.residual_frames"] < 0:
            raise ConfigError("model.residual_frames must be >= 0")
        if v["synth.scenario"] not in SCENARIOS:
            raise ConfigError(f"synth.scenario must be one of {sorted(SCENARIOS)}")
        return self

    # === Builders ===

    def grid_spec(self) -> CylindricalGridSpec:
        v = self.values
        return CylindricalGridSpec(
            bins=(v["grid.h"], v["grid.w"], v["grid.l"]),
            rho_range=(v["grid.rho_min"], v["grid.rho_max"]),
            z_range=(v["grid.z_min"], v["grid.z_max"]),
        )

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            point_feature_dim=v["model.point_feature_dim"],
            mlp_hidden_sizes=tuple(v["model.mlp_hidden_sizes"]),
            stem_channels=v["model.stem_channels"],
            stage_channels=tuple(v["model.stage_channels"]),
            ddcm_kernel=v["model.ddcm_kernel"],
            refine_hidden=v["model.refine_hidden"],
            residual_frames=v["model.residual_frames"],
            num_classes=v["model.num_classes"],
            leaky_slope=v["model.leaky_slope"],
            dtype=v["model.dtype"],
            seed=v["seed"],
        )

    def loss_config(self, fallback_weights: Iterable[float] | None = None) -> LossConfig:
        """Explicit class weights, else fallback_weights, else uniform"""
        v = self.values
        weights = v["loss.class_weights"]
        if weights is None:
            weights = list(fallback_weights) if fallback_weights is not None else [1.0] * v["model.num_classes"]
        return LossConfig(alpha=v["loss.alpha"], beta=v["loss.beta"], class_weights=tuple(weights))

    def weight_clamp(self) -> tuple[float, float]:
        lo, hi = self.values["loss.weight_clamp"]
        return float(lo), float(hi)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            learning_rate=v["train.learning_rate"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            epsilon=v["train.epsilon"],
            shuffle=v["train.shuffle"],
            seed=v["seed"],
        )

    def loop_config(self) -> LoopConfig:
        v = self.values
        return LoopConfig(
            rings=v["loop.rings"],
            sectors=v["loop.sectors"],
            rho_max=v["loop.rho_max"],
            candidates=v["loop.candidates"],
            time_gap_min=v["loop.time_gap_min"],
            accept_threshold=v["loop.accept_threshold"],
            keyframe_every=v["loop.keyframe_every"],
            mask_moving=v["loop.mask_moving"],
        )

    def spatial_params(self) -> SpatialDiffParams:
        return SpatialDiffParams(
            neighbor_radius=self.values["baseline.neighbor_radius"],
            distance_threshold=self.values["baseline.distance_threshold"],
        )

    def odometry_config(self) -> OdometryConfig:
        return OdometryConfig(
            iterations=self.values["odom.iterations"],
            max_correspondence=self.values["odom.max_correspondence"],
        )

    def sensor_model(self) -> SensorModel:
        v = self.values
        return SensorModel(
            rings=v["synth.rings"],
            azimuth_bins=v["synth.azimuth_bins"],
            max_range=v["synth.max_range"],
            range_jitter=v["synth.range_jitter"],
        )

    def sequence_config(self, layout: SequenceLayout) -> SequenceConfig:
        return layout.sequence_config(self.values["paths.motion_class_ids"], self.values["paths.ignore_class_ids"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["paths.out"])

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def threads(self) -> int:
        return self.values["threads"]


def load_config(config_path: Path | str | None = None, overrides: Iterable[str] = (),
                seed: int | None = None, threads: int | None = None, out: Path | str | None = None,
                project_config: Path | None = _CONFIG_PATH) -> RunConfig:
    """
    Resolve and validate the run configuration

    Raises:
        ConfigError: Unknown key, wrong type, or failed cross-field validation
    """
    cfg = RunConfig()
    if project_config is not None and Path(project_config).exists():
        cfg.update(_read_json(Path(project_config)), str(project_config))
    config_path = config_path or os.getenv(CONFIG_ENV) or None
    if config_path is not None:
        cfg.update(_read_json(Path(config_path)), str(config_path))
    parsed = dict(parse_override(o) for o in overrides)
    if parsed:
        cfg.update(parsed, "--set")
    flags = {"seed": seed, "threads": threads, "paths.out": None if out is None else str(out)}
    flags = {k: val for k, val in flags.items() if val is not None}
    if flags:
        cfg.update(flags, "flags")
    return cfg.validate()
