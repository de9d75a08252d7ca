"""Experiment configuration: `key = value` files with `[section]` headers, or whole YAML / JSON files.

Each value is read as a YAML scalar, so `0.3`, `true`, `[0, 1, 2, 2]` and `null` mean what they look like.
Sections map onto the typed records of the package and unknown sections or keys are rejected::

    [scene]
    noise_rate = 0.3
    [train]
    mode = cromss_midF
    epochs = 60
"""
import configparser
import json
import logging
import os
from dataclasses import dataclass, field, asdict, replace
from typing import Any, Dict, Optional
from nlss.utils import exporter, parse_scalar, read_config_file, dataclass_from_dict, ConfigError
from nlss.data import SceneSpec
from nlss.models import MiniUNetConfig
from nlss.selection import SelectionSchedule
from nlss.smoothing import SmoothingParams
from nlss.train import TrainConfig


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

RESOLVED = "config.resolved"
# keys of the [model] section that are taken from the scene instead
MODEL_DERIVED = ("in_channels", "num_classes", "input_size")


@export
@dataclass
class OutputConfig:
    dir: str = "nlss-out"
    data: Optional[str] = None
    downstream_data: Optional[str] = None

    @property
    def data_dir(self) -> str:
        return self.data or os.path.join(self.dir, "data")

    @property
    def downstream_dir(self) -> str:
        return self.downstream_data or os.path.join(self.dir, "downstream")


def default_downstream(scene: SceneSpec) -> Dict[str, Any]:
    """Same sensors and appearance as the pretraining scene, clean labels and a merged class alphabet"""
    label_map = list(range(scene.num_classes - 1)) + [scene.num_classes - 2]
    return {
        "num_locations": 60,
        "num_test_locations": 40,
        "noise_rate": 0.0,
        "val_fraction": 0.0,
        "seed": scene.seed + 1000,
        "label_map": label_map,
    }


@export
@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    downstream: Optional[SceneSpec] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Dict[str, Any] = field(default_factory=dict)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.downstream is None:
            fields = asdict(self.scene)
            fields.update(default_downstream(self.scene))
            self.downstream = SceneSpec.from_dict(**fields)
        bad = sorted(set(self.model) & set(MODEL_DERIVED))
        if bad:
            raise ConfigError(f"[model] keys {bad} follow from the scene and cannot be set")
        self.model_config()

    def model_config(self, num_classes: Optional[int] = None) -> MiniUNetConfig:
        """The network shape for the scene: its channels, tile size and class count"""
        fields = dict(self.model)
        fields.update(
            in_channels=self.scene.channels,
            num_classes=num_classes or self.scene.output_classes,
            input_size=self.train.crop_size or self.scene.height,
        )
        config = dataclass_from_dict(MiniUNetConfig, fields)
        self.scene.check_divisible(config.depth)
        self.downstream.check_divisible(config.depth)
        return config

    @classmethod
    def from_sections(cls, sections: Dict[str, Dict[str, Any]]) -> "ExperimentConfig":
        """Build from `{section: {key: value}}`; the nested `schedule` and `smoothing` sections feed `train`"""
        known = {"scene", "downstream", "train", "schedule", "smoothing", "model", "output"}
        unknown = sorted(set(sections) - known)
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}, expected some of {sorted(known)}")
        scene = SceneSpec.from_dict(**sections.get("scene", {}))
        downstream = None
        if "downstream" in sections:
            fields = asdict(scene)
            fields.update(default_downstream(scene))
            fields.update(sections["downstream"])
            downstream = SceneSpec.from_dict(**fields)
        train_fields = dict(sections.get("train", {}))
        for nested in ("schedule", "smoothing"):
            if nested in train_fields:
                raise ConfigError(f"set {nested} in its own [{nested}] section")
        train_fields["schedule"] = SelectionSchedule.from_dict(**sections.get("schedule", {}))
        train_fields["smoothing"] = SmoothingParams.from_dict(**sections.get("smoothing", {}))
        model = dict(sections.get("model", {}))
        unknown = sorted(set(model) - set(MiniUNetConfig.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown MiniUNetConfig keys: {unknown}")
        return cls(
            scene=scene,
            downstream=downstream,
            train=TrainConfig.from_dict(**train_fields),
            model=model,
            output=OutputConfig(**_checked(OutputConfig, sections.get("output", {}))),
        )

    def to_sections(self) -> Dict[str, Dict[str, Any]]:
        train = asdict(self.train)
        schedule = train.pop("schedule")
        smoothing = train.pop("smoothing")
        return {
            "scene": asdict(self.scene),
            "downstream": asdict(self.downstream),
            "train": train,
            "schedule": schedule,
            "smoothing": smoothing,
            "model": asdict(self.model_config()),
            "output": asdict(self.output),
        }

    def with_overrides(self, seed: Optional[int] = None, mode: Optional[str] = None, out: Optional[str] = None):
        """Command-line overrides: `seed` sets both the scene and the training seed"""
        config = self
        if seed is not None:
            config = replace(config, scene=replace(config.scene, seed=seed), train=replace(config.train, seed=seed))
        if mode is not None:
            config = replace(config, train=replace(config.train, mode=mode))
        if out is not None:
            config = replace(config, output=replace(config.output, dir=out))
        return config

    def save(self, outfile: str):
        """Write the fully resolved configuration in the `key = value` format"""
        sections = self.to_sections()
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name, values in sections.items():
            parser[name] = {k: json.dumps(list(v) if isinstance(v, tuple) else v) for k, v in values.items()}
        with open(outfile, "w") as f:
            parser.write(f)

    def write_resolved(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, RESOLVED)
        self.save(path)
        return path

    @classmethod
    def load(cls, path: Optional[str]) -> "ExperimentConfig":
        """Read a `.cfg`/`.ini` (or any other suffix) key-value file, or a `.yml`/`.yaml`/`.json` file"""
        if path is None:
            return cls()
        if not os.path.exists(path):
            raise ConfigError(f"no config file {path}")
        if path.endswith((".yml", ".yaml", ".json")):
            sections = read_config_file(path) or {}
        else:
            sections = read_sections(path)
        if "model" in sections:
            sections["model"] = {k: v for k, v in sections["model"].items() if k not in MODEL_DERIVED}
        config = cls.from_sections(sections)
        logger.info("read configuration from %s", path)
        return config


def _checked(cls, values: Dict[str, Any]) -> Dict[str, Any]:
    unknown = sorted(set(values) - set(cls.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    return values


@export
def read_sections(path: str) -> Dict[str, Dict[str, Any]]:
    """Parse a `[section]` / `key = value` file, reading every value as a YAML scalar"""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}")
    sections = {}
    for name in parser.sections():
        try:
            sections[name] = {k: parse_scalar(v) for k, v in parser[name].items()}
        except Exception as e:
            raise ConfigError(f"{path} [{name}]: {e}")
    return sections
