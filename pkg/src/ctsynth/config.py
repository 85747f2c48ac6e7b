"""Experiment configuration files: INI sections with typed defaults.

A config file is optional; every key has a default, and loading resolves
the file against the schema so the result is fully explicit.  Unknown
sections or keys are rejected rather than ignored, and every resolved
config carries a stable content hash so runs can be compared and
reproduced.  Builder helpers turn the resolved values into the typed
dataclasses the pipeline modules consume.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .classifier import ClassifierSpec, ClassifierTrainConfig
from .networks import DiscriminatorSpec, GeneratorSpec
from .pipeline import DataPipelineConfig
from .segment import SegmentConfig
from .training import (
    TrainConfig,
    default_discriminator_spec,
    default_generator_spec,
)


class ConfigError(ValueError):
    """Unknown section/key or a value that does not parse."""


# schema: section -> key -> (type tag, default)
# type tags: int, float, bool, str, int_list, str_list, opt_float
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "data": {
        "side": ("int", 64),
        "window_low": ("float", -1000.0),
        "window_high": ("float", 1000.0),
        "segment_inputs": ("bool", True),
        "phantom_noise_hu": ("float", 20.0),
    },
    "segmentation": {
        "bins": ("int", 256),
        "erosions": ("int", 1),
        "dilations": ("int", 1),
        "kernel": ("str", "cross3"),
        "center_box_fraction": ("float", 0.75),
        "min_area_fraction": ("float", 0.005),
    },
    "gan": {
        "arch": ("str", "unet"),
        "depth": ("int", 0),
        "base_channels": ("int", 32),
        "disc_depth": ("int", 3),
        "disc_base_channels": ("int", 64),
        "steps": ("int", 1500),
        "pretrain_steps": ("int", 2500),
        "pretrain_segment": ("int", 500),
        "snapshot_every": ("int", 150),
        "batch_size": ("int", 2),
        "learning_rate": ("float", 2e-4),
        "adam_beta1": ("float", 0.5),
        "adam_beta2": ("float", 0.999),
        "cycle_weight": ("float", 10.0),
        "paper_faithful": ("bool", False),
        "seed": ("int", 0),
        "checkpoint_interval": ("int", 100),
    },
    "synthesis": {
        "count": ("int", 200),
        "remask": ("bool", True),
        "floor_snap_hu": ("opt_float", -880.0),
        "match_intensities": ("bool", False),
        "carve_from_source": ("bool", True),
        "max_reject_fraction": ("float", 0.10),
        "seed": ("int", 0),
    },
    "classifier": {
        "preset": ("str", "tiny"),
        "input_side": ("int", 0),
        "epochs": ("int", 50),
        "learning_rate": ("float", 1e-4),
        "batch_size": ("int", 16),
        "seed": ("int", 0),
    },
    "stress": {
        "k_values": ("int_list", [10, 20, 30, 40, 50]),
        "seeds": ("int_list", [0, 1, 2]),
        "n_synth": ("int", 200),
        "normals_pool": ("int", 200),
        "test_per_class": ("int", 50),
    },
    "ablation": {
        "variants": (
            "str_list",
            ["full", "no-cycle", "no-segmentation", "resnet-generator"],
        ),
        "k": ("int", 10),
        "seeds": ("int_list", [0, 1, 2]),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    hash: str

    def section(self, name: str) -> dict:
        try:
            return self.values[name]
        except KeyError as exc:
            raise ConfigError(f"no config section named {name!r}") from exc

    def get(self, section: str, key: str):
        sec = self.section(section)
        try:
            return sec[key]
        except KeyError as exc:
            raise ConfigError(f"no config key named {section}.{key}") from exc


def _parse_value(tag: str, raw: str, where: str):
    text = raw.strip()
    try:
        if tag == "int":
            return int(text)
        if tag == "float":
            return float(text)
        if tag == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tag == "str":
            return text
        if tag == "int_list":
            return [int(part.strip()) for part in text.split(",") if part.strip()]
        if tag == "str_list":
            return [part.strip() for part in text.split(",") if part.strip()]
        if tag == "opt_float":
            return None if text == "" else float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {exc}") from exc
    raise ConfigError(f"unknown schema tag {tag!r} for {where}")


def _canonical(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_canonical(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_hash(values: dict) -> str:
    lines = []
    for section in sorted(values):
        for key in sorted(values[section]):
            lines.append(f"{section}.{key}={_canonical(values[section][key])}")
    payload = "\n".join(lines).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def load_experiment_config(path: str | None = None) -> ExperimentConfig:
    """Resolve a config file (or nothing) against the schema."""
    values = {
        section: {key: default for key, (_, default) in keys.items()}
        for section, keys in SCHEMA.items()
    }
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path!r}: {exc}") from exc
        for section in parser.sections():
            if section not in SCHEMA:
                known = ", ".join(sorted(SCHEMA))
                raise ConfigError(
                    f"unknown config section [{section}] (known: {known})"
                )
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    known = ", ".join(sorted(SCHEMA[section]))
                    raise ConfigError(
                        f"unknown key {key!r} in [{section}] (known: {known})"
                    )
                tag = SCHEMA[section][key][0]
                values[section][key] = _parse_value(tag, raw, f"{section}.{key}")
    return ExperimentConfig(values=values, hash=config_hash(values))


def dump_config(cfg: ExperimentConfig) -> str:
    """Render the resolved config as INI text (the embeddable record)."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in sorted(cfg.values):
        parser[section] = {
            key: _canonical(value) for key, value in sorted(cfg.values[section].items())
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def build_segment_config(cfg: ExperimentConfig) -> SegmentConfig:
    s = cfg.section("segmentation")
    return SegmentConfig(
        bins=s["bins"],
        erosions=s["erosions"],
        dilations=s["dilations"],
        kernel=s["kernel"],
        center_box_fraction=s["center_box_fraction"],
        min_area_fraction=s["min_area_fraction"],
    )


def build_pipeline_config(cfg: ExperimentConfig) -> DataPipelineConfig:
    d = cfg.section("data")
    return DataPipelineConfig(
        side=d["side"],
        window=(d["window_low"], d["window_high"]),
        seg=build_segment_config(cfg),
        segment_inputs=d["segment_inputs"],
    )


def build_generator_spec(cfg: ExperimentConfig) -> GeneratorSpec:
    g = cfg.section("gan")
    side = cfg.get("data", "side")
    if g["depth"] == 0 and g["arch"] == "unet" and g["base_channels"] == 32:
        spec = default_generator_spec(side)
        if g["arch"] == spec.arch:
            return spec
    depth = g["depth"] if g["depth"] > 0 else default_generator_spec(side).depth
    return GeneratorSpec(
        input_side=side,
        depth=depth,
        base_channels=g["base_channels"],
        arch=g["arch"],
    )


def build_discriminator_spec(cfg: ExperimentConfig) -> DiscriminatorSpec:
    g = cfg.section("gan")
    side = cfg.get("data", "side")
    if g["disc_depth"] == default_discriminator_spec(side).depth and g[
        "disc_base_channels"
    ] == default_discriminator_spec(side).base_channels:
        return default_discriminator_spec(side)
    return DiscriminatorSpec(
        input_side=side,
        depth=g["disc_depth"],
        base_channels=g["disc_base_channels"],
    )


def build_gan_train_config(cfg: ExperimentConfig) -> TrainConfig:
    g = cfg.section("gan")
    cycle_weight = 1.0 if g["paper_faithful"] else g["cycle_weight"]
    return TrainConfig(
        steps=g["steps"],
        batch_size=g["batch_size"],
        learning_rate=g["learning_rate"],
        adam_beta1=g["adam_beta1"],
        adam_beta2=g["adam_beta2"],
        cycle_weight=cycle_weight,
        seed=g["seed"],
        checkpoint_interval=g["checkpoint_interval"],
    )


def build_classifier_spec(cfg: ExperimentConfig) -> ClassifierSpec:
    c = cfg.section("classifier")
    side = c["input_side"] if c["input_side"] > 0 else cfg.get("data", "side")
    return ClassifierSpec(preset=c["preset"], input_side=side)


def build_classifier_train_config(cfg: ExperimentConfig) -> ClassifierTrainConfig:
    c = cfg.section("classifier")
    return ClassifierTrainConfig(
        epochs=c["epochs"],
        learning_rate=c["learning_rate"],
        batch_size=c["batch_size"],
        seed=c["seed"],
    )


def build_augmentor_protocol(cfg: ExperimentConfig) -> "AugmentorProtocol":
    from .experiments import AugmentorProtocol

    g = cfg.section("gan")
    s = cfg.section("synthesis")
    cycle_weight = 1.0 if g["paper_faithful"] else g["cycle_weight"]
    return AugmentorProtocol(
        pretrain_total=g["pretrain_steps"],
        pretrain_segment=g["pretrain_segment"],
        finetune_total=g["steps"],
        finetune_segment=g["snapshot_every"],
        batch_size=g["batch_size"],
        learning_rate=g["learning_rate"],
        cycle_weight=cycle_weight,
        seed=g["seed"],
        floor_snap_hu=s["floor_snap_hu"],
        match_source_intensities=s["match_intensities"],
        carve_from_source=s["carve_from_source"],
    )
