"""Experiment configuration: YAML schema, loading, and validation.

Example::

    seed: 0
    output_dir: runs/gender_geometric
    attribute: gender              # gender | age | ethnicity
    engine: geometric              # baseline | undersample | geometric | vae | stargan
    datasets:
      utkface: {images: data/UTKFace}
      lfwa: {attributes: data/lfw_attributes.txt, images: data/lfw}
      celeba: {attributes: data/list_attr_celeba.txt, images: data/img_align_celeba}
    preprocess: {size: 75, train: 0.6, val: 0.2, test: 0.2}
    engine_config:
      geometric: {max_rotation_deg: 10, zoom_min: 1.1, zoom_max: 1.2, hflip_prob: 0.5}
    classifier: {backbone: inception_v3, pretrained: true, batch: 64, epochs: 25}
    evaluation:
      native: true
      external: {lfwa: 2000, celeba: 4000}     # balanced samples per class
      extra_dumps: []                          # [{path: ..., dataset: lfwa}]
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augment import GeometricParams
from .classifier import ClassifierTrainConfig
from .errors import ConfigError
from .ingest import ATTRIBUTES
from .stargan import StarganTrainConfig
from .vae import VaeTrainConfig

ENGINES = ("baseline", "undersample", "geometric", "vae", "stargan")
ENGINE_CONFIG_TYPES = {"geometric": GeometricParams, "vae": VaeTrainConfig, "stargan": StarganTrainConfig}
DATASET_KEYS = {"utkface": ("images",), "lfwa": ("attributes", "images"), "celeba": ("attributes", "images")}
NATIVE = "utkface"


@dataclass
class ExperimentConfig:
    attribute: str
    engine: str
    datasets: dict[str, dict[str, Any]]
    seed: int = 0
    output_dir: str = "runs/experiment"
    preprocess: dict[str, Any] = field(default_factory=dict)
    engine_config: dict[str, dict[str, Any]] = field(default_factory=dict)
    classifier: dict[str, Any] = field(default_factory=dict)
    evaluation: dict[str, Any] = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> "ExperimentConfig":
        errors = validate_config(raw, base_dir)
        if errors:
            raise ConfigError(errors)
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known}, base_dir=str(base_dir))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def path(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # typed views ----------------------------------------------------------------
    def engine_block(self) -> dict[str, Any]:
        return dict(self.engine_config.get(self.engine) or {})

    def classifier_config(self, seed: int) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(**{"seed": seed, **self.classifier})

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        p = self.preprocess
        return (p.get("train", 0.6), p.get("val", 0.2), p.get("test", 0.2))

    @property
    def image_size(self) -> int:
        return int(self.preprocess.get("size", 75))

    def external_targets(self) -> dict[str, int]:
        ext = dict(self.evaluation.get("external") or {})
        # the celebA attribute table has no ethnicity column
        return {k: int(v) for k, v in ext.items() if not (k == "celeba" and self.attribute == "ethnicity")}


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return ExperimentConfig.from_dict(raw, path.parent)


def _check_dataclass_block(name, block, cls, errors):
    if not isinstance(block, Mapping):
        errors.append(f"{name}: must be a mapping")
        return
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(block) - fields)
    if unknown:
        errors.append(f"{name}: unknown keys {unknown}")
        return
    try:
        cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in block.items()})
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")


def validate_config(raw: Mapping[str, Any] | ExperimentConfig, base_dir: str | Path = ".") -> list[str]:
    """Every structural and referential problem in ``raw``; an empty list means valid.

    Paths are resolved against ``base_dir`` and must exist. Nothing is
    written or created.
    """
    if isinstance(raw, ExperimentConfig):
        base_dir = raw.base_dir
        raw = raw.to_dict()
    errors: list[str] = []
    base = Path(base_dir)
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        errors.append(f"unknown top-level keys {unknown}")
    for key in ("attribute", "engine", "datasets"):
        if key not in raw:
            errors.append(f"missing required key {key!r}")

    attribute = raw.get("attribute")
    if "attribute" in raw and attribute not in ATTRIBUTES:
        errors.append(f"attribute must be one of {sorted(ATTRIBUTES)}, got {attribute!r}")
    engine = raw.get("engine")
    if "engine" in raw and engine not in ENGINES:
        errors.append(f"engine must be one of {list(ENGINES)}, got {engine!r}")
    if not isinstance(raw.get("seed", 0), int) or isinstance(raw.get("seed", 0), bool):
        errors.append("seed must be an integer")

    datasets = raw.get("datasets") or {}
    if not isinstance(datasets, Mapping):
        errors.append("datasets: must be a mapping")
        datasets = {}
    elif "datasets" in raw and NATIVE not in datasets:
        errors.append(f"datasets: the native dataset {NATIVE!r} is required")
    for name, block in datasets.items():
        if name not in DATASET_KEYS:
            errors.append(f"datasets.{name}: unknown dataset (expected {sorted(DATASET_KEYS)})")
            continue
        if not isinstance(block, Mapping):
            errors.append(f"datasets.{name}: must be a mapping")
            continue
        for key in DATASET_KEYS[name]:
            if key not in block:
                errors.append(f"datasets.{name}.{key}: missing")
                continue
            p = Path(block[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                errors.append(f"datasets.{name}.{key}: path does not exist: {p}")

    engine_config = raw.get("engine_config") or {}
    if not isinstance(engine_config, Mapping):
        errors.append("engine_config: must be a mapping keyed by engine name")
    else:
        for name, block in engine_config.items():
            if name != engine:
                errors.append(f"engine_config.{name}: block does not match engine {engine!r}")
            elif name in ENGINE_CONFIG_TYPES:
                _check_dataclass_block(f"engine_config.{name}", block or {}, ENGINE_CONFIG_TYPES[name], errors)
            elif block:
                errors.append(f"engine_config.{name}: engine {name!r} takes no options")

    if "classifier" in raw:
        _check_dataclass_block("classifier", raw["classifier"] or {}, ClassifierTrainConfig, errors)

    pre = raw.get("preprocess") or {}
    if not isinstance(pre, Mapping):
        errors.append("preprocess: must be a mapping")
    else:
        unknown = sorted(set(pre) - {"size", "train", "val", "test", "max_records"})
        if unknown:
            errors.append(f"preprocess: unknown keys {unknown}")
        fr = [pre.get(k, d) for k, d in (("train", 0.6), ("val", 0.2), ("test", 0.2))]
        if any(not isinstance(f, (int, float)) or f <= 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            errors.append(f"preprocess: split fractions must be positive and sum to 1, got {fr}")
        if not isinstance(pre.get("size", 75), int) or pre.get("size", 75) < 11:
            errors.append("preprocess.size: must be an integer >= 11")

    ev = raw.get("evaluation") or {}
    if not isinstance(ev, Mapping):
        errors.append("evaluation: must be a mapping")
    else:
        for name, n in (ev.get("external") or {}).items():
            if name not in datasets or name == NATIVE:
                errors.append(f"evaluation.external.{name}: not a configured external dataset")
            if not isinstance(n, int) or n < 1:
                errors.append(f"evaluation.external.{name}: per-class count must be a positive integer")
        for i, dump in enumerate(ev.get("extra_dumps") or []):
            if not isinstance(dump, Mapping) or "path" not in dump or "dataset" not in dump:
                errors.append(f"evaluation.extra_dumps[{i}]: needs 'path' and 'dataset'")
                continue
            p = Path(dump["path"])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                errors.append(f"evaluation.extra_dumps[{i}].path: does not exist: {p}")
    return errors
