"""Rebalancing by random undersampling and by label-preserving geometric transforms."""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyClass, GeneratorFailure, ShapeMismatch
from .ingest import FaceRecord, attribute_classes
from .preprocess import CANONICAL_SHAPE, ImageSet


@dataclass(frozen=True)
class GeometricParams:
    max_rotation_deg: float = 10.0
    zoom_min: float = 1.1
    zoom_max: float = 1.2
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.max_rotation_deg < 90:
            raise ValueError(f"max_rotation_deg must be in [0, 90), got {self.max_rotation_deg}")
        if not 1 <= self.zoom_min <= self.zoom_max:
            raise ValueError(f"need 1 <= zoom_min <= zoom_max, got {self.zoom_min}, {self.zoom_max}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError(f"hflip_prob must be a probability, got {self.hflip_prob}")


@dataclass(frozen=True)
class GeometricDraw:
    rotation_deg: float
    zoom: float
    flip: bool


def sample_geometric(params: GeometricParams, rng: np.random.Generator) -> GeometricDraw:
    # rotation, zoom and flip are always composed, each drawn independently
    return GeometricDraw(
        rotation_deg=float(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)),
        zoom=float(rng.uniform(params.zoom_min, params.zoom_max)),
        flip=bool(rng.random() < params.hflip_prob),
    )


def apply_geometric(image: np.ndarray, draw: GeometricDraw) -> np.ndarray:
    """Center-anchored rotate + zoom, edge-replicated borders, then optional horizontal flip."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 image, got {image.shape}")
    if draw.rotation_deg != 0 or draw.zoom != 1:
        h, w = image.shape[:2]
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        t = np.deg2rad(draw.rotation_deg)
        # maps output (row, col) to input (row, col): inverse rotation, then shrink by zoom
        rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]]) / draw.zoom
        offset = center - rot @ center
        image = np.stack([
            ndimage.affine_transform(image[..., c], rot, offset=offset, order=1, mode="nearest")
            for c in range(3)
        ], axis=-1)
    if draw.flip:
        image = image[:, ::-1]
    return np.clip(image, 0.0, 1.0)


def geometric_transform(image: np.ndarray, params: GeometricParams,
                        seed: int | np.random.Generator) -> tuple[np.ndarray, GeometricDraw]:
    """Randomly rotate, zoom and flip a canonical image; returns the image and the draw used."""
    if np.shape(image) != CANONICAL_SHAPE:
        raise ShapeMismatch(f"expected {CANONICAL_SHAPE}, got {np.shape(image)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draw = sample_geometric(params, rng)
    return apply_geometric(image, draw), draw


# class balancing ---------------------------------------------------------------

class BalanceMode(str, Enum):
    TO_MINORITY = "ToMinority"
    TO_MAJORITY = "ToMajority"


@dataclass(frozen=True)
class BalancePlan:
    targets: Mapping[str, int]
    mode: BalanceMode | None = None

    @classmethod
    def from_counts(cls, counts: Mapping[str, int], mode: BalanceMode) -> "BalancePlan":
        n = min(counts.values()) if mode is BalanceMode.TO_MINORITY else max(counts.values())
        return cls({c: n for c in counts}, mode)


def class_counts(records: Sequence[FaceRecord], attribute: str,
                 classes: Sequence[str] | None = None) -> dict[str, int]:
    classes = attribute_classes(attribute) if classes is None else classes
    tally = Counter(r.label(attribute) for r in records)
    return {c: tally.get(c, 0) for c in classes}


def _by_class(records, attribute, classes):
    groups = {c: [] for c in classes}
    for i, r in enumerate(records):
        label = r.label(attribute)
        if label in groups:
            groups[label].append(i)
    for c, idx in groups.items():
        if not idx:
            raise EmptyClass(f"class {c!r} of {attribute!r} has no records")
    return groups


def undersample(train: Sequence[FaceRecord], attribute: str, seed: int,
                classes: Sequence[str] | None = None) -> list[FaceRecord]:
    """Randomly drop records until every class matches the smallest one.

    Records without a label for ``attribute`` are dropped. Output keeps input order.
    """
    classes = attribute_classes(attribute) if classes is None else classes
    groups = _by_class(train, attribute, classes)
    n = min(len(idx) for idx in groups.values())
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = groups[c]
        keep.extend(idx if len(idx) == n else rng.choice(idx, size=n, replace=False).tolist())
    return [train[i] for i in sorted(keep)]


Generator = Callable[[str, int], Sequence[FaceRecord]]


def balance_by_generation(train: Sequence[FaceRecord], attribute: str, generator: Generator,
                          classes: Sequence[str] | None = None,
                          plan: BalancePlan | None = None) -> list[FaceRecord]:
    """Top every class up to the majority count (or ``plan`` targets) with generated records.

    ``generator(cls, count)`` must return ``count`` synthetic records labelled
    ``cls``. All original records are kept, in front of the generated ones.
    """
    classes = attribute_classes(attribute) if classes is None else classes
    _by_class(train, attribute, classes)
    counts = class_counts(train, attribute, classes)
    plan = plan or BalancePlan.from_counts(counts, BalanceMode.TO_MAJORITY)
    out = [r for r in train if r.label(attribute) in counts]
    for c in classes:
        deficit = plan.targets.get(c, counts[c]) - counts[c]
        if deficit <= 0:
            continue
        try:
            made = list(generator(c, deficit))
        except GeneratorFailure:
            raise
        except Exception as exc:
            raise GeneratorFailure(c, repr(exc)) from exc
        if len(made) != deficit:
            raise GeneratorFailure(c, f"asked for {deficit} records, got {len(made)}")
        bad = [r for r in made if r.label(attribute) != c or not r.synthetic]
        if bad:
            raise GeneratorFailure(c, f"{len(bad)} records not flagged synthetic with label {c!r}")
        out.extend(made)
    return out


class GeometricGenerator:
    """Generator callback that writes geometrically transformed copies into an ``ImageSet``.

    Source images for class ``c`` are drawn uniformly (with replacement) from
    the real records of that class; synthetic records inherit every label of
    their source.
    """

    engine = "geometric"

    def __init__(self, images: ImageSet, attribute: str, params: GeometricParams = GeometricParams()):
        self.images = images
        self.attribute = attribute
        self.params = params
        self._real = [r for r in images.records if not r.synthetic]

    def __call__(self, cls: str, count: int) -> list[FaceRecord]:
        pool = [r for r in self._real if r.label(self.attribute) == cls]
        if not pool:
            raise GeneratorFailure(cls, "no source images of this class")
        # one child stream per class keeps results independent of class order
        rng = np.random.default_rng([self.params.seed, _stable_hash(cls)])
        out = []
        for k, i in enumerate(rng.integers(len(pool), size=count)):
            src = pool[int(i)]
            image, draw = geometric_transform(self.images.image(src.image_ref), self.params, rng)
            rec = dataclasses.replace(
                src,
                image_ref=f"geometric/{self.attribute}/{cls}/{k:06d}",
                synthetic=True,
                provenance={"engine": self.engine, "seed": self.params.seed, "source": src.image_ref,
                            "rotation_deg": round(draw.rotation_deg, 6), "zoom": round(draw.zoom, 6),
                            "flip": draw.flip},
            )
            self.images.add(rec, image)
            out.append(rec)
        return out


def _stable_hash(text: str) -> int:
    return int.from_bytes(text.encode("utf-8"), "little") % (2**63)
