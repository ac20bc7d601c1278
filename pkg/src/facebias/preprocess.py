"""Image normalization, mean faces, stratified splits and the on-disk image-set format."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import (
    CropOutOfBounds,
    EmptyImage,
    EmptyList,
    InvalidSplitSpec,
    ShapeMismatch,
    StratumTooSmall,
)
from .ingest import FaceRecord

IMAGE_SIZE = 75
CANONICAL_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)


def load_image(path: str | Path) -> np.ndarray:
    """Decode a JPEG/PNG into an RGB float array in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _as_float_rgb(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    arr = np.asarray(image)
    if arr.size == 0:
        raise EmptyImage("image has no pixels")
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def crop_resize(image, crop_box: tuple[int, int, int, int] | None = None,
                size: int = IMAGE_SIZE) -> np.ndarray:
    """Crop to ``crop_box`` = (left, top, right, bottom) and bilinearly resize to size x size.

    Accepts uint8 (0..255) or float (0..1) arrays, or a PIL image.
    """
    arr = _as_float_rgb(image)
    h, w = arr.shape[:2]
    if crop_box is not None:
        left, top, right, bottom = crop_box
        if not (0 <= left < right <= w and 0 <= top < bottom <= h):
            raise CropOutOfBounds(f"crop box {crop_box} outside {w}x{h} image")
        arr = arr[top:bottom, left:right]
    if arr.shape[:2] == (size, size):
        return np.clip(arr, 0.0, 1.0)
    channels = [
        np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F")
                   .resize((size, size), Image.Resampling.BILINEAR), dtype=np.float64)
        for c in range(3)
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


def mean_face(images: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    if len(images) == 0:
        raise EmptyList("mean_face needs at least one image")
    shape = np.shape(images[0])
    for im in images:
        if np.shape(im) != shape:
            raise ShapeMismatch(f"image shape {np.shape(im)} != {shape}")
    return np.mean(np.asarray(images, dtype=np.float64), axis=0)


# splitting --------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise InvalidSplitSpec(f"fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidSplitSpec(f"fractions must sum to 1, got {sum(fracs)!r}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Floor every share but the last, which takes the remainder.

    When the remainder overshoots its ideal share by a full record or more,
    one record moves to the floored split with the largest fractional part,
    so every count stays within one record of ``n * fraction``.
    """
    ideal = [n * f for f in fractions]
    counts = [math.floor(x) for x in ideal[:-1]]
    counts.append(n - sum(counts))
    while counts[-1] - ideal[-1] >= 1:
        i = max(range(len(counts) - 1), key=lambda j: (ideal[j] - counts[j], -j))
        counts[i] += 1
        counts[-1] -= 1
    return counts


def stratified_split(records: Sequence[FaceRecord], spec: SplitSpec,
                     strata_key: str | Callable[[FaceRecord], Hashable]):
    """Partition ``records`` into (train, val, test), stratified on ``strata_key``.

    ``strata_key`` is an attribute name ("gender", "age", "ethnicity") or a
    callable. Within each split the input order is preserved.
    """
    key = strata_key if callable(strata_key) else (lambda r: r.label(strata_key))
    strata: dict[Hashable, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        strata[key(r)].append(i)
    rng = np.random.default_rng(spec.seed)
    assignment = np.empty(len(records), dtype=np.int64)
    for stratum in sorted(strata, key=repr):
        idx = strata[stratum]
        if len(idx) < 3:
            raise StratumTooSmall(f"stratum {stratum!r} has {len(idx)} records (< 3)")
        n_train, n_val, _ = split_counts(len(idx), spec.fractions)
        perm = rng.permutation(len(idx))
        part = np.full(len(idx), 2)
        part[perm[:n_train]] = 0
        part[perm[n_train:n_train + n_val]] = 1
        assignment[idx] = part
    return tuple([records[i] for i in np.flatnonzero(assignment == k)] for k in range(3))


# image sets on disk ----------------------------------------------------------

class ImageSet:
    """Records plus their canonical image arrays, keyed by ``image_ref``."""

    MANIFEST = "manifest.jsonl"
    ARRAYS = "images.npy"
    META = "meta.json"

    def __init__(self, records: Iterable[FaceRecord] = (), images: Iterable[np.ndarray] = (),
                 meta: Mapping[str, Any] | None = None):
        self.records: list[FaceRecord] = []
        self._images: dict[str, np.ndarray] = {}
        self.meta = dict(meta or {})
        for r, im in zip(records, images, strict=True):
            self.add(r, im)

    def add(self, record: FaceRecord, image: np.ndarray) -> None:
        if record.image_ref in self._images:
            raise ValueError(f"duplicate image_ref {record.image_ref!r}")
        self.records.append(record)
        self._images[record.image_ref] = np.asarray(image, dtype=np.float32)

    def image(self, ref: str) -> np.ndarray:
        return self._images[ref]

    def subset(self, records: Iterable[FaceRecord]) -> "ImageSet":
        records = list(records)
        return ImageSet(records, [self._images[r.image_ref] for r in records], self.meta)

    def images(self, records: Iterable[FaceRecord] | None = None) -> np.ndarray:
        records = self.records if records is None else records
        if not records:
            return np.zeros((0, *CANONICAL_SHAPE), dtype=np.float32)
        return np.stack([self._images[r.image_ref] for r in records])

    def __len__(self):
        return len(self.records)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / self.MANIFEST, "w", encoding="utf-8") as fh:
            for i, r in enumerate(self.records):
                fh.write(json.dumps({"index": i, **r.to_dict()}, sort_keys=True) + "\n")
        np.save(directory / self.ARRAYS, self.images().astype(np.float32), allow_pickle=False)
        with open(directory / self.META, "w", encoding="utf-8") as fh:
            json.dump(self.meta, fh, sort_keys=True, indent=2)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "ImageSet":
        directory = Path(directory)
        with open(directory / cls.MANIFEST, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        arrays = np.load(directory / cls.ARRAYS, allow_pickle=False)
        meta_path = directory / cls.META
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        rows.sort(key=lambda d: d["index"])
        records = [FaceRecord.from_dict({k: v for k, v in d.items() if k != "index"}) for d in rows]
        return cls(records, [arrays[d["index"]] for d in rows], meta)


def preprocess_records(records: Sequence[FaceRecord], image_root: str | Path,
                       crop_boxes: Mapping[str, tuple[int, int, int, int]] | None = None,
                       size: int = IMAGE_SIZE) -> ImageSet:
    """Load, crop and resize every record's image into an ``ImageSet``.

    Without a crop box the full frame is resized; the manifest metadata
    records which happened.
    """
    image_root = Path(image_root)
    crop_boxes = crop_boxes or {}
    images = [crop_resize(load_image(image_root / r.image_ref), crop_boxes.get(r.image_ref), size)
              for r in records]
    meta = {"size": size, "resample": "bilinear",
            "crop": "per-record boxes" if crop_boxes else "full frame (no crop box supplied)"}
    return ImageSet(records, images, meta)
