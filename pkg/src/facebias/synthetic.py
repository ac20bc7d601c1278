"""Small synthetic stand-ins for the real datasets, for smoke runs and tests.

Images are smooth coloured blobs whose hue and size depend on the labels, so
the classifiers have something learnable. File layouts mimic the real
distributions: UTKFace-style file names, an LFWA+ score table and a CelebA
``list_attr_celeba.txt``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

GENDER_TINT = np.array([[0.9, 0.3, 0.3], [0.3, 0.3, 0.9]])
RACE_TINT = np.array([[0.9, 0.8, 0.7], [0.3, 0.2, 0.1], [0.8, 0.7, 0.4], [0.6, 0.4, 0.3], [0.5, 0.5, 0.5]])


def blob_image(rng: np.random.Generator, size: int = 75, gender: int = 0, race: int = 0,
               old: bool = False) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size] / size
    cy, cx = rng.uniform(0.4, 0.6, 2)
    radius = (0.22 if old else 0.15) + rng.uniform(-0.03, 0.03)
    mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))[..., None]
    colour = 0.5 * GENDER_TINT[gender] + 0.5 * RACE_TINT[race]
    noise = rng.normal(0, 0.03, (size, size, 3))
    return np.clip(0.15 + mask * colour + noise, 0, 1)


def _save(image: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(image * 255).astype(np.uint8)).save(path)


def make_utkface(directory: str | Path, n: int, seed: int = 0, size: int = 90,
                 old_frac: float = 0.3, other_frac: float = 0.05) -> Path:
    """Write ``n`` images named ``<age>_<gender>_<race>_<id>.jpg.chip.jpg``."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    for i in range(n):
        gender = int(rng.random() < 0.45)
        race = 4 if rng.random() < other_frac else int(rng.choice(4, p=[0.45, 0.2, 0.15, 0.2]))
        age = int(rng.integers(65, 95)) if rng.random() < old_frac else int(rng.integers(1, 65))
        image = blob_image(rng, size, gender, race, age >= 65)
        _save(image, directory / f"{age}_{gender}_{race}_{i:08d}.jpg.chip.jpg")
    return directory


LFWA_COLUMNS = ("Male", "Asian", "White", "Black", "Baby", "Child", "Youth", "Middle Aged", "Senior", "Indian")


def make_lfwa(directory: str | Path, n: int, seed: int = 1, size: int = 90) -> tuple[Path, Path]:
    """Write LFW-style images plus a tab-separated attribute score table; returns (table, image dir)."""
    directory = Path(directory)
    images = directory / "images"
    rng = np.random.default_rng(seed)
    lines = ["# lfw attributes file (synthetic)", "#\t" + "\t".join(("person", "imagenum", *LFWA_COLUMNS))]
    race_col = {0: "White", 1: "Black", 2: "Asian", 3: "Indian"}
    for i in range(n):
        gender = int(rng.random() < 0.5)
        race = int(rng.integers(4))
        old = bool(rng.random() < 0.5)
        scores = {c: rng.uniform(-2.0, -0.1) for c in LFWA_COLUMNS}
        scores["Male"] = rng.uniform(0.2, 2) * (1 if gender == 0 else -1)
        scores[race_col[race]] = rng.uniform(0.5, 2.5)
        scores["Senior" if old else "Youth"] = rng.uniform(0.5, 2.5)
        person = f"Person {i:05d}"
        lines.append("\t".join((person, "1", *(f"{scores[c]:.4f}" for c in LFWA_COLUMNS))))
        folder = person.replace(" ", "_")
        _save(blob_image(rng, size, gender, race, old), images / folder / f"{folder}_0001.jpg")
    table = directory / "lfw_attributes.txt"
    table.write_text("\n".join(lines) + "\n")
    return table, images


def make_celeba(directory: str | Path, n: int, seed: int = 2, size: int = 90) -> tuple[Path, Path]:
    """Write CelebA-style images plus ``list_attr_celeba.txt``; returns (table, image dir)."""
    directory = Path(directory)
    images = directory / "img_align_celeba"
    rng = np.random.default_rng(seed)
    names = ["5_o_Clock_Shadow", "Male", "Smiling", "Young"]
    lines = [str(n), " ".join(names)]
    for i in range(n):
        gender = int(rng.random() < 0.5)
        old = bool(rng.random() < 0.5)
        values = [int(rng.choice([-1, 1])), 1 if gender == 0 else -1, int(rng.choice([-1, 1])), -1 if old else 1]
        name = f"{i + 1:06d}.jpg"
        lines.append(name + " " + " ".join(f"{v:2d}" for v in values))
        _save(blob_image(rng, size, gender, int(rng.integers(4)), old), images / name)
    table = directory / "list_attr_celeba.txt"
    table.write_text("\n".join(lines) + "\n")
    return table, images
