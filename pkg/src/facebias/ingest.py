"""Parse UTKFace / LFWA+ / CelebA annotations into harmonized face records.

All three sources end up in the same label schema: a binary age class
(Young/Old), binary gender and, where the source provides it, one of four
ethnicities. Records are written as JSON lines.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import MalformedName, NegativeAge, NoPositiveScore

log = logging.getLogger(__name__)

OLD_AGE = 65


class AgeClass(str, Enum):
    YOUNG = "Young"
    OLD = "Old"


class Gender(str, Enum):
    MALE = "Male"
    FEMALE = "Female"


class Ethnicity(str, Enum):
    WHITE = "White"
    BLACK = "Black"
    ASIAN = "Asian"
    INDIAN = "Indian"


class Source(str, Enum):
    UTKFACE = "UTKFace"
    LFWA = "LFWA"
    CELEBA = "CelebA"


# attribute name -> (record field, ordered classes); the order fixes class indices
ATTRIBUTES: dict[str, tuple[str, tuple[str, ...]]] = {
    "gender": ("gender", tuple(g.value for g in Gender)),
    "age": ("age_class", tuple(a.value for a in AgeClass)),
    "ethnicity": ("ethnicity", tuple(e.value for e in Ethnicity)),
}

UTK_GENDER = {0: Gender.MALE, 1: Gender.FEMALE}
UTK_RACE = {0: Ethnicity.WHITE, 1: Ethnicity.BLACK, 2: Ethnicity.ASIAN, 3: Ethnicity.INDIAN}
UTK_RACE_OTHER = 4


def attribute_classes(attribute: str) -> tuple[str, ...]:
    try:
        return ATTRIBUTES[attribute][1]
    except KeyError:
        raise ValueError(f"unknown attribute {attribute!r}; expected one of {sorted(ATTRIBUTES)}") from None


@dataclass(frozen=True)
class FaceRecord:
    """One image reference with harmonized labels.

    ``None`` on a label means absent/unknown. Synthetic records produced by
    the augmentation engines set ``synthetic`` and carry a provenance dict.
    """

    image_ref: str
    source: Source
    age_class: AgeClass | None = None
    gender: Gender | None = None
    ethnicity: Ethnicity | None = None
    age_years: int | None = None
    synthetic: bool = False
    provenance: Mapping[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.age_years is not None:
            if self.age_years < 0:
                raise NegativeAge(f"age_years={self.age_years}")
            if self.age_class is not harmonize_age(self.age_years):
                raise ValueError(f"age_class {self.age_class} inconsistent with age_years={self.age_years}")
        if self.source is Source.CELEBA and self.ethnicity is not None:
            raise ValueError("CelebA records carry no ethnicity label")

    def label(self, attribute: str) -> str | None:
        value = getattr(self, ATTRIBUTES[attribute][0])
        return None if value is None else value.value

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, Enum) else (dict(v) if isinstance(v, Mapping) else v)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FaceRecord":
        def opt(enum, key):
            v = d.get(key)
            return None if v is None else enum(v)

        return cls(
            image_ref=d["image_ref"],
            source=Source(d["source"]),
            age_class=opt(AgeClass, "age_class"),
            gender=opt(Gender, "gender"),
            ethnicity=opt(Ethnicity, "ethnicity"),
            age_years=d.get("age_years"),
            synthetic=bool(d.get("synthetic", False)),
            provenance=d.get("provenance"),
        )


def synthetic_record(image_ref: str, attribute: str, cls: str, source: Source,
                     provenance: Mapping[str, Any]) -> FaceRecord:
    """A generated record that asserts only ``attribute`` = ``cls``; other labels stay unknown."""
    field_name, classes = ATTRIBUTES[attribute]
    if cls not in classes:
        raise ValueError(f"{cls!r} is not a class of {attribute!r}")
    enum = {"gender": Gender, "age": AgeClass, "ethnicity": Ethnicity}[attribute]
    return FaceRecord(image_ref=image_ref, source=source, synthetic=True,
                      provenance=dict(provenance), **{field_name: enum(cls)})


@dataclass(frozen=True)
class RawUtkRecord:
    age: int
    gender_code: int
    race_code: int

    @property
    def is_other(self) -> bool:
        return self.race_code == UTK_RACE_OTHER


# <age>_<gender>_<race>_<suffix>.<ext>; the suffix itself may contain dots
_UTK_NAME = re.compile(r"^(\d+)_(\d+)_(\d+)_(.+)\.([A-Za-z0-9]+)$")


def parse_utkface_filename(name: str) -> RawUtkRecord:
    m = _UTK_NAME.match(Path(name).name)
    if m is None:
        raise MalformedName(name)
    age, gender, race = (int(g) for g in m.groups()[:3])
    if gender not in UTK_GENDER or not 0 <= race <= UTK_RACE_OTHER:
        raise MalformedName(f"{name}: gender/race code out of range")
    return RawUtkRecord(age, gender, race)


def format_utkface_filename(raw: RawUtkRecord, suffix: str = "0", ext: str = "jpg") -> str:
    return f"{raw.age}_{raw.gender_code}_{raw.race_code}_{suffix}.{ext}"


def harmonize_age(age_years: int) -> AgeClass:
    if age_years < 0:
        raise NegativeAge(f"age_years={age_years}")
    return AgeClass.OLD if age_years >= OLD_AGE else AgeClass.YOUNG


def lfwa_categorical_label(scores: Sequence[float] | Mapping[str, float]) -> int:
    """Index of the highest score, provided it is positive.

    Ties go to the lowest index. Raises ``NoPositiveScore`` when no score is
    above zero; such records are dropped rather than guessed.
    """
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if not values:
        raise ValueError("empty score vector")
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    if not values[best] > 0:
        raise NoPositiveScore(f"no positive score in {values}")
    return best


def filter_ethnicity_other(records: Iterable[RawUtkRecord]) -> list[RawUtkRecord]:
    return [r for r in records if r.race_code != UTK_RACE_OTHER]


def harmonize_utk(raw: RawUtkRecord, image_ref: str) -> FaceRecord:
    if raw.is_other:
        raise ValueError("'other' ethnicity must be filtered before harmonization")
    return FaceRecord(
        image_ref=image_ref,
        source=Source.UTKFACE,
        age_years=raw.age,
        age_class=harmonize_age(raw.age),
        gender=UTK_GENDER[raw.gender_code],
        ethnicity=UTK_RACE[raw.race_code],
    )


IMAGE_EXTS = {".jpg", ".jpeg", ".png"}


def ingest_utkface(directory: str | Path) -> list[FaceRecord]:
    """Harmonized records for every well-formed, non-'other' image in a UTKFace directory.

    ``image_ref`` is the path relative to ``directory``. Malformed names are
    skipped with a warning.
    """
    directory = Path(directory)
    pairs = []
    for path in sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_EXTS):
        try:
            pairs.append((parse_utkface_filename(path.name), path.relative_to(directory).as_posix()))
        except MalformedName:
            log.warning("skipping malformed UTKFace name %s", path.name)
    kept = filter_ethnicity_other(raw for raw, _ in pairs)
    log.info("UTKFace: %d parsed, %d after removing 'other'", len(pairs), len(kept))
    return [harmonize_utk(raw, ref) for raw, ref in pairs if not raw.is_other]


# LFWA+ ------------------------------------------------------------------------

LFWA_ETHNICITY_COLUMNS = ("White", "Black", "Asian", "Indian")
LFWA_AGE_COLUMNS = ("Baby", "Child", "Youth", "Middle Aged", "Senior")
LFWA_OLD_COLUMN = "Senior"


def _read_lfwa_rows(path: Path, delimiter: str) -> tuple[list[str], list[list[str]]]:
    header: list[str] | None = None
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                cells = [c.strip() for c in line.lstrip("#").split(delimiter)]
                cells = [c for c in cells if c]
                if len(cells) > 1:
                    header = cells
                continue
            cells = next(csv.reader([line], delimiter=delimiter))
            if header is None:
                header = [c.strip() for c in cells]
                continue
            rows.append([c.strip() for c in cells])
    if header is None:
        raise ValueError(f"{path}: no header row")
    return header, rows


def lfwa_row_to_record(row: Mapping[str, str], image_ref: str) -> FaceRecord:
    """Harmonize one LFWA+ score row; raises ``NoPositiveScore`` for unlabelled attributes.

    Gender comes from the single ``Male`` score, scored as the candidate pair
    (male, -male) so the same max-positive rule applies. Age uses the
    categorical age columns present in the row; ``Senior`` maps to Old.
    """
    male = float(row["Male"])
    gender = (Gender.MALE, Gender.FEMALE)[lfwa_categorical_label([male, -male])]
    age_cols = [c for c in LFWA_AGE_COLUMNS if c in row]
    age_idx = lfwa_categorical_label([float(row[c]) for c in age_cols])
    age_class = AgeClass.OLD if age_cols[age_idx] == LFWA_OLD_COLUMN else AgeClass.YOUNG
    eth_idx = lfwa_categorical_label([float(row[c]) for c in LFWA_ETHNICITY_COLUMNS])
    return FaceRecord(
        image_ref=image_ref,
        source=Source.LFWA,
        age_class=age_class,
        gender=gender,
        ethnicity=tuple(Ethnicity)[eth_idx],
    )


def ingest_lfwa(attribute_file: str | Path, delimiter: str = "\t") -> list[FaceRecord]:
    """Records from an LFWA+ attribute table.

    Image references are built from ``person``/``imagenum`` columns using the
    LFW naming scheme, or taken from an ``image`` column when present.
    """
    header, rows = _read_lfwa_rows(Path(attribute_file), delimiter)
    out, dropped = [], 0
    for cells in rows:
        row = dict(zip(header, cells))
        if "image" in row:
            ref = row["image"]
        else:
            person = row["person"].replace(" ", "_")
            ref = f"{person}/{person}_{int(row['imagenum']):04d}.jpg"
        try:
            out.append(lfwa_row_to_record(row, ref))
        except NoPositiveScore:
            dropped += 1
    log.info("LFWA+: %d records, %d dropped without a positive score", len(out), dropped)
    return out


# CelebA -----------------------------------------------------------------------

def ingest_celeba(attribute_file: str | Path) -> list[FaceRecord]:
    """Records from ``list_attr_celeba.txt`` (count line, header line, ±1 rows)."""
    with open(attribute_file, encoding="utf-8") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if lines and len(lines[0]) == 1 and lines[0][0].isdigit():
        lines = lines[1:]
    header, body = lines[0], lines[1:]
    male_i, young_i = header.index("Male"), header.index("Young")
    out = []
    for cells in body:
        # rows carry the image name in front of the attribute columns
        name, values = cells[0], cells[1:]
        if len(values) != len(header):
            raise ValueError(f"CelebA row {name}: expected {len(header)} values, got {len(values)}")
        out.append(FaceRecord(
            image_ref=name,
            source=Source.CELEBA,
            gender=Gender.MALE if int(values[male_i]) > 0 else Gender.FEMALE,
            age_class=AgeClass.YOUNG if int(values[young_i]) > 0 else AgeClass.OLD,
        ))
    return out


# JSON lines -------------------------------------------------------------------

def write_records(records: Iterable[FaceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[FaceRecord]:
    with open(path, encoding="utf-8") as fh:
        return [FaceRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
