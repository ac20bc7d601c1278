"""Per-class accuracy/F1, dispersion across classes, and mean-face similarity."""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from scipy.signal import convolve2d

from .errors import (
    EmptyClassInLabels,
    InsufficientClass,
    LengthMismatch,
    MalformedDump,
    ShapeMismatch,
    TooFewValues,
    TooSmall,
)
from .ingest import FaceRecord, attribute_classes


def _check_lengths(preds, labels):
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")


def per_class_accuracy(preds: Sequence[Hashable], labels: Sequence[Hashable],
                       classes: Sequence[Hashable], exact: bool = False) -> dict:
    """Fraction of each true class predicted correctly. ``exact`` returns ``Fraction`` values."""
    _check_lengths(preds, labels)
    out = {}
    for c in classes:
        support = sum(1 for y in labels if y == c)
        if support == 0:
            raise EmptyClassInLabels(f"class {c!r} does not occur in labels")
        correct = sum(1 for p, y in zip(preds, labels) if y == c and p == c)
        out[c] = Fraction(correct, support) if exact else correct / support
    return out


def f1_per_class(preds: Sequence[Hashable], labels: Sequence[Hashable],
                 classes: Sequence[Hashable]) -> dict:
    """One-vs-rest F1 for each class; 0 when precision + recall is 0."""
    _check_lengths(preds, labels)
    out = {}
    for c in classes:
        if not any(y == c for y in labels):
            raise EmptyClassInLabels(f"class {c!r} does not occur in labels")
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out[c] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return out


def bias_std(values: Sequence[float]) -> float:
    """Population standard deviation (divides by N) of per-class scores.

    Exact rational arithmetic, so equal scores give exactly 0.
    """
    if len(values) < 2:
        raise TooFewValues(f"need at least 2 values, got {len(values)}")
    return statistics.pstdev([float(v) for v in values])


def round_half_up(x: float, ndigits: int = 3) -> float:
    """Table rounding: strip binary noise at 12 significant digits, then round halves up.

    ``round(0.0265, 3)`` gives 0.026 because the double is 0.02649999...; the
    printed tables round the decimal value 0.0265 to 0.027.
    """
    d = Decimal(format(x, ".12g"))
    return float(d.quantize(Decimal(1).scaleb(-ndigits), rounding=ROUND_HALF_UP))


# image similarity ---------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse_images(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def ssim_images(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows of the luminance channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise TooSmall(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class SimilarityScore:
    mse: float
    ssim: float


def dataset_similarity(native_mean_face: np.ndarray, external_mean_face: np.ndarray) -> SimilarityScore:
    return SimilarityScore(mse_images(native_mean_face, external_mean_face),
                           ssim_images(native_mean_face, external_mean_face))


def sample_balanced_test(records: Sequence[FaceRecord], attribute: str, per_class_count: int,
                         seed: int, classes: Sequence[str] | None = None) -> list[FaceRecord]:
    """Uniformly sample exactly ``per_class_count`` records of each class (input order kept)."""
    classes = attribute_classes(attribute) if classes is None else classes
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = [i for i, r in enumerate(records) if r.label(attribute) == c]
        if len(idx) < per_class_count:
            raise InsufficientClass(f"class {c!r} has {len(idx)} records, need {per_class_count}")
        keep.extend(rng.choice(idx, size=per_class_count, replace=False).tolist())
    return [records[i] for i in sorted(keep)]


# prediction dumps and reports ------------------------------------------------------

@dataclass
class PredictionDump:
    """Per-image predictions of one model on one test set.

    On disk: ``#key: value`` metadata lines, then CSV with columns
    ``image_id,true_label,pred_label,p_<class>...``.
    """

    model_id: str
    dataset_id: str
    attribute: str
    classes: list[str]
    image_ids: list[str]
    true_labels: list[str]
    pred_labels: list[str]
    probs: np.ndarray
    summary: dict[str, float] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        acc = per_class_accuracy(self.pred_labels, self.true_labels, self.classes)
        meta = {"model_id": self.model_id, "dataset_id": self.dataset_id, "attribute": self.attribute,
                "classes": "|".join(self.classes), "mean_accuracy": f"{np.mean(list(acc.values())):.10f}"}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for k, v in meta.items():
                fh.write(f"#{k}: {v}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "true_label", "pred_label", *(f"p_{c}" for c in self.classes)])
            for i, t, p, row in zip(self.image_ids, self.true_labels, self.pred_labels, self.probs):
                w.writerow([i, t, p, *(f"{v:.8f}" for v in row)])

    @classmethod
    def read(cls, path: str | Path) -> "PredictionDump":
        meta, body = {}, []
        try:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if line.startswith("#"):
                        k, _, v = line[1:].partition(":")
                        meta[k.strip()] = v.strip()
                    elif line.strip():
                        body.append(line)
            rows = list(csv.reader(body))
            header, rows = rows[0], rows[1:]
            if header[:3] != ["image_id", "true_label", "pred_label"]:
                raise MalformedDump(f"{path}: unexpected header {header[:3]}")
            classes = [h[2:] for h in header[3:]]
            if "classes" in meta and meta["classes"].split("|") != classes:
                raise MalformedDump(f"{path}: class columns disagree with metadata")
            summary = {k: float(meta[k]) for k in ("mean_accuracy",) if k in meta}
            return cls(
                model_id=meta.get("model_id", Path(path).stem),
                dataset_id=meta.get("dataset_id", "unknown"),
                attribute=meta.get("attribute", "unknown"),
                classes=classes,
                image_ids=[r[0] for r in rows],
                true_labels=[r[1] for r in rows],
                pred_labels=[r[2] for r in rows],
                probs=np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), len(classes)),
                summary=summary,
            )
        except MalformedDump:
            raise
        except (ValueError, IndexError, KeyError) as exc:
            raise MalformedDump(f"{path}: {exc}") from exc


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    attribute: str
    accuracy: dict[str, float]
    f1: dict[str, float]
    mean_accuracy: float
    accuracy_std: float
    mean_f1: float
    f1_std: float
    support: dict[str, int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


SUMMARY_TOLERANCE = 1e-6


def evaluate_dump(dump: PredictionDump, classes: Sequence[str] | None = None) -> EvalReport:
    classes = list(classes or dump.classes)
    unknown = set(dump.true_labels) | set(dump.pred_labels)
    unknown -= set(classes)
    if unknown:
        raise MalformedDump(f"labels outside {classes}: {sorted(unknown)}")
    try:
        acc = per_class_accuracy(dump.pred_labels, dump.true_labels, classes)
        f1 = f1_per_class(dump.pred_labels, dump.true_labels, classes)
    except (EmptyClassInLabels, LengthMismatch) as exc:
        raise MalformedDump(str(exc)) from exc
    mean_acc = float(np.mean(list(acc.values())))
    stored = dump.summary.get("mean_accuracy")
    if stored is not None and abs(stored - mean_acc) > SUMMARY_TOLERANCE:
        raise MalformedDump(f"stored mean accuracy {stored} != recomputed {mean_acc}")
    return EvalReport(
        model_id=dump.model_id,
        dataset_id=dump.dataset_id,
        attribute=dump.attribute,
        accuracy=acc,
        f1=f1,
        mean_accuracy=mean_acc,
        accuracy_std=bias_std(list(acc.values())),
        mean_f1=float(np.mean(list(f1.values()))),
        f1_std=bias_std(list(f1.values())),
        support={c: sum(1 for y in dump.true_labels if y == c) for c in classes},
    )


def _fmt(x: float) -> str:
    return f"{round_half_up(x, 3):.3f}"


def render_table(reports: Sequence[EvalReport], classes: Sequence[str], fmt: str = "markdown") -> str:
    """Side-by-side Acc./F1 column groups, one per report, plus mean and std rows."""
    header = ["Class"]
    for r in reports:
        header += [f"{r.model_id} Acc.", f"{r.model_id} F1"]
    rows = [[c, *[v for r in reports for v in (_fmt(r.accuracy[c]), _fmt(r.f1[c]))]] for c in classes]
    rows.append(["Mean", *[v for r in reports for v in (_fmt(r.mean_accuracy), _fmt(r.mean_f1))]])
    rows.append(["Std. Dev.", *[v for r in reports for v in (_fmt(r.accuracy_std), _fmt(r.f1_std))]])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def build_report(dumps: Sequence[PredictionDump | str | Path], attribute: str,
                 classes: Sequence[str] | None = None):
    """Evaluate each dump and render them side by side; returns (reports, markdown, csv)."""
    classes = list(classes or attribute_classes(attribute))
    loaded = [d if isinstance(d, PredictionDump) else PredictionDump.read(d) for d in dumps]
    reports = [evaluate_dump(d, classes) for d in loaded]
    return reports, render_table(reports, classes, "markdown"), render_table(reports, classes, "csv")


def overall_accuracy(preds: Sequence[Hashable], labels: Sequence[Hashable], exact: bool = False):
    _check_lengths(preds, labels)
    correct = sum(1 for p, y in zip(preds, labels) if p == y)
    return Fraction(correct, len(labels)) if exact else correct / len(labels)

