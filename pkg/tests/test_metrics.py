from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import make_record
from facebias.errors import (
    EmptyClassInLabels,
    InsufficientClass,
    LengthMismatch,
    MalformedDump,
    ShapeMismatch,
    TooFewValues,
    TooSmall,
)
from facebias.ingest import Source
from facebias.metrics import (
    PredictionDump,
    bias_std,
    build_report,
    dataset_similarity,
    evaluate_dump,
    f1_per_class,
    mse_images,
    overall_accuracy,
    per_class_accuracy,
    round_half_up,
    sample_balanced_test,
    ssim_images,
)


# -- accuracy and F1 ------------------------------------------------------------------

def test_accuracy_examples():
    assert per_class_accuracy(list("AABB"), list("AABB"), "AB") == {"A": 1.0, "B": 1.0}
    assert per_class_accuracy(list("ABBB"), list("AABB"), "AB") == {"A": 0.5, "B": 1.0}
    with pytest.raises(EmptyClassInLabels):
        per_class_accuracy(list("AA"), list("AA"), "AC")
    with pytest.raises(LengthMismatch):
        per_class_accuracy(list("A"), list("AA"), "A")


def test_f1_examples():
    # class A: TP 8, FP 2, FN 2
    labels = ["A"] * 10 + ["B"] * 2 + ["C"] * 4
    preds = ["A"] * 8 + ["C"] * 2 + ["A"] * 2 + ["C"] * 4
    f1 = f1_per_class(preds, labels, "ABC")
    assert f1["A"] == pytest.approx(0.8, abs=1e-15)
    assert f1["B"] == 0.0
    assert f1_per_class(labels, labels, "ABC") == {"A": 1.0, "B": 1.0, "C": 1.0}
    with pytest.raises(EmptyClassInLabels):
        f1_per_class(labels, labels, "ABD")


def test_accuracy_exact_mode():
    acc = per_class_accuracy(list("ABBA"), list("AABB"), "AB", exact=True)
    assert acc == {"A": Fraction(1, 2), "B": Fraction(1, 2)}
    assert overall_accuracy(list("ABBA"), list("AABB"), exact=True) == Fraction(1, 2)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from("ABC")), min_size=1, max_size=60))
def test_support_weighted_accuracy_is_overall(pairs):
    preds, labels = map(list, zip(*pairs))
    classes = sorted(set(labels))
    acc = per_class_accuracy(preds, labels, classes, exact=True)
    weighted = sum(acc[c] * labels.count(c) for c in classes) / len(labels)
    assert weighted == overall_accuracy(preds, labels, exact=True)


# -- bias_std ---------------------------------------------------------------------------

def test_bias_std_table_values():
    assert bias_std([0.944, 0.891]) == pytest.approx(0.0265, abs=1e-12)
    assert round_half_up(bias_std([0.944, 0.891])) == 0.027
    assert round_half_up(bias_std([0.854, 0.886, 0.892, 0.854])) == 0.018
    assert bias_std([0.5, 0.5, 0.5]) == 0.0
    with pytest.raises(TooFewValues):
        bias_std([0.3])


def test_round_half_up():
    assert round(0.0265, 3) == 0.026          # the trap the helper exists for
    assert round_half_up(0.0265) == 0.027
    assert round_half_up(0.0175) == 0.018
    assert round_half_up(0.0174999) == 0.017
    assert round_half_up(-0.0265) == -0.027


@given(st.lists(st.integers(0, 1000), min_size=2, max_size=8), st.randoms())
def test_bias_std_permutation_and_zero(millis, r):
    # scores on a 3-decimal grid; subnormal spreads would square to exactly zero
    values = [m / 1000 for m in millis]
    shuffled = values[:]
    r.shuffle(shuffled)
    assert bias_std(shuffled) == pytest.approx(bias_std(values), abs=1e-12)
    assert (bias_std(values) == 0) == (len(set(values)) == 1)


# -- image similarity ---------------------------------------------------------------------

def test_mse_examples(rng):
    a, b = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    assert mse_images(a, a) == 0.0
    assert mse_images(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
    assert abs(mse_images(a, b) - oracles.mse(a, b)) <= 1e-12
    with pytest.raises(ShapeMismatch):
        mse_images(a, b[:5])


@given(arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)), arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)))
def test_mse_flip_invariant(a, b):
    assert mse_images(a[:, ::-1], b[:, ::-1]) == pytest.approx(mse_images(a, b), abs=1e-15)


def test_ssim_against_loop_oracle(rng):
    for _ in range(3):
        a, b = rng.random((16, 14, 3)), rng.random((16, 14, 3))
        want = oracles.ssim_loop(a.mean(-1), b.mean(-1))
        assert abs(ssim_images(a, b) - want) <= 1e-6


def test_ssim_constant_images():
    a, b = np.zeros((13, 13)), np.ones((13, 13))
    assert abs(ssim_images(a, b) - oracles.ssim_loop(a, b)) <= 1e-6
    assert ssim_images(a, b) == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9)


def test_ssim_errors(rng):
    with pytest.raises(TooSmall):
        ssim_images(rng.random((10, 40, 3)), rng.random((10, 40, 3)))
    with pytest.raises(ShapeMismatch):
        ssim_images(rng.random((12, 12)), rng.random((12, 13)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1)), arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_reflexive(a, b):
    assert ssim_images(a, b) == pytest.approx(ssim_images(b, a), abs=1e-12)
    assert ssim_images(a, a) == pytest.approx(1.0, abs=1e-12)


def test_dataset_similarity_identical(rng):
    face = rng.random((75, 75, 3))
    s = dataset_similarity(face, face)
    assert s.mse == 0.0 and s.ssim == pytest.approx(1.0, abs=1e-12)


# -- balanced test sampling -----------------------------------------------------------------

def ethnic_records(counts):
    out, i = [], 0
    for cls, n in counts.items():
        for _ in range(n):
            out.append(make_record(i, ethnicity=cls, source=Source.LFWA))
            i += 1
    return out


def test_sample_balanced_test():
    records = ethnic_records({"White": 900, "Black": 820, "Asian": 1000, "Indian": 805})
    out = sample_balanced_test(records, "ethnicity", 800, seed=1)
    assert len(out) == 3200
    assert {c: sum(r.ethnicity.value == c for r in out) for c in ("White", "Black", "Asian", "Indian")} \
        == dict.fromkeys(("White", "Black", "Asian", "Indian"), 800)
    assert out == sample_balanced_test(records, "ethnicity", 800, seed=1)
    assert sample_balanced_test(records, "ethnicity", 0, seed=1) == []
    with pytest.raises(InsufficientClass):
        sample_balanced_test(records, "ethnicity", 810, seed=1)


def test_sample_balanced_gender():
    records = [make_record(i, gender="Male" if i % 3 else "Female") for i in range(12500)]
    assert len(sample_balanced_test(records, "gender", 4000, seed=0)) == 8000


# -- dumps and reports ---------------------------------------------------------------------------

def dump(preds, labels, model_id="m", classes=("Male", "Female")):
    probs = np.array([[1.0 if p == c else 0.0 for c in classes] for p in preds])
    return PredictionDump(model_id, "utk", "gender", list(classes), [f"i{k}" for k in range(len(preds))],
                          list(labels), list(preds), probs)


def test_dump_roundtrip(tmp_path):
    d = dump(["Male", "Female", "Male"], ["Male", "Female", "Female"])
    d.write(tmp_path / "d.csv")
    back = PredictionDump.read(tmp_path / "d.csv")
    assert (back.model_id, back.classes, back.true_labels, back.pred_labels) == \
        ("m", ["Male", "Female"], d.true_labels, d.pred_labels)
    assert np.array_equal(back.probs, d.probs)
    assert back.summary["mean_accuracy"] == pytest.approx(0.75)


def test_dump_stored_summary_mismatch(tmp_path):
    path = tmp_path / "d.csv"
    dump(["Male", "Female"], ["Male", "Female"]).write(path)
    path.write_text(path.read_text().replace("mean_accuracy: 1.0000000000", "mean_accuracy: 0.9000000000"))
    with pytest.raises(MalformedDump):
        evaluate_dump(PredictionDump.read(path))


def test_malformed_dump_files(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(MalformedDump):
        PredictionDump.read(bad)
    bad.write_text("image_id,true_label,pred_label,p_Male,p_Female\nx,Male,Male,oops,0\n")
    with pytest.raises(MalformedDump):
        PredictionDump.read(bad)
    with pytest.raises(MalformedDump):
        evaluate_dump(dump(["Male", "Robot"], ["Male", "Female"]))


def test_perfect_report():
    (report,), md, csv_text = build_report([dump(["Male", "Female"] * 3, ["Male", "Female"] * 3)], "gender")
    assert report.accuracy == {"Male": 1.0, "Female": 1.0} and report.f1 == {"Male": 1.0, "Female": 1.0}
    assert report.accuracy_std == 0.0 and report.f1_std == 0.0
    assert "| Std. Dev. | 0.000 | 0.000 |" in md
    assert csv_text.splitlines()[0] == "Class,m Acc.,m F1"


def test_two_dumps_side_by_side(tmp_path):
    a = dump(["Male", "Female"], ["Male", "Female"], model_id="ours")
    b = dump(["Male", "Male"], ["Male", "Female"], model_id="theirs")
    b.write(tmp_path / "b.csv")
    reports, md, _ = build_report([a, tmp_path / "b.csv"], "gender")
    assert [r.model_id for r in reports] == ["ours", "theirs"]
    assert md.splitlines()[0] == "| Class | ours Acc. | ours F1 | theirs Acc. | theirs F1 |"
    assert "| Female | 1.000 | 1.000 | 0.000 | 0.000 |" in md


def test_report_json_roundtrip():
    import json
    report = evaluate_dump(dump(["Male", "Female", "Female"], ["Male", "Female", "Male"]))
    data = json.loads(report.to_json())
    assert data["accuracy"] == {"Male": 0.5, "Female": 1.0}
    assert data["support"] == {"Male": 2, "Female": 1}
