import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from facebias import synthetic
from facebias.errors import MalformedName, NegativeAge, NoPositiveScore
from facebias.ingest import (
    AgeClass,
    Ethnicity,
    FaceRecord,
    Gender,
    RawUtkRecord,
    Source,
    filter_ethnicity_other,
    format_utkface_filename,
    harmonize_age,
    ingest_celeba,
    ingest_lfwa,
    ingest_utkface,
    lfwa_categorical_label,
    lfwa_row_to_record,
    parse_utkface_filename,
    read_records,
    synthetic_record,
    write_records,
)


# -- parse_utkface_filename ---------------------------------------------------

def test_parse_examples():
    assert parse_utkface_filename("25_0_1_2017x.jpg") == RawUtkRecord(25, 0, 1)
    assert parse_utkface_filename("1_1_4_x.jpg") == RawUtkRecord(1, 1, 4)


def test_parse_real_style_name():
    raw = parse_utkface_filename("26_1_2_20170116174525125.jpg.chip.jpg")
    assert (raw.age, raw.gender_code, raw.race_code) == (26, 1, 2)


@pytest.mark.parametrize("name", ["face.jpg", "25_0_x.jpg", "a_0_1_x.jpg", "25_0_1.jpg", "25_7_1_x.jpg",
                                  "25_0_9_x.jpg"])
def test_parse_malformed(name):
    with pytest.raises(MalformedName):
        parse_utkface_filename(name)


@given(st.integers(0, 120), st.integers(0, 1), st.integers(0, 4),
       st.text("abcdef0123456789", min_size=1, max_size=12))
def test_parse_format_roundtrip(age, g, r, suffix):
    raw = RawUtkRecord(age, g, r)
    assert parse_utkface_filename(format_utkface_filename(raw, suffix)) == raw


# -- harmonize_age ---------------------------------------------------------------

def test_harmonize_age_boundaries():
    assert harmonize_age(65) is AgeClass.OLD
    assert harmonize_age(64) is AgeClass.YOUNG
    assert harmonize_age(0) is AgeClass.YOUNG
    with pytest.raises(NegativeAge):
        harmonize_age(-1)


@given(st.integers(0, 150))
def test_harmonize_age_threshold(age):
    assert (harmonize_age(age) is AgeClass.OLD) == (age >= 65)


# -- LFWA+ ---------------------------------------------------------------------

def test_lfwa_label_examples():
    assert lfwa_categorical_label({"white": 0.8, "black": -0.2, "asian": 0.1, "indian": -0.5}) == 0
    with pytest.raises(NoPositiveScore):
        lfwa_categorical_label([-1, -2, -3, -4])
    assert lfwa_categorical_label([0.5, 0.5, -1, -1]) == 0


def test_lfwa_zero_is_not_positive():
    with pytest.raises(NoPositiveScore):
        lfwa_categorical_label([0.0, -1.0])


def test_lfwa_tie_break_all_permutations():
    """Whatever positions the tied maxima occupy, the lowest index wins."""
    for perm in set(itertools.permutations([0.5, 0.5, -1.0, 0.2])):
        tied = [i for i, v in enumerate(perm) if v == 0.5]
        assert lfwa_categorical_label(list(perm)) == min(tied)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=8), st.integers(0, 40))
def test_lfwa_scale_invariance(scores, k):
    # powers of two rescale exactly, so no ties are created or broken by rounding
    scaled = [s * 2.0 ** k for s in scores]
    try:
        expected = lfwa_categorical_label(scores)
    except NoPositiveScore:
        with pytest.raises(NoPositiveScore):
            lfwa_categorical_label(scaled)
        return
    assert lfwa_categorical_label(scaled) == expected


def test_lfwa_row_gender_sign():
    row = {"Male": "-0.7", "White": "0.1", "Black": "1.3", "Asian": "-1", "Indian": "-2",
           "Youth": "0.4", "Senior": "-0.3"}
    r = lfwa_row_to_record(row, "x.jpg")
    assert r.gender is Gender.FEMALE
    assert r.ethnicity is Ethnicity.BLACK
    assert r.age_class is AgeClass.YOUNG
    assert r.source is Source.LFWA


def test_lfwa_row_senior_is_old():
    row = {"Male": "0.7", "White": "0.5", "Black": "-1", "Asian": "-1", "Indian": "-2",
           "Youth": "0.4", "Senior": "1.1"}
    assert lfwa_row_to_record(row, "x.jpg").age_class is AgeClass.OLD


# -- filter_ethnicity_other ---------------------------------------------------------

def test_filter_examples():
    white, other, asian = RawUtkRecord(20, 0, 0), RawUtkRecord(30, 1, 4), RawUtkRecord(40, 0, 2)
    assert filter_ethnicity_other([white, other, asian]) == [white, asian]
    assert filter_ethnicity_other([]) == []
    black, indian = RawUtkRecord(20, 0, 1), RawUtkRecord(20, 0, 3)
    assert filter_ethnicity_other([black, indian]) == [black, indian]


raw_records = st.builds(RawUtkRecord, st.integers(0, 100), st.integers(0, 1), st.integers(0, 4))


@given(st.lists(raw_records, max_size=30))
def test_filter_idempotent_and_ordered(records):
    once = filter_ethnicity_other(records)
    assert filter_ethnicity_other(once) == once
    assert once == [r for r in records if r.race_code != 4]


# -- FaceRecord invariants --------------------------------------------------------------

def test_record_age_consistency():
    with pytest.raises(ValueError):
        FaceRecord("x", Source.UTKFACE, age_class=AgeClass.YOUNG, age_years=70)
    with pytest.raises(NegativeAge):
        FaceRecord("x", Source.UTKFACE, age_class=AgeClass.YOUNG, age_years=-3)


def test_celeba_has_no_ethnicity():
    with pytest.raises(ValueError):
        FaceRecord("x", Source.CELEBA, ethnicity=Ethnicity.WHITE)


def test_synthetic_record_asserts_only_target():
    r = synthetic_record("s/1", "age", "Old", Source.UTKFACE, {"engine": "vae"})
    assert r.synthetic and r.age_class is AgeClass.OLD
    assert r.gender is None and r.ethnicity is None
    with pytest.raises(ValueError):
        synthetic_record("s/2", "age", "Female", Source.UTKFACE, {})


# -- directory / table ingestion ------------------------------------------------------------

def test_ingest_utkface_dir(tmp_path):
    synthetic.make_utkface(tmp_path, 40, seed=5, size=20)
    (tmp_path / "notes.jpg").write_bytes(b"")     # malformed name, skipped
    records = ingest_utkface(tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*_*_*_*.jpg"))
    kept = [n for n in names if parse_utkface_filename(n).race_code != 4]
    assert sorted(r.image_ref for r in records) == kept
    for r in records:
        assert r.ethnicity is not None
        assert (r.age_class is AgeClass.OLD) == (r.age_years >= 65)


def test_ingest_lfwa_table(tmp_path):
    table, _ = synthetic.make_lfwa(tmp_path, 25, size=16)
    records = ingest_lfwa(table)
    assert len(records) == 25
    assert records[0].image_ref == "Person_00000/Person_00000_0001.jpg"
    assert all(r.source is Source.LFWA for r in records)


def test_ingest_lfwa_drops_unlabelled(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("person\timagenum\tMale\tWhite\tBlack\tAsian\tIndian\tYouth\tSenior\n"
                    "A B\t1\t1\t0.5\t-1\t-1\t-1\t1\t-1\n"
                    "C D\t2\t1\t-0.5\t-1\t-1\t-1\t1\t-1\n")
    records = ingest_lfwa(path)
    assert [r.image_ref for r in records] == ["A_B/A_B_0001.jpg"]


def test_ingest_celeba_table(tmp_path):
    table, _ = synthetic.make_celeba(tmp_path, 12, size=16)
    records = ingest_celeba(table)
    assert len(records) == 12
    assert all(r.ethnicity is None and r.source is Source.CELEBA for r in records)
    lines = table.read_text().split("\n")
    header = lines[1].split()
    first = lines[2].split()
    male = int(first[1 + header.index("Male")])
    assert records[0].gender is (Gender.MALE if male == 1 else Gender.FEMALE)


def test_records_jsonl_roundtrip(tmp_path):
    recs = [
        FaceRecord("a.jpg", Source.UTKFACE, AgeClass.OLD, Gender.FEMALE, Ethnicity.INDIAN, 70),
        FaceRecord("b.jpg", Source.CELEBA, AgeClass.YOUNG, Gender.MALE),
        synthetic_record("c", "gender", "Male", Source.UTKFACE, {"engine": "geometric", "seed": 1}),
    ]
    write_records(recs, tmp_path / "r.jsonl")
    back = read_records(tmp_path / "r.jsonl")
    assert back == recs
    assert back[2].provenance == {"engine": "geometric", "seed": 1}
