import numpy as np
import pytest
import torch
import yaml

from facebias import synthetic
from facebias.ingest import AgeClass, Ethnicity, FaceRecord, Gender, Source

torch.set_num_threads(1)

_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        cid, text = marker.args
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA.setdefault(cid, {"text": text, "statuses": []})["statuses"].append(status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA):
        entry = _CRITERIA[cid]
        statuses = entry["statuses"]
        # any failing test fails the criterion; skipped optional sub-checks do not
        status = "FAIL" if "FAIL" in statuses else ("PASS" if "PASS" in statuses else "SKIP")
        skipped = statuses.count("SKIP")
        note = f"  ({skipped} optional sub-check skipped)" if skipped and status != "SKIP" else ""
        terminalreporter.write_line(f"{status:4s}  {cid}  {entry['text']}{note}")


def make_record(i, gender="Male", age="Young", ethnicity="White", source=Source.UTKFACE):
    return FaceRecord(
        image_ref=f"img_{i:06d}",
        source=source,
        gender=None if gender is None else Gender(gender),
        age_class=None if age is None else AgeClass(age),
        ethnicity=None if ethnicity is None else Ethnicity(ethnicity),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_images():
    """200 synthetic 75x75 faces with gender labels (0/1)."""
    r = np.random.default_rng(7)
    labels = r.integers(0, 2, size=200)
    images = np.stack([synthetic.blob_image(r, 75, int(g), int(r.integers(4)), bool(r.random() < 0.3))
                       for g in labels]).astype(np.float32)
    return images, labels


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    synthetic.make_utkface(root / "utk", 150, seed=0)
    synthetic.make_lfwa(root / "lfwa", 60)
    synthetic.make_celeba(root / "celeba", 60)
    return root


def write_config(path, data_root, **overrides):
    raw = {
        "seed": 3,
        "output_dir": str(path.parent / "run"),
        "attribute": "gender",
        "engine": "geometric",
        "datasets": {
            "utkface": {"images": str(data_root / "utk")},
            "lfwa": {"attributes": str(data_root / "lfwa" / "lfw_attributes.txt"),
                     "images": str(data_root / "lfwa" / "images")},
            "celeba": {"attributes": str(data_root / "celeba" / "list_attr_celeba.txt"),
                       "images": str(data_root / "celeba" / "img_align_celeba")},
        },
        "classifier": {"backbone": "tiny", "pretrained": False, "epochs": 3, "lr": 0.01},
        "evaluation": {"external": {"lfwa": 10, "celeba": 10}},
    }
    raw.update(overrides)
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


@pytest.fixture
def config_file(tmp_path, data_root):
    return write_config(tmp_path / "exp.yaml", data_root)

