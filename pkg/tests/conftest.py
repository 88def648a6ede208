import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from ctxgesture.config import TrainConfig
from ctxgesture.data import parse_annotations
from ctxgesture.model import BackboneSpec, FusionHeadConfig, build_model
from ctxgesture.synthetic import make_synthetic_dataset

GESTURES = ["sniffing", "holding the nose", "drinking", "smoking", "cooking", "drinking and smoking"]


def small_cfg(**kw):
    base = dict(
        epochs=5,
        batch_size=16,
        backbone_lr=3e-3,
        head_lr=3e-3,
        weight_decay=0.0,
        crop_size=(24, 24),
        context_size=(32, 32),
        mean=(0.5, 0.5, 0.5),
        std=(0.25, 0.25, 0.25),
        patience=50,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(num_classes=6, use_context=True, dim=32, hidden=(64, 64, 32), dropout=0.5, labels=None):
    spec = BackboneSpec("tiny_test", feature_dim=dim)
    return build_model(spec, spec, FusionHeadConfig(hidden, dropout), num_classes, use_context, labels)


def write_doc(tmp_path, doc, name="ann.json", images=None):
    """Write an annotation doc plus solid-color PNGs for its images."""
    for im in doc.get("images", []):
        arr = np.full((im["height"], im["width"], 3), 128, np.uint8)
        Image.fromarray(arr).save(tmp_path / im["file_name"])
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def minimal_doc():
    return {
        "images": [{"id": 1, "file_name": "a.png", "width": 20, "height": 10}],
        "annotations": [{"id": 7, "image_id": 1, "bbox": [2, 1, 5, 6], "category_id": 1, "split": "train"}],
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(GESTURES)],
    }


@pytest.fixture(scope="session")
def crop_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_crop")
    path = make_synthetic_dataset(root, mode="crop", per_class=4, splits=(("train", 1.0), ("val", 0.5), ("test", 0.5)))
    return parse_annotations(path)


@pytest.fixture(scope="session")
def crop_dataset_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_crop_cli")
    return make_synthetic_dataset(root, mode="crop", per_class=3, splits=(("train", 1.0), ("val", 1.0), ("test", 1.0)))


# ------------------------------------------------------------------ acceptance reporting

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, text): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = _CRITERIA.get(crit[0], (crit[1], "PASS"))[1]
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if prev == "FAIL":
            outcome = "FAIL"
        _CRITERIA[crit[0]] = (crit[1], outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        text, outcome = _CRITERIA[cid]
        terminalreporter.write_line(f"{cid:<4} {outcome:<5} {text}")
