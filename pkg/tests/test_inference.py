import csv
import json
import logging
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxgesture.data import BBox, load_image
from ctxgesture.errors import AdapterUnavailable, InvalidDetection, MalformedDetections
from ctxgesture.evaluation import confusion_matrix, evaluate_split, macro_f1
from ctxgesture.inference import (
    Detection,
    DetectionSet,
    GesturePrediction,
    NullAdapter,
    detections_from_manifest,
    export_predictions,
    get_adapter,
    load_detections,
    load_predictions,
    parse_detections,
    predict,
    register_adapter,
    run_adapter,
    save_detections,
)

from conftest import small_cfg, tiny_model


@pytest.fixture
def model(crop_dataset):
    torch.manual_seed(0)
    m = tiny_model(labels=crop_dataset.labels).eval()
    m.preprocess = small_cfg()
    return m


def _image(crop_dataset, k=0):
    rec = crop_dataset.images[k]
    return rec, load_image(rec.file_path)


def test_threshold(tmp_path):
    p = tmp_path / "d.json"
    p.write_text(json.dumps([
        {"image_id": 1, "category_id": 1, "bbox": [0, 0, 5, 5], "score": 0.9},
        {"image_id": 1, "category_id": 1, "bbox": [1, 1, 5, 5], "score": 0.3},
    ]))
    ds = load_detections(p, score_threshold=0.5)
    assert len(ds) == 1 and ds.get(1)[0].score == 0.9


def test_empty_results(tmp_path):
    p = tmp_path / "d.json"
    p.write_text("[]")
    ds = load_detections(p)
    assert len(ds) == 0 and ds.detections == {}


@pytest.mark.parametrize("doc", [{"a": 1}, [{"bbox": [0, 0, 1, 1]}], [{"image_id": 1, "bbox": [0, 0, 1]}],
                                 [{"image_id": 1, "bbox": [0, 0, 1, 1], "score": 2.0}]])
def test_malformed(doc):
    with pytest.raises(MalformedDetections):
        parse_detections(doc)


def test_ground_truth_round_trip(tmp_path, crop_dataset):
    p = tmp_path / "gt.json"
    save_detections(detections_from_manifest(crop_dataset), p)
    ds = load_detections(p, score_threshold=0.5)
    got = Counter((iid, d.bbox) for iid, dets in ds.detections.items() for d in dets)
    want = Counter((inst.image_id, inst.bbox) for inst in crop_dataset.instances)
    assert got == want
    assert all(d.score == 1.0 for dets in ds.detections.values() for d in dets)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=20), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    doc = [{"image_id": 0, "bbox": [0, 0, 2, 2], "score": s} for s in scores]
    assert len(parse_detections(doc, hi)) <= len(parse_detections(doc, lo))


def test_null_adapter():
    dets = run_adapter(get_adapter("null"), np.zeros((80, 100, 3), np.uint8))
    assert dets == [Detection(BBox(0, 0, 100, 80), 1.0)]


def test_replay_adapter():
    ds = DetectionSet({"7": [Detection(BBox(1, 2, 3, 4), 0.8), Detection(BBox(0, 0, 5, 5), 0.6)]}, "x")
    adapter = get_adapter("replay", detection_set=ds)
    img = np.zeros((10, 10, 3), np.uint8)
    assert run_adapter(adapter, img, "7") == ds.detections["7"]
    assert run_adapter(adapter, img, "8") == []


def test_adapter_outside_image_rejected():
    register_adapter("bad", lambda: (lambda image, image_id=None: [Detection(BBox(50, 50, 5, 5), 0.9)]))
    with pytest.raises(InvalidDetection):
        run_adapter(get_adapter("bad"), np.zeros((10, 10, 3), np.uint8))


def test_unknown_adapter():
    with pytest.raises(AdapterUnavailable):
        get_adapter("yolo9000")


def test_detection_invariants():
    with pytest.raises(InvalidDetection):
        Detection(BBox(0, 0, 1, 1), 1.5)
    with pytest.raises(InvalidDetection):
        Detection(BBox(0, 0, 0, 1), 0.5)


def test_predict_empty(model, crop_dataset):
    _, img = _image(crop_dataset)
    assert predict(model, img, []) == []


def test_predict_duplicates_identical(model, crop_dataset):
    rec, img = _image(crop_dataset)
    d = Detection(BBox(3, 4, 10, 12), 0.9)
    a, b = predict(model, img, [d, d], image_id=rec.image_id)
    assert a == b


def test_batched_equals_single(model, crop_dataset):
    rec, img = _image(crop_dataset, 2)
    dets = [Detection(BBox(i * 5, i * 3, 12, 16), 0.9) for i in range(5)]
    batched = predict(model, img, dets, batch_size=16)
    singles = [predict(model, img, [d], batch_size=1)[0] for d in dets]
    assert len(batched) == 5
    for a, b in zip(batched, singles):
        assert np.allclose(a.full_distribution, b.full_distribution, atol=1e-5)
        assert a.label_id == b.label_id


def test_prediction_invariants(model, crop_dataset):
    rec, img = _image(crop_dataset, 1)
    preds = predict(model, img, [Detection(BBox(0, 0, 20, 20), 0.7), Detection(BBox(10, 5, 30, 40), 0.7)])
    for p in preds:
        dist = np.array(p.full_distribution)
        assert (dist >= 0).all() and abs(dist.sum() - 1) <= 1e-6
        assert p.probability == dist.max() and p.label_id == int(dist.argmax())
        assert p.label_name == crop_dataset.labels.names[p.label_id]


def test_empty_crop_skipped(model, crop_dataset, caplog):
    _, img = _image(crop_dataset)
    good = Detection(BBox(0, 0, 10, 10), 0.9)
    outside = Detection(BBox(500, 500, 10, 10), 0.9)
    with caplog.at_level(logging.WARNING, logger="ctxgesture.inference"):
        preds = predict(model, img, [outside, good], image_id="x")
    assert len(preds) == 1 and preds[0].bbox == good.bbox
    assert any("skipping detection" in r.message for r in caplog.records)


def test_pipeline_matches_evaluate_split(model, crop_dataset):
    preds, labels = [], []
    for inst in crop_dataset.split_instances("test"):
        img = load_image(crop_dataset.image(inst.image_id).file_path)
        (p,) = predict(model, img, [Detection(inst.bbox, 1.0)], image_id=inst.image_id)
        preds.append(p.label_id)
        labels.append(inst.label_id)
    ours = macro_f1(confusion_matrix(preds, labels, 6))
    assert ours == evaluate_split(model, crop_dataset, "test").macro_f1


def _preds():
    return [
        GesturePrediction("1", BBox(1.5, 2, 3, 4), "b", 1, 0.7, (0.1, 0.7, 0.2)),
        GesturePrediction("2", BBox(0, 0, 9, 9), "a", 0, 0.5, (0.5, 0.25, 0.25)),
    ]


def test_export_json_round_trip(tmp_path):
    export_predictions(_preds(), tmp_path / "p.json")
    assert load_predictions(tmp_path / "p.json") == _preds()


def test_export_empty(tmp_path):
    export_predictions([], tmp_path / "p.json")
    assert json.loads((tmp_path / "p.json").read_text()) == []
    export_predictions([], tmp_path / "p.csv", "csv", class_names=["a", "b", "c"])
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert len(rows) == 1 and len(rows[0]) == 5 + 3


def test_export_csv(tmp_path):
    export_predictions(_preds(), tmp_path / "p.csv", "csv", class_names=["a", "b", "c"])
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["image_id", "bbox", "label_name", "label_id", "probability", "p_a", "p_b", "p_c"]
    assert all(len(r) == 5 + 3 for r in rows)
    assert [float(v) for v in rows[1][5:]] == [0.1, 0.7, 0.2]
