"""Detection-then-classify pipeline over external person detections."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import BBox, crop_bounds, preprocess_pair
from .errors import AdapterUnavailable, EmptyCrop, InvalidDetection, MalformedDetections

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidDetection(f"score {self.score} outside [0, 1]")
        if self.bbox.w <= 0 or self.bbox.h <= 0:
            raise InvalidDetection(f"degenerate bbox {self.bbox.as_list()}")


@dataclass
class DetectionSet:
    detections: dict = field(default_factory=dict)  # image_id -> list[Detection]
    source: str = ""

    def __len__(self):
        return sum(len(v) for v in self.detections.values())

    def get(self, image_id):
        return list(self.detections.get(str(image_id), []))


@dataclass(frozen=True)
class GesturePrediction:
    image_id: str
    bbox: BBox
    label_name: str
    label_id: int
    probability: float
    full_distribution: tuple

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "bbox": self.bbox.as_list(),
            "label_name": self.label_name,
            "label_id": self.label_id,
            "probability": self.probability,
            "full_distribution": list(self.full_distribution),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["image_id"]), BBox(*d["bbox"]), d["label_name"], int(d["label_id"]),
                   float(d["probability"]), tuple(float(p) for p in d["full_distribution"]))


def check_detection(det: Detection, width, height):
    if det.bbox.clamp(width, height) is None:
        raise InvalidDetection(f"bbox {det.bbox.as_list()} lies outside the {width}x{height} image")
    return det


# ---------------------------------------------------------------- detection files

def parse_detections(doc, score_threshold=0.5, source="", category_id=None) -> DetectionSet:
    """COCO results list -> DetectionSet, dropping scores below the threshold."""
    if not isinstance(doc, list):
        raise MalformedDetections("detections must be a JSON list")
    out = {}
    for i, d in enumerate(doc):
        try:
            image_id = str(d["image_id"])
            box = d["bbox"]
            score = float(d.get("score", 1.0))
            if len(box) != 4:
                raise ValueError("bbox must have 4 numbers")
            det = Detection(BBox(*(float(v) for v in box)), score)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedDetections(f"[{i}]: {e}") from None
        if category_id is not None and d.get("category_id") != category_id:
            continue
        if score < score_threshold:
            continue
        out.setdefault(image_id, []).append(det)
    return DetectionSet(out, source)


def load_detections(path, score_threshold=0.5, category_id=None) -> DetectionSet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedDetections(f"{path}: {e}") from None
    return parse_detections(doc, score_threshold, source=str(path), category_id=category_id)


def detections_from_manifest(manifest, split=None, category_id=1) -> list[dict]:
    """Ground-truth boxes as COCO results entries with score 1.0."""
    insts = manifest.split_instances(split) if split else manifest.instances
    return [
        {"image_id": p.image_id, "category_id": category_id, "bbox": p.bbox.as_list(), "score": 1.0}
        for p in insts
    ]


def save_detections(entries, path):
    Path(path).write_text(json.dumps(entries), encoding="utf-8")


# ---------------------------------------------------------------- adapters

class NullAdapter:
    """One full-image box per image."""

    def __call__(self, image, image_id=None):
        h, w = image.shape[:2]
        return [Detection(BBox(0, 0, w, h), 1.0)]


class ReplayAdapter:
    """Replays precomputed detections for each image id."""

    def __init__(self, detection_set: DetectionSet):
        self.detection_set = detection_set

    def __call__(self, image, image_id=None):
        return self.detection_set.get(image_id)


ADAPTERS = {"null": NullAdapter, "replay": ReplayAdapter}


def register_adapter(name, factory):
    ADAPTERS[name] = factory


def get_adapter(name, **kwargs):
    if name not in ADAPTERS:
        raise AdapterUnavailable(f"{name!r}; registered: {sorted(ADAPTERS)}")
    return ADAPTERS[name](**kwargs)


def run_adapter(adapter, image, image_id=None) -> list[Detection]:
    """Call ``adapter`` and enforce the detection invariants on its output."""
    h, w = image.shape[:2]
    dets = adapter(image, image_id)
    return [check_detection(d if isinstance(d, Detection) else Detection(*d), w, h) for d in dets]


# ---------------------------------------------------------------- prediction

@torch.no_grad()
def predict(model, image, detections, cfg=None, image_id="", batch_size=16) -> list[GesturePrediction]:
    """Classify every detection, using its crop plus the full image.

    Detections whose crop is empty are skipped with a logged warning.
    """
    cfg = cfg or model.preprocess
    if cfg is None:
        raise ValueError("no preprocessing config on the model; pass cfg")
    names = model.labels.names if model.labels is not None else tuple(str(i) for i in range(model.num_classes))
    h, w = image.shape[:2]
    kept, crops, contexts = [], [], []
    context = None
    for det in detections:
        try:
            crop_bounds(det.bbox, w, h, cfg.pad_ratio)
        except EmptyCrop as e:
            log.warning("skipping detection on image %s: %s", image_id, e)
            continue
        crop, ctx = preprocess_pair(image, det.bbox, cfg)
        if context is None:
            context = ctx
        kept.append(det)
        crops.append(crop)
        contexts.append(context)
    if not kept:
        return []
    model.eval()
    probs = []
    for i in range(0, len(kept), batch_size):
        logits = model(torch.stack(crops[i:i + batch_size]), torch.stack(contexts[i:i + batch_size]))
        probs.append(torch.softmax(logits.double(), dim=1))
    probs = torch.cat(probs).numpy()
    out = []
    for det, p in zip(kept, probs):
        k = int(np.argmax(p))
        out.append(GesturePrediction(str(image_id), det.bbox, names[k], k, float(p[k]), tuple(float(v) for v in p)))
    return out


def export_predictions(preds, path, format="json", class_names=None):
    """JSON is lossless; CSV has 5 fixed columns plus one per class."""
    path = Path(path)
    if format == "json":
        path.write_text(json.dumps([p.to_dict() for p in preds], indent=1), encoding="utf-8")
        return
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")
    C = len(preds[0].full_distribution) if preds else len(class_names or ())
    names = list(class_names) if class_names is not None else [str(i) for i in range(C)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["image_id", "bbox", "label_name", "label_id", "probability", *[f"p_{n}" for n in names]])
        for p in preds:
            box = " ".join(repr(float(v)) for v in p.bbox.as_list())
            wr.writerow([p.image_id, box, p.label_name, p.label_id, repr(p.probability),
                         *[repr(v) for v in p.full_distribution]])


def load_predictions(path) -> list[GesturePrediction]:
    return [GesturePrediction.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
