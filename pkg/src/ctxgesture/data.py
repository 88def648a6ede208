"""Annotation ingestion, validation and example construction.

Annotations use a COCO-style layout::

    {"images": [{"id", "file_name", "width", "height"}],
     "annotations": [{"id", "image_id", "bbox": [x, y, w, h], "category_id", "split"?}],
     "categories": [{"id", "name"}]}

Splits come either from a per-annotation ``split`` field or from one file
per split (see :func:`parse_split_files`).
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

from .config import TrainConfig
from .errors import (
    DanglingImageRef,
    EmptyCrop,
    ImageDecodeError,
    MalformedAnnotation,
    UnknownLabel,
    UnknownSplit,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabelMap:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("a label map needs at least 2 classes")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    def __len__(self):
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownLabel(name) from None

    def __contains__(self, name):
        return name in self.names


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def clamp(self, width, height) -> "BBox | None":
        """Intersection with the image rectangle, or None if it is empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def as_list(self):
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    file_path: str
    width: int
    height: int


@dataclass(frozen=True)
class PersonInstance:
    instance_id: str
    image_id: str
    bbox: BBox
    label_id: int


@dataclass(frozen=True)
class Issue:
    record: str
    rule: str
    detail: str = ""

    def __str__(self):
        return f"{self.record}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class DatasetManifest:
    images: tuple
    instances: tuple
    labels: LabelMap
    splits: Mapping[str, frozenset]
    _image_index: dict = field(init=False, repr=False, compare=False)
    _instance_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "splits", {k: frozenset(v) for k, v in self.splits.items()})
        object.__setattr__(self, "_image_index", {im.image_id: im for im in self.images})
        object.__setattr__(self, "_instance_index", {p.instance_id: p for p in self.instances})

    def image(self, image_id) -> ImageRecord:
        return self._image_index[image_id]

    def instance(self, instance_id) -> PersonInstance:
        return self._instance_index[instance_id]

    def split_instances(self, split) -> list[PersonInstance]:
        if split not in self.splits:
            raise UnknownSplit(f"{split!r} not in {sorted(self.splits)}")
        ids = self.splits[split]
        return [p for p in self.instances if p.instance_id in ids]


# ---------------------------------------------------------------- parsing

def _require(obj, key, kind, path):
    if not isinstance(obj, dict):
        raise MalformedAnnotation("expected an object", path)
    if key not in obj:
        raise MalformedAnnotation(f"missing key {key!r}", path)
    val = obj[key]
    if kind is not None and (not isinstance(val, kind) or isinstance(val, bool)):
        raise MalformedAnnotation(f"{key!r} has wrong type {type(val).__name__}", f"{path}.{key}")
    return val


def _build_label_map(categories, label_map, include_background, background_name):
    if label_map is not None:
        return label_map
    names = [c["name"] for c in sorted(categories, key=lambda c: c["id"])]
    if background_name in names:
        names.remove(background_name)
        if include_background:
            names.insert(0, background_name)
    return LabelMap(tuple(names))


def parse_annotation_doc(
    doc,
    label_map=None,
    images_root=None,
    default_split="train",
    drop_unknown=False,
    include_background=True,
    background_name="background",
) -> DatasetManifest:
    """Build a manifest from an already-decoded annotation document.

    Structural problems raise; record-level rule violations (degenerate
    boxes, overlapping splits, missing files) are left for
    :func:`validate_manifest`.
    """
    images_raw = _require(doc, "images", list, "$")
    anns_raw = _require(doc, "annotations", list, "$")
    cats_raw = _require(doc, "categories", list, "$")

    categories = []
    for i, c in enumerate(cats_raw):
        p = f"$.categories[{i}]"
        categories.append({"id": _require(c, "id", (int, str), p), "name": _require(c, "name", str, p)})
    cat_name = {c["id"]: c["name"] for c in categories}
    labels = _build_label_map(categories, label_map, include_background, background_name)

    root = Path(images_root) if images_root is not None else None
    images = []
    for i, im in enumerate(images_raw):
        p = f"$.images[{i}]"
        file_name = _require(im, "file_name", str, p)
        w = _require(im, "width", (int, float), p)
        h = _require(im, "height", (int, float), p)
        path = str(root / file_name) if root is not None else file_name
        images.append(ImageRecord(str(_require(im, "id", (int, str), p)), path, int(w), int(h)))
    image_ids = {im.image_id for im in images}
    if len(image_ids) != len(images):
        raise MalformedAnnotation("duplicate image ids", "$.images")

    instances, splits = [], {}
    for i, a in enumerate(anns_raw):
        p = f"$.annotations[{i}]"
        ann_id = str(_require(a, "id", (int, str), p))
        image_id = str(_require(a, "image_id", (int, str), p))
        box = _require(a, "bbox", list, p)
        if len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise MalformedAnnotation("bbox must be 4 numbers [x, y, w, h]", f"{p}.bbox")
        cid = _require(a, "category_id", (int, str), p)
        if cid not in cat_name:
            raise MalformedAnnotation(f"category_id {cid!r} not in categories", f"{p}.category_id")
        name = cat_name[cid]
        if name not in labels:
            if drop_unknown or (name == background_name and not include_background):
                continue
            raise UnknownLabel(f"{p}: category {name!r} not in label map")
        if image_id not in image_ids:
            raise DanglingImageRef(f"{p}: image_id {image_id!r} not in images")
        split = a.get("split", default_split)
        if not isinstance(split, str):
            raise MalformedAnnotation("split must be a string", f"{p}.split")
        instances.append(PersonInstance(ann_id, image_id, BBox(*box), labels.index_of(name)))
        splits.setdefault(split, set()).add(ann_id)
    if len({p.instance_id for p in instances}) != len(instances):
        raise MalformedAnnotation("duplicate annotation ids", "$.annotations")

    return DatasetManifest(tuple(images), tuple(instances), labels, splits)


def parse_annotations(path, label_map=None, images_root=None, **kw) -> DatasetManifest:
    """Parse a COCO-style annotation file into a :class:`DatasetManifest`.

    ``images_root`` defaults to the annotation file's directory. Extra
    keyword arguments go to :func:`parse_annotation_doc`.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedAnnotation(f"invalid JSON: {e}") from None
    if images_root is None:
        images_root = path.parent
    return parse_annotation_doc(doc, label_map=label_map, images_root=images_root, **kw)


def parse_split_files(paths: Mapping[str, str], label_map=None, images_root=None, **kw) -> DatasetManifest:
    """Merge one annotation file per split into a single manifest.

    The label map is taken from the first file unless given; images shared
    between files are de-duplicated by id.
    """
    images, instances, splits = {}, [], {}
    for split, path in paths.items():
        m = parse_annotations(path, label_map=label_map, images_root=images_root, default_split=split, **kw)
        label_map = m.labels
        for im in m.images:
            if im.image_id in images and images[im.image_id] != im:
                raise MalformedAnnotation(f"image {im.image_id!r} differs between split files")
            images[im.image_id] = im
        for inst in m.instances:
            instances.append(inst)
        for k, v in m.splits.items():
            splits.setdefault(k, set()).update(v)
    if len({p.instance_id for p in instances}) != len(instances):
        raise MalformedAnnotation("annotation ids collide across split files")
    return DatasetManifest(tuple(images.values()), tuple(instances), label_map, splits)


def manifest_to_doc(manifest: DatasetManifest, images_root=None) -> dict:
    """Inverse of :func:`parse_annotation_doc` (split stored per annotation)."""
    split_of = {}
    for name, ids in manifest.splits.items():
        for i in ids:
            split_of.setdefault(i, name)
    images = []
    for im in manifest.images:
        fn = os.path.relpath(im.file_path, images_root) if images_root is not None else im.file_path
        images.append({"id": im.image_id, "file_name": fn, "width": im.width, "height": im.height})
    anns = []
    for p in manifest.instances:
        a = {"id": p.instance_id, "image_id": p.image_id, "bbox": p.bbox.as_list(), "category_id": p.label_id}
        if p.instance_id in split_of:
            a["split"] = split_of[p.instance_id]
        anns.append(a)
    cats = [{"id": i, "name": n} for i, n in enumerate(manifest.labels.names)]
    return {"images": images, "annotations": anns, "categories": cats}


def save_manifest(manifest: DatasetManifest, path, images_root=None):
    path = Path(path)
    if images_root is None:
        images_root = path.parent
    path.write_text(json.dumps(manifest_to_doc(manifest, images_root), indent=1), encoding="utf-8")


# ---------------------------------------------------------------- validation

def validate_manifest(manifest: DatasetManifest, check_files=True) -> list[Issue]:
    issues = []
    C = len(manifest.labels)
    images = {}
    for im in manifest.images:
        if im.image_id in images:
            issues.append(Issue(f"image {im.image_id}", "duplicate image_id"))
        images[im.image_id] = im
        if im.width <= 0 or im.height <= 0:
            issues.append(Issue(f"image {im.image_id}", "non-positive size", f"{im.width}x{im.height}"))
        if check_files and not _readable(im.file_path):
            issues.append(Issue(f"image {im.image_id}", "file missing or unreadable", im.file_path))

    seen = set()
    for p in manifest.instances:
        rec = f"instance {p.instance_id}"
        if p.instance_id in seen:
            issues.append(Issue(rec, "duplicate instance_id"))
        seen.add(p.instance_id)
        if not 0 <= p.label_id < C:
            issues.append(Issue(rec, "label_id out of range", f"{p.label_id} not in [0, {C})"))
        im = images.get(p.image_id)
        if im is None:
            issues.append(Issue(rec, "dangling image_id", p.image_id))
        b = p.bbox
        if b.w <= 0 or b.h <= 0:
            issues.append(Issue(rec, "degenerate bbox", f"w={b.w}, h={b.h}"))
        elif im is not None and im.width > 0 and im.height > 0 and b.clamp(im.width, im.height) is None:
            issues.append(Issue(rec, "bbox outside image", str(b.as_list())))

    members = Counter()
    for ids in manifest.splits.values():
        members.update(ids)
    for iid in sorted(i for i, n in members.items() if n > 1):
        where = sorted(s for s, ids in manifest.splits.items() if iid in ids)
        issues.append(Issue(f"instance {iid}", "in multiple splits", ",".join(where)))
    for iid in sorted(set(members) - seen):
        issues.append(Issue(f"instance {iid}", "split member without instance"))
    for iid in sorted(seen - set(members)):
        issues.append(Issue(f"instance {iid}", "instance not in any split"))
    return issues


def _readable(path):
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def class_distribution(manifest: DatasetManifest, split: str, exclude=()) -> dict[str, int]:
    """Per-class instance counts for ``split``, zero-count classes included.

    ``exclude`` drops class names from the output (e.g. the background class
    when plotting gesture distributions).
    """
    counts = Counter(p.label_id for p in manifest.split_instances(split))
    return {n: counts.get(i, 0) for i, n in enumerate(manifest.labels.names) if n not in exclude}


# ---------------------------------------------------------------- images

@lru_cache(maxsize=256)
def load_image(path) -> np.ndarray:
    """Decode to a read-only HxWx3 uint8 array (cached)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise ImageDecodeError(f"{path}: {e}") from None
    arr.setflags(write=False)
    return arr


def crop_bounds(bbox: BBox, width, height, pad_ratio=0.0):
    """Integer (x0, y0, x1, y1) of the padded box clamped to the image."""
    pad = pad_ratio * max(bbox.w, bbox.h)
    x0 = max(math.floor(bbox.x - pad), 0)
    y0 = max(math.floor(bbox.y - pad), 0)
    x1 = min(math.ceil(bbox.x + bbox.w + pad), width)
    y1 = min(math.ceil(bbox.y + bbox.h + pad), height)
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"bbox {bbox.as_list()} does not intersect a {width}x{height} image")
    return x0, y0, x1, y1


def extract_crop(image: np.ndarray, bbox: BBox, pad_ratio: float = 0.0) -> np.ndarray:
    """Copy the (padded, clamped) box region out of an HxWxC image."""
    if image.size == 0:
        raise ValueError("empty image")
    if not 0 <= pad_ratio <= 1:
        raise ValueError("pad_ratio must be in [0, 1]")
    h, w = image.shape[:2]
    x0, y0, x1, y1 = crop_bounds(bbox, w, h, pad_ratio)
    return image[y0:y1, x0:x1].copy()


def _to_tensor(arr: np.ndarray, size) -> torch.Tensor:
    t = torch.from_numpy(np.array(arr, dtype=np.uint8)).permute(2, 0, 1).float().div_(255.0)
    return torch.nn.functional.interpolate(
        t.unsqueeze(0), size=tuple(int(s) for s in size), mode="bilinear", align_corners=False, antialias=True
    ).squeeze(0)


def _jitter(t: torch.Tensor, b, c, s) -> torch.Tensor:
    t = t * b
    mean = t.mean()
    t = (t - mean) * c + mean
    gray = (0.299 * t[0] + 0.587 * t[1] + 0.114 * t[2]).unsqueeze(0)
    t = (t - gray) * s + gray
    return t.clamp_(0.0, 1.0)


def sample_augmentation(cfg: TrainConfig, rng: np.random.Generator) -> dict:
    j = cfg.color_jitter
    factors = rng.uniform(1 - j, 1 + j, size=3) if j > 0 else np.ones(3)
    return {"hflip": bool(rng.random() < cfg.hflip_prob), "jitter": tuple(float(f) for f in factors)}


def preprocess_pair(image: np.ndarray, bbox: BBox, cfg: TrainConfig, aug=None):
    """Crop + context tensors for one person, optionally augmented.

    The same flip and color factors are applied to both streams.
    """
    crop = _to_tensor(extract_crop(image, bbox, cfg.pad_ratio), cfg.crop_size)
    context = _to_tensor(image, cfg.context_size)
    if aug is not None:
        if aug["hflip"]:
            crop, context = crop.flip(-1), context.flip(-1)
        if aug["jitter"] != (1.0, 1.0, 1.0):
            crop, context = _jitter(crop, *aug["jitter"]), _jitter(context, *aug["jitter"])
    mean = torch.tensor(cfg.mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(cfg.std, dtype=torch.float32).view(3, 1, 1)
    return (crop - mean) / std, (context - mean) / std


def make_example(instance: PersonInstance, manifest: DatasetManifest, cfg: TrainConfig, augment=False, rng=None):
    """(crop_input, context_input, label_id) for one annotated person.

    With ``augment`` a flip/jitter draw is taken from ``rng`` (a numpy
    Generator; a fresh one seeded from ``cfg.seed`` if omitted).
    """
    image = load_image(manifest.image(instance.image_id).file_path)
    aug = None
    if augment:
        aug = sample_augmentation(cfg, rng if rng is not None else np.random.default_rng(cfg.seed))
    crop, context = preprocess_pair(image, instance.bbox, cfg, aug)
    return crop, context, instance.label_id


class GestureDataset(torch.utils.data.Dataset):
    """Map-style dataset over one split.

    Augmentation draws use a generator seeded by (seed, epoch, index), so
    results do not depend on worker count or iteration order.
    """

    def __init__(self, manifest, split, cfg: TrainConfig, augment=False):
        self.manifest = manifest
        self.instances = manifest.split_instances(split)
        self.cfg = cfg
        self.augment = augment
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i):
        rng = np.random.default_rng([self.cfg.seed, self.epoch, i]) if self.augment else None
        return make_example(self.instances[i], self.manifest, self.cfg, self.augment, rng)
