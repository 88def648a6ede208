"""Synthetic artwork-like datasets for CPU-scale checks.

Two flavours:

* ``mode="crop"``: the person box is filled with the class colour (plus
  noise); the background carries the same colour with probability
  ``correlation``, otherwise a random other class colour.
* ``mode="context"``: every person box holds the *same* fixed pattern, so
  only the background colour identifies the class.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = np.array(
    [
        [220, 40, 40],
        [40, 200, 40],
        [40, 60, 220],
        [230, 220, 40],
        [40, 210, 220],
        [210, 40, 210],
        [240, 140, 30],
        [120, 120, 120],
    ],
    dtype=np.float32,
)


def _person_pattern(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    check = ((yy // 3 + xx // 3) % 2).astype(np.float32)
    return np.repeat((60 + 120 * check)[..., None], 3, axis=2)


def make_synthetic_dataset(
    root,
    mode="crop",
    n_classes=6,
    per_class=10,
    splits=(("train", 1.0),),
    image_size=48,
    correlation=0.7,
    noise=12.0,
    seed=0,
    class_names=None,
) -> Path:
    """Write PNG images and ``annotations.json`` under ``root``.

    ``splits`` lists (name, multiplier) pairs; each split gets
    ``round(per_class * multiplier)`` instances per class, one person per
    image. Returns the annotation file path.
    """
    if mode not in ("crop", "context"):
        raise ValueError("mode must be 'crop' or 'context'")
    if n_classes > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} classes")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(class_names) if class_names else [f"gesture_{k}" for k in range(n_classes)]
    S = image_size
    bh, bw = S // 2, S // 3
    fixed = _person_pattern(bh, bw)

    images, anns = [], []
    idx = 0
    for split, mult in splits:
        for k in range(n_classes):
            for _ in range(int(round(per_class * mult))):
                if mode == "crop" and rng.random() >= correlation:
                    bg_class = int(rng.choice([c for c in range(n_classes) if c != k]))
                else:
                    bg_class = k
                img = PALETTE[bg_class] + rng.normal(0, noise, size=(S, S, 3))
                x = int(rng.integers(0, S - bw + 1))
                y = int(rng.integers(0, S - bh + 1))
                if mode == "crop":
                    person = PALETTE[k] * 0.8 + 0.2 * _person_pattern(bh, bw) + rng.normal(0, noise, size=(bh, bw, 3))
                else:
                    person = fixed
                img[y:y + bh, x:x + bw] = person
                fn = f"images/{split}_{idx:05d}.png"
                Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(root / fn)
                images.append({"id": idx, "file_name": fn, "width": S, "height": S})
                anns.append({"id": idx, "image_id": idx, "bbox": [x, y, bw, bh], "category_id": k + 1, "split": split})
                idx += 1

    doc = {
        "images": images,
        "annotations": anns,
        "categories": [{"id": k + 1, "name": n} for k, n in enumerate(names)],
    }
    path = root / "annotations.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path
