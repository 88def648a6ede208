# %% [markdown]
# Annotations, validation and the two input streams.
#
# Builds a small synthetic COCO-style dataset, parses it, checks it, and
# looks at what the model actually receives for one person.

# %%
import tempfile
from pathlib import Path

from ctxgesture import TrainConfig, class_distribution, make_example, parse_annotations, validate_manifest
from ctxgesture.data import crop_bounds, load_image
from ctxgesture.synthetic import make_synthetic_dataset

root = Path(tempfile.mkdtemp())
ann = make_synthetic_dataset(root, mode="crop", per_class=5, splits=(("train", 1.0), ("test", 0.4)))
manifest = parse_annotations(ann)
print(len(manifest.images), "images,", len(manifest.instances), "persons")
print("labels:", manifest.labels.names)

# %%
# validation returns a list of issues rather than raising
issues = validate_manifest(manifest)
print("issues:", [str(i) for i in issues] or "none")
print(class_distribution(manifest, "train"))

# %%
# one person: its padded crop window and the full-image context
person = manifest.split_instances("train")[0]
image = load_image(manifest.image(person.image_id).file_path)
print("image", image.shape, "bbox", person.bbox.as_list())
for pad in (0.0, 0.1, 0.25):
    print(f"pad {pad}: crop window", crop_bounds(person.bbox, image.shape[1], image.shape[0], pad))

cfg = TrainConfig(crop_size=(24, 24), context_size=(32, 32))
crop, context, label = make_example(person, manifest, cfg)
print("crop tensor", tuple(crop.shape), "context tensor", tuple(context.shape), "label", label)
