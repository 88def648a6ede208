# %% [markdown]
# Detections in, gesture labels out.
#
# Person boxes come from an external detector; here we replay the ground
# truth as a detector would and export the predictions.

# %%
import tempfile
from pathlib import Path

from ctxgesture import BackboneSpec, FusionHeadConfig, TrainConfig, build_model, load_checkpoint, parse_annotations, save_checkpoint
from ctxgesture.data import load_image
from ctxgesture.inference import detections_from_manifest, export_predictions, get_adapter, load_detections, predict, run_adapter, save_detections
from ctxgesture.synthetic import make_synthetic_dataset

root = Path(tempfile.mkdtemp())
manifest = parse_annotations(make_synthetic_dataset(root, per_class=3))

spec = BackboneSpec("tiny_test", feature_dim=32)
cfg = TrainConfig(crop_size=(24, 24), context_size=(32, 32), mean=(0.5,) * 3, std=(0.25,) * 3)
model = build_model(spec, spec, FusionHeadConfig((64, 64, 32), 0.5), len(manifest.labels),
                    labels=manifest.labels, preprocess=cfg)
save_checkpoint(model, root / "model.ckpt")
model = load_checkpoint(root / "model.ckpt")  # untrained, so labels are arbitrary

# %%
save_detections(detections_from_manifest(manifest), root / "dets.json")
dets = load_detections(root / "dets.json", score_threshold=0.5)
adapter = get_adapter("replay", detection_set=dets)

preds = []
for rec in manifest.images[:4]:
    image = load_image(rec.file_path)
    preds += predict(model, image, run_adapter(adapter, image, rec.image_id), image_id=rec.image_id)
for p in preds:
    print(p.image_id, p.bbox.as_list(), p.label_name, round(p.probability, 3))

# %%
export_predictions(preds, root / "preds.csv", "csv", class_names=manifest.labels.names)
print((root / "preds.csv").read_text().splitlines()[0])
