# %% [markdown]
# Training the two-stream model on a toy task.
#
# The tiny test backbone keeps this to a few seconds on CPU. Swap in
# ``resnet50`` with pretrained weights for real data.

# %%
import tempfile
from pathlib import Path

import torch

from ctxgesture import BackboneSpec, FusionHeadConfig, TrainConfig, build_model, parse_annotations, train
from ctxgesture.evaluation import evaluate_split
from ctxgesture.synthetic import make_synthetic_dataset
from ctxgesture.training import compute_class_weights, seed_everything

root = Path(tempfile.mkdtemp())
manifest = parse_annotations(make_synthetic_dataset(root, mode="crop", per_class=10,
                                                    splits=(("train", 1.0), ("val", 0.3), ("test", 0.3))))

# %%
# class weights from the training distribution
counts = [sum(p.label_id == k for p in manifest.split_instances("train")) for k in range(len(manifest.labels))]
print("counts", counts)
print("inverse frequency", compute_class_weights(counts, "inverse_frequency"))

# %%
cfg = TrainConfig(epochs=30, batch_size=16, backbone_lr=3e-3, head_lr=3e-3, weight_decay=0.0,
                  crop_size=(24, 24), context_size=(32, 32), mean=(0.5,) * 3, std=(0.25,) * 3, seed=0)
seed_everything(cfg.seed)
spec = BackboneSpec("tiny_test", feature_dim=32)
model = build_model(spec, spec, FusionHeadConfig((64, 64, 32), 0.5), len(manifest.labels), labels=manifest.labels)

out = root / "run"
state = train(model, manifest, cfg, out_dir=out)
for row in state.epoch_history[::5]:
    print(row)
print("best epoch", state.best_epoch, "val macro-F1", round(state.best_val_macro_f1, 3))

# %%
report = evaluate_split(model, manifest, "test")
print("test macro-F1", round(report.macro_f1, 3))
print(torch.tensor(report.confusion))
print("checkpoint at", state.best_checkpoint_path)
