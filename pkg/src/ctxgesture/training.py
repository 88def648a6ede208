"""Joint optimization of both backbones and the fusion head."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import GestureDataset, class_distribution
from .errors import AllZeroCounts, DivergenceDetected, LabelOutOfRange, ShapeMismatch
from .model import save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    seed: int
    epoch_history: list = field(default_factory=list)
    best_checkpoint_path: str | None = None
    best_val_macro_f1: float = float("-inf")
    best_epoch: int = 0
    stopped_epoch: int = 0
    test_report: object = None


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def compute_class_weights(distribution, scheme="inverse_frequency", beta=0.999) -> np.ndarray:
    """Per-class loss weights with mean 1, in the distribution's key order.

    Classes with zero count get the largest weight computed for the others.
    """
    counts = np.array(list(distribution.values()) if hasattr(distribution, "values") else distribution, dtype=float)
    if counts.size == 0 or not (counts > 0).any():
        raise AllZeroCounts("at least one class needs a positive count")
    if scheme == "none":
        return np.ones_like(counts)
    pos = counts > 0
    w = np.zeros_like(counts)
    if scheme == "inverse_frequency":
        w[pos] = counts.sum() / (len(counts) * counts[pos])
    elif scheme == "effective_number":
        w[pos] = (1.0 - beta) / (1.0 - np.power(beta, counts[pos]))
    else:
        raise ValueError(f"unknown weighting scheme {scheme!r}")
    w[~pos] = w[pos].max()
    return w / w.mean()


def weighted_cross_entropy(logits, labels, weights=None, smoothing=0.0):
    """Batch mean of w[y_i] * CE(softmax(logits_i), smoothed one-hot(y_i)).

    Smoothing mixes the one-hot target with the uniform distribution:
    ``(1 - s) * onehot + s / C``. Note the plain batch mean: this is not
    torch's weight-normalized reduction.
    """
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    C = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    if weights is None:
        w = torch.ones(C, dtype=logits.dtype, device=logits.device)
    else:
        w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
        if w.shape != (C,):
            raise ShapeMismatch(f"weights must have length {C}")
    target = F.one_hot(labels, C).to(logits.dtype) * (1.0 - smoothing) + smoothing / C
    per_sample = -(target * F.log_softmax(logits, dim=1)).sum(dim=1)
    return (w[labels] * per_sample).mean()


def _optimizer(model, cfg: TrainConfig):
    head = list(model.head.parameters())
    head_ids = {id(p) for p in head}
    backbone = [p for p in model.parameters() if id(p) not in head_ids]
    groups = [{"params": backbone, "lr": cfg.backbone_lr}, {"params": head, "lr": cfg.head_lr}]
    if cfg.optimizer == "adamw":
        opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(groups, momentum=0.9, weight_decay=cfg.weight_decay)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


def _loader(dataset, cfg, epoch, shuffle):
    g = torch.Generator()
    g.manual_seed(cfg.seed * 100003 + epoch)
    return torch.utils.data.DataLoader(
        dataset, batch_size=cfg.batch_size, shuffle=shuffle, generator=g, num_workers=cfg.num_workers
    )


def train_step(model, batch, optimizer, weights, cfg: TrainConfig) -> float:
    crop, context, labels = batch
    model.train()
    optimizer.zero_grad()
    logits = model(crop, context)
    loss = weighted_cross_entropy(logits, labels, weights, cfg.label_smoothing)
    if not torch.isfinite(loss):
        return float("nan")
    loss.backward()
    optimizer.step()
    return loss.item()


def train(model, manifest, cfg: TrainConfig, out_dir=None, evaluate_fn=None, train_split="train", val_split="val") -> TrainState:
    """Train ``model`` in place and restore its best weights.

    Model selection uses validation macro-F1 (train split if there is no
    usable validation split). ``evaluate_fn(model, epoch) -> float``
    overrides the selection metric. With ``out_dir`` the best checkpoint
    and a JSON-lines epoch log are written there.
    """
    from .evaluation import evaluate_split

    if model.num_classes != len(manifest.labels):
        raise ShapeMismatch(f"model has {model.num_classes} classes, manifest {len(manifest.labels)}")
    seed_everything(cfg.seed)
    if model.preprocess is None:
        model.preprocess = cfg
    if model.labels is None:
        model.labels = manifest.labels

    dist = class_distribution(manifest, train_split)
    weights = torch.tensor(compute_class_weights(dist, cfg.class_weighting, cfg.effective_beta), dtype=torch.float32)
    dataset = GestureDataset(manifest, train_split, cfg, augment=True)
    if len(dataset) == 0:
        raise ValueError(f"split {train_split!r} is empty")
    if evaluate_fn is None:
        sel_split = val_split if manifest.splits.get(val_split) else train_split
        if sel_split != val_split:
            log.warning("no %r split; selecting on %r", val_split, sel_split)

        def evaluate_fn(m, epoch):
            return evaluate_split(m, manifest, sel_split, cfg=cfg).macro_f1

    optimizer, sched = _optimizer(model, cfg)
    state = TrainState(seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w", encoding="utf-8")
    best_weights, stale = None, 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            dataset.set_epoch(epoch)
            lr = optimizer.param_groups[1]["lr"]
            total, n = 0.0, 0
            for batch in _loader(dataset, cfg, epoch, shuffle=True):
                loss = train_step(model, batch, optimizer, weights, cfg)
                if math.isnan(loss):
                    state.stopped_epoch = epoch
                    if out is not None:
                        save_checkpoint(model, out / "diverged.ckpt")
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch}", state)
                total += loss * len(batch[2])
                n += len(batch[2])
            sched.step()
            metric = float(evaluate_fn(model, epoch))
            rec = {"epoch": epoch, "train_loss": total / n, "val_macro_f1": metric, "lr": lr}
            state.epoch_history.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            log.info("epoch %d loss %.4f val_macro_f1 %.4f", epoch, rec["train_loss"], metric)
            state.stopped_epoch = epoch
            if metric > state.best_val_macro_f1:
                state.best_val_macro_f1, state.best_epoch, stale = metric, epoch, 0
                best_weights = copy.deepcopy(model.state_dict())
                if out is not None:
                    save_checkpoint(model, out / "best.ckpt", extra={"epoch": epoch, "seed": cfg.seed})
                    state.best_checkpoint_path = str(out / "best.ckpt")
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    finally:
        if log_file is not None:
            log_file.close()
    if best_weights is not None:
        model.load_state_dict(best_weights)
    model.eval()
    return state


def run_multi_seed(cfg_base: TrainConfig, seeds, model_factory, manifest, out_dir=None, test_split="test", variant=None):
    """Independent train + test evaluation per seed.

    ``model_factory()`` is called after seeding so initialization also
    derives from the seed. Each returned state carries its ``test_report``.
    """
    from .evaluation import evaluate_split

    states = []
    for seed in seeds:
        cfg = replace(cfg_base, seed=seed)
        seed_everything(seed)
        model = model_factory()
        run_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
        state = train(model, manifest, cfg, out_dir=run_dir)
        if manifest.splits.get(test_split):
            state.test_report = evaluate_split(model, manifest, test_split, variant=variant, cfg=cfg, seed=seed)
        states.append(state)
    return states
