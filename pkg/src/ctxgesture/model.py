"""Two-stream network: person-crop backbone, context backbone, fusion head."""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .config import ACTIVATIONS, TrainConfig, train_config_from_dict, train_config_to_dict
from .data import LabelMap
from .errors import (
    CorruptCheckpoint,
    PretrainedWeightsUnavailable,
    ShapeMismatch,
    UnknownBackbone,
    VersionMismatch,
)

FORMAT_VERSION = 1
CONCAT_ORDER = ("person", "context")
_MAGIC = b"CTXGCKPT"
WEIGHTS_DIR_ENV = "CTXGESTURE_WEIGHTS_DIR"

NATIVE_DIMS = {"resnet50": 2048, "resnet101": 2048, "hrnet_w32": 2048, "swin_v2": 768, "tiny_test": 32}


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    pretrained: bool = False
    feature_dim: int = 0  # 0 -> native pooled width

    def __post_init__(self):
        if self.family not in NATIVE_DIMS:
            raise UnknownBackbone(f"{self.family!r}; known: {sorted(NATIVE_DIMS)}")
        if self.feature_dim == 0:
            object.__setattr__(self, "feature_dim", NATIVE_DIMS[self.family])
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be > 0")


@dataclass(frozen=True)
class FusionHeadConfig:
    hidden_dims: tuple = (1024, 512, 256)
    dropout: float = 0.5
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.hidden_dims) != 3 or min(self.hidden_dims) <= 0:
            raise ValueError(f"need exactly 3 positive hidden widths, got {self.hidden_dims}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


# ---------------------------------------------------------------- backbones

class TinyBackbone(nn.Module):
    """Small conv stack + global average pooling, for CPU-scale runs."""

    def __init__(self, out_dim=32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, out_dim, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.features(x)


def _local_weights(family):
    root = os.environ.get(WEIGHTS_DIR_ENV)
    if root:
        p = Path(root) / f"{family}.pth"
        if p.is_file():
            return torch.load(p, map_location="cpu", weights_only=True)
    return None


def _torchvision_net(family, pretrained):
    import torchvision.models as tvm

    ctor, weights = {
        "resnet50": (tvm.resnet50, "ResNet50_Weights"),
        "resnet101": (tvm.resnet101, "ResNet101_Weights"),
        "swin_v2": (tvm.swin_v2_t, "Swin_V2_T_Weights"),
    }[family]
    local = _local_weights(family) if pretrained else None
    if pretrained and local is None:
        try:
            net = ctor(weights=getattr(tvm, weights).DEFAULT)
        except Exception as e:
            raise PretrainedWeightsUnavailable(
                f"{family}: {e}. Place {family}.pth in ${WEIGHTS_DIR_ENV} or set pretrained=false"
            ) from None
    else:
        net = ctor(weights=None)
        if local is not None:
            net.load_state_dict(local)
    if family == "swin_v2":
        net.head = nn.Identity()
    else:
        net.fc = nn.Identity()
    return net


def _timm_net(family, pretrained):
    try:
        import timm
    except ImportError:
        raise UnknownBackbone(f"{family} needs the optional 'timm' package") from None
    local = _local_weights(family) if pretrained else None
    try:
        net = timm.create_model("hrnet_w32", pretrained=pretrained and local is None, num_classes=0)
    except Exception as e:
        raise PretrainedWeightsUnavailable(f"{family}: {e}") from None
    if local is not None:
        net.load_state_dict(local, strict=False)
    return net


def make_backbone(spec: BackboneSpec) -> nn.Module:
    """Backbone mapping images to (batch, spec.feature_dim) vectors."""
    native = NATIVE_DIMS[spec.family]
    if spec.family == "tiny_test":
        if spec.pretrained:
            local = _local_weights("tiny_test")
            if local is None:
                raise PretrainedWeightsUnavailable("tiny_test has no published weights")
            net = TinyBackbone(spec.feature_dim)
            net.load_state_dict(local)
            return net
        return TinyBackbone(spec.feature_dim)
    if spec.family == "hrnet_w32":
        net = _timm_net(spec.family, spec.pretrained)
    else:
        net = _torchvision_net(spec.family, spec.pretrained)
    if spec.feature_dim != native:
        net = nn.Sequential(net, nn.Linear(native, spec.feature_dim))
    return net


# ---------------------------------------------------------------- head

_ACT = {"relu": nn.ReLU, "gelu": nn.GELU, "leaky_relu": nn.LeakyReLU}


class FusionHead(nn.Module):
    """Four linear layers: three hidden + the class projection."""

    def __init__(self, in_dim, num_classes, cfg: FusionHeadConfig):
        super().__init__()
        widths = (in_dim, *cfg.hidden_dims, num_classes)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.act = _ACT[cfg.activation]()
        self.drop = nn.Dropout(cfg.dropout)
        for lin in self.layers:
            nn.init.kaiming_uniform_(lin.weight, nonlinearity="relu")
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < 3:
                x = self.act(x)
                if i < 2:
                    x = self.drop(x)
        return x


class TwoStreamModel(nn.Module):
    def __init__(self, crop_spec, context_spec, head_cfg, num_classes, use_context=True, labels=None, preprocess=None):
        super().__init__()
        self.crop_spec = crop_spec
        self.context_spec = context_spec
        self.head_cfg = head_cfg
        self.num_classes = num_classes
        self.use_context = use_context
        self.labels = labels
        self.preprocess = preprocess
        self.crop_backbone = make_backbone(crop_spec)
        self.context_backbone = make_backbone(context_spec) if use_context else None
        in_dim = crop_spec.feature_dim + (context_spec.feature_dim if use_context else 0)
        self.head = FusionHead(in_dim, num_classes, head_cfg)

    @property
    def variant(self):
        return "with_context" if self.use_context else "without_context"

    def extract_features(self, crop_batch, context_batch=None):
        if self.use_context:
            if context_batch is None:
                raise ShapeMismatch("context batch required for a with-context model")
            if crop_batch.shape[0] != context_batch.shape[0]:
                raise ShapeMismatch(f"batch sizes differ: {crop_batch.shape[0]} vs {context_batch.shape[0]}")
        f_person = self.crop_backbone(crop_batch)
        f_context = self.context_backbone(context_batch) if self.use_context else None
        return f_person, f_context

    def fuse_and_classify(self, f_person, f_context=None, ablate_context=False):
        """Logits from (person, context) features, concatenated in that order.

        ``ablate_context`` zeroes the context features (test-time ablation of
        a with-context model).
        """
        if f_person.shape[-1] != self.crop_spec.feature_dim:
            raise ShapeMismatch(f"person features have width {f_person.shape[-1]}, expected {self.crop_spec.feature_dim}")
        if not self.use_context:
            return self.head(f_person)
        if ablate_context:
            f_context = torch.zeros(f_person.shape[0], self.context_spec.feature_dim, dtype=f_person.dtype, device=f_person.device)
        if f_context is None or f_context.shape[-1] != self.context_spec.feature_dim:
            raise ShapeMismatch(f"context features must have width {self.context_spec.feature_dim}")
        if f_context.shape[0] != f_person.shape[0]:
            raise ShapeMismatch("feature batch sizes differ")
        return self.head(torch.cat([f_person, f_context], dim=1))

    def forward(self, crop_batch, context_batch=None, ablate_context=False):
        if ablate_context and self.use_context:
            f_person = self.crop_backbone(crop_batch)
            return self.fuse_and_classify(f_person, None, ablate_context=True)
        return self.fuse_and_classify(*self.extract_features(crop_batch, context_batch))

    def parameter_groups(self):
        """Named parameter groups: each backbone and each head layer."""
        groups = {"crop_backbone": list(self.crop_backbone.parameters())}
        if self.context_backbone is not None:
            groups["context_backbone"] = list(self.context_backbone.parameters())
        for i, lin in enumerate(self.head.layers):
            groups[f"head.{i}"] = list(lin.parameters())
        return groups


def build_model(crop_spec, context_spec, head_cfg, num_classes, use_context=True, labels=None, preprocess=None) -> TwoStreamModel:
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if labels is not None and len(labels) != num_classes:
        raise ValueError("label map size differs from num_classes")
    return TwoStreamModel(crop_spec, context_spec, head_cfg, num_classes, use_context, labels, preprocess)


def model_from_config(mcfg, num_classes, labels=None, preprocess=None) -> TwoStreamModel:
    """Build from a :class:`ModelConfig` section."""
    crop = BackboneSpec(mcfg.backbone, mcfg.pretrained, mcfg.feature_dim)
    ctx = BackboneSpec(mcfg.context_backbone or mcfg.backbone, mcfg.pretrained, mcfg.feature_dim)
    head = FusionHeadConfig(tuple(mcfg.hidden_dims), mcfg.dropout, mcfg.activation)
    return build_model(crop, ctx, head, num_classes, mcfg.use_context, labels, preprocess)


# ---------------------------------------------------------------- checkpoints

def _header(model: TwoStreamModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "crop_backbone": asdict(model.crop_spec),
        "context_backbone": asdict(model.context_spec),
        "head": {**asdict(model.head_cfg), "hidden_dims": list(model.head_cfg.hidden_dims)},
        "num_classes": model.num_classes,
        "use_context": model.use_context,
        "labels": list(model.labels.names) if model.labels is not None else None,
        "concat_order": list(CONCAT_ORDER),
        "preprocess": train_config_to_dict(model.preprocess) if model.preprocess is not None else None,
    }


def save_checkpoint(model: TwoStreamModel, path, extra=None):
    """Write magic, a length-prefixed JSON header, then the torch state payload."""
    header = _header(model)
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC) or len(data) < len(_MAGIC) + 4:
        raise CorruptCheckpoint(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", data[len(_MAGIC):len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if header.get("concat_order") != list(CONCAT_ORDER):
        raise CorruptCheckpoint(f"{path}: unsupported concat order {header.get('concat_order')}")
    return header, data[start + n:]


def load_checkpoint(path) -> TwoStreamModel:
    header, payload = read_checkpoint_header(path)
    try:
        crop = BackboneSpec(**{**header["crop_backbone"], "pretrained": False})
        ctx = BackboneSpec(**{**header["context_backbone"], "pretrained": False})
        head = FusionHeadConfig(**header["head"])
        labels = LabelMap(tuple(header["labels"])) if header.get("labels") else None
        pre = train_config_from_dict(header["preprocess"]) if header.get("preprocess") else None
        model = build_model(crop, ctx, head, header["num_classes"], header["use_context"], labels, pre)
        # keep the recorded flag; weights come from the payload
        model.crop_spec = BackboneSpec(**header["crop_backbone"])
        model.context_spec = BackboneSpec(**header["context_backbone"])
        state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (KeyError, TypeError, RuntimeError, EOFError, ValueError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from None
    model.eval()
    return model
