import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxgesture.data import LabelMap
from ctxgesture.errors import (
    CorruptCheckpoint,
    PretrainedWeightsUnavailable,
    ShapeMismatch,
    UnknownBackbone,
    VersionMismatch,
)
from ctxgesture.model import (
    BackboneSpec,
    FusionHeadConfig,
    build_model,
    load_checkpoint,
    make_backbone,
    save_checkpoint,
)
from ctxgesture.training import weighted_cross_entropy

from conftest import small_cfg, tiny_model


def _batch(n=4, seed=0, size=(24, 24)):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, *size, generator=g), torch.randn(n, 3, 32, 32, generator=g)


def test_head_widths():
    m = tiny_model(hidden=(64, 64, 32))
    widths = [(l.in_features, l.out_features) for l in m.head.layers]
    assert widths == [(64, 64), (64, 64), (64, 32), (32, 6)]


def test_param_count_is_sum_of_parts():
    m = tiny_model()
    n = lambda mod: sum(p.numel() for p in mod.parameters())
    assert n(m) == n(m.crop_backbone) + n(m.context_backbone) + n(m.head)
    # separate backbones: no shared tensors
    crop_ids = {id(p) for p in m.crop_backbone.parameters()}
    assert crop_ids.isdisjoint(id(p) for p in m.context_backbone.parameters())


def test_resnet50_head_input_from_pooled_shape():
    spec = BackboneSpec("resnet50", pretrained=False)
    m = build_model(spec, spec, FusionHeadConfig(), 6)
    m.eval()
    with torch.no_grad():
        d1 = m.crop_backbone(torch.zeros(1, 3, 64, 64)).shape[1]
        d2 = m.context_backbone(torch.zeros(1, 3, 64, 64)).shape[1]
    assert d1 + d2 == m.head.layers[0].in_features == 4096


def test_swin_v2_pooled_width():
    net = make_backbone(BackboneSpec("swin_v2"))
    net.eval()
    with torch.no_grad():
        assert net(torch.zeros(1, 3, 64, 64)).shape == (1, 768)


def test_feature_dim_override_projects():
    net = make_backbone(BackboneSpec("resnet50", feature_dim=128))
    net.eval()
    with torch.no_grad():
        assert net(torch.zeros(1, 3, 64, 64)).shape == (1, 128)


def test_bad_configs():
    with pytest.raises(ValueError):
        FusionHeadConfig((64, 64))
    with pytest.raises(ValueError):
        FusionHeadConfig((64, 64, 32), dropout=1.0)
    with pytest.raises(UnknownBackbone):
        BackboneSpec("vgg16")
    spec = BackboneSpec("tiny_test")
    with pytest.raises(ValueError):
        build_model(spec, spec, FusionHeadConfig(), 1)


def test_pretrained_unavailable(monkeypatch):
    monkeypatch.delenv("CTXGESTURE_WEIGHTS_DIR", raising=False)
    with pytest.raises(PretrainedWeightsUnavailable):
        make_backbone(BackboneSpec("tiny_test", pretrained=True))


def test_pretrained_from_weights_dir(tmp_path, monkeypatch):
    src = make_backbone(BackboneSpec("tiny_test"))
    torch.save(src.state_dict(), tmp_path / "tiny_test.pth")
    monkeypatch.setenv("CTXGESTURE_WEIGHTS_DIR", str(tmp_path))
    net = make_backbone(BackboneSpec("tiny_test", pretrained=True))
    for a, b in zip(src.parameters(), net.parameters()):
        assert torch.equal(a, b)


def test_feature_shapes():
    m = tiny_model().eval()
    fp, fc = m.extract_features(*_batch(4))
    assert fp.shape == (4, 32) and fc.shape == (4, 32)


def test_batch_size_mismatch():
    m = tiny_model()
    crop, ctx = _batch(4)
    with pytest.raises(ShapeMismatch):
        m.extract_features(crop, ctx[:3])
    with pytest.raises(ShapeMismatch):
        m.fuse_and_classify(torch.zeros(2, 31), torch.zeros(2, 32))
    with pytest.raises(ShapeMismatch):
        m.fuse_and_classify(torch.zeros(2, 32), torch.zeros(2, 16))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_branch_isolation(seed):
    m = tiny_model().eval()
    crop, ctx = _batch(3, seed)
    with torch.no_grad():
        fp, fc = m.extract_features(crop, ctx)
        fp2, fc2 = m.extract_features(crop, torch.zeros_like(ctx))
        fp3, fc3 = m.extract_features(crop + 1.0, ctx)
    assert torch.equal(fp, fp2)
    assert torch.equal(fc, fc3)


def test_permutation_equivariance():
    m = tiny_model().eval()
    crop, ctx = _batch(5, 1)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        fp, fc = m.extract_features(crop, ctx)
        pp, pc = m.extract_features(crop[perm], ctx[perm])
    assert torch.allclose(pp, fp[perm], atol=1e-6)
    assert torch.allclose(pc, fc[perm], atol=1e-6)


def test_zero_head_gives_bias():
    m = tiny_model().eval()
    for lin in m.head.layers:
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    bias = torch.arange(6, dtype=torch.float32)
    m.head.layers[-1].bias.data.copy_(bias)
    out = m.fuse_and_classify(torch.zeros(2, 32), torch.zeros(2, 32))
    assert torch.equal(out, bias.expand(2, 6))


def test_concat_order_matters():
    torch.manual_seed(0)
    m = tiny_model().eval()
    a, b = torch.randn(3, 32), torch.randn(3, 32)
    assert not torch.allclose(m.fuse_and_classify(a, b), m.fuse_and_classify(b, a))


def test_single_sample_logits_shape():
    m = tiny_model().eval()
    assert m(*_batch(1)).shape == (1, 6)


def test_eval_determinism_and_train_dropout():
    torch.manual_seed(0)
    m = tiny_model(dropout=0.5)
    crop, ctx = _batch(4)
    m.eval()
    assert torch.equal(m(crop, ctx), m(crop, ctx))
    m.train()
    assert not torch.equal(m(crop, ctx), m(crop, ctx))


@pytest.mark.parametrize("which", [0, 1])
def test_input_gradients_nonzero(which):
    torch.manual_seed(0)
    m = tiny_model().eval()
    inputs = [t.requires_grad_() for t in _batch(4)]
    loss = weighted_cross_entropy(m(*inputs), torch.tensor([0, 1, 2, 3]))
    loss.backward()
    assert inputs[which].grad.norm() > 0


def test_every_parameter_group_gets_gradient():
    torch.manual_seed(0)
    m = tiny_model().train()
    loss = weighted_cross_entropy(m(*_batch(8)), torch.arange(8) % 6)
    loss.backward()
    groups = m.parameter_groups()
    assert set(groups) == {"crop_backbone", "context_backbone", "head.0", "head.1", "head.2", "head.3"}
    for name, params in groups.items():
        assert sum(p.grad.norm() for p in params) > 0, name


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(2, 9), st.booleans(), st.integers(1, 3))
def test_head_width_invariant_and_finiteness(d1, d2, C, use_context, n):
    torch.manual_seed(d1 * 100 + d2)
    crop = BackboneSpec("tiny_test", feature_dim=d1)
    ctx = BackboneSpec("tiny_test", feature_dim=d2)
    m = build_model(crop, ctx, FusionHeadConfig((8, 8, 4)), C, use_context)
    x = [t.requires_grad_() for t in _batch(n, size=(16, 16))]
    out = m(*x)
    assert out.shape == (n, C)
    assert torch.isfinite(out).all()
    out.sum().backward()
    assert all(torch.isfinite(p.grad).all() for p in m.parameters() if p.grad is not None)


def test_without_context_mode():
    m = tiny_model(use_context=False)
    assert m.context_backbone is None
    assert m.head.layers[0].in_features == 32
    crop, ctx = _batch(2)
    m.eval()
    assert torch.equal(m(crop, ctx), m(crop))
    assert m.variant == "without_context"


def test_ablate_context_equals_zero_features():
    m = tiny_model().eval()
    crop, ctx = _batch(3)
    with torch.no_grad():
        fp, _ = m.extract_features(crop, ctx)
        ref = m.fuse_and_classify(fp, torch.zeros(3, 32))
        assert torch.equal(m(crop, ctx, ablate_context=True), ref)


# ------------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    labels = LabelMap(tuple("abcdef"))
    m = tiny_model(labels=labels)
    m.preprocess = small_cfg(seed=9)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    sd, sd2 = m.state_dict(), back.state_dict()
    assert sd.keys() == sd2.keys()
    assert all(torch.equal(sd[k], sd2[k]) for k in sd)
    assert back.labels == labels
    assert back.preprocess == m.preprocess
    assert back.head_cfg == m.head_cfg and back.crop_spec == m.crop_spec
    m.eval()
    x = _batch(2)
    assert torch.equal(m(*x), back(*x))


def test_checkpoint_without_context(tmp_path):
    m = tiny_model(use_context=False)
    save_checkpoint(m, tmp_path / "m.ckpt")
    assert load_checkpoint(tmp_path / "m.ckpt").use_context is False


def test_checkpoint_version_mismatch(tmp_path, monkeypatch):
    import ctxgesture.model as mod

    monkeypatch.setattr(mod, "FORMAT_VERSION", 99)
    save_checkpoint(tiny_model(), tmp_path / "m.ckpt")
    monkeypatch.undo()
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_corrupt(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)
    save_checkpoint(tiny_model(), p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(p)
