import numpy as np
import pytest
import torch

from posefield import autodiff as ad
from posefield.camera import orbit_pose, rescale_intrinsics
from posefield.text import TextVocab
from posefield.unet import (
    PoseLayer, StandardLayer, UNet, UNetConfig, default_roster, make_references, standard_twin,
    unet_forward,
)

SMALL = UNetConfig(image_size=16, channels=(16, 16, 16), text_dim=8, temb_dim=32, nerf_hidden=16)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return UNet(SMALL), TextVocab(8)


def cams(n, size=16, start=0.0):
    return [rescale_intrinsics(orbit_pose(start + a, 20, 2.0), size, size)
            for a in np.linspace(0, 360, n, endpoint=False)]


def test_roster_layout():
    roster = default_roster()
    assert len(roster) == 10
    pose = [s for s in roster if s.kind == "pose"]
    assert [s.stage for s in pose].count("enc") == 2 and [s.stage for s in pose].count("mid") == 1
    assert [s.stage for s in pose].count("dec") == 2
    assert UNetConfig.parse_roster(UNetConfig().roster_string()) == roster


def test_roster_without_pose_layers_rejected():
    with pytest.raises(ValueError):
        UNet(SMALL.without_pose())


def test_fuse_initialised_to_pass_wx():
    layer = PoseLayer(8, 4, 8)
    W = layer.fuse.weight.detach()
    assert torch.equal(W[:, :8], torch.zeros(8, 8)) and torch.equal(W[:, 8:], torch.eye(8))


def test_pose_layer_equals_standard_layer_at_init():
    torch.manual_seed(1)
    layer = PoseLayer(8, 4, 8)
    z, text = torch.randn(2, 5, 8), torch.randn(2, 3, 4)
    wy = torch.randn(2, 5, 8)
    ref = layer.standard(z, text)
    assert (layer(z, text, None, wy) - ref).abs().max() < 1e-6
    assert torch.equal(layer(z, text, None, None), layer(z, text, None, torch.zeros_like(wy)))


def test_standard_layer_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        StandardLayer(8, 4)(torch.zeros(1, 4, 6), torch.zeros(1, 2, 4))


def test_self_attention_is_permutation_equivariant():
    torch.manual_seed(2)
    layer = StandardLayer(8, 4)
    z = torch.randn(1, 4, 8)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(layer.self_attn(z)[:, perm], layer.self_attn(z[:, perm]), atol=1e-6)


def test_zero_init_equivalence_with_refs(model):
    unet, vocab = model
    twin = standard_twin(unet)
    text, mask = vocab.encode(["photo of a V* car"] * 2)
    x = torch.randn(2, 3, 16, 16)
    t = torch.tensor([5, 150])
    refs = make_references(unet, torch.randn(2, 3, 3, 16, 16), [cams(3), cams(3, start=10)], text, mask)
    with torch.no_grad():
        out = unet_forward(unet, x, t, text, mask, refs, cams(2, start=45), np.random.default_rng(0))
        assert (out - twin(x, t, text, mask)).abs().max() < 1e-6
        assert (out - unet(x, t, text, mask)).abs().max() < 1e-6


def test_refs_without_targets_rejected(model):
    unet, vocab = model
    text, mask = vocab.encode(["photo of a car"])
    refs = make_references(unet, torch.randn(1, 2, 3, 16, 16), [cams(2)], text, mask)
    with pytest.raises(ValueError):
        unet_forward(unet, torch.randn(1, 3, 16, 16), 3, text, mask, refs)
    with pytest.raises(ad.ShapeError):
        unet(torch.randn(1, 3, 8, 8), 3, text, mask)


def test_reference_features_arity_determinism_and_token_gradient(model):
    unet, vocab = model
    imgs = torch.randn(1, 3, 3, 16, 16)
    text, mask = vocab.encode(["photo of a V* car"])
    a = make_references(unet, imgs, [cams(3)], text, mask)
    text2, mask2 = vocab.encode(["photo of a V* car"])
    b = make_references(unet, imgs, [cams(3)], text2, mask2)
    for name in unet.pose_layers:
        assert a.feats[name].shape[:2] == (1, 3)
        assert torch.equal(a.feats[name], b.feats[name])
    vocab.vstar.grad = None
    sum(f.sum() for f in a.feats.values()).backward()
    assert vocab.vstar.grad is not None and vocab.vstar.grad.abs().sum() > 0


def test_gradient_reaches_fuse_and_field_after_a_step():
    torch.manual_seed(3)
    unet, vocab = UNet(SMALL), TextVocab(8)
    text, mask = vocab.encode(["photo of a V* car"])
    refs = make_references(unet, torch.randn(1, 3, 3, 16, 16), [cams(3)], text, mask)
    renders = unet.render_conditions(refs, text, mask, cams(1, start=30), np.random.default_rng(0))
    loss = unet(torch.randn(1, 3, 16, 16), torch.tensor([50]), text, mask, renders).pow(2).mean()
    loss = loss + sum(r.opacity.mean() for r in renders.values())
    loss.backward()
    layer = unet.layers[unet.pose_layers[0]]
    assert layer.fuse.weight.grad[:, :16].abs().sum() > 0
    assert layer.field.head.weight.grad.abs().sum() > 0


def test_render_chain_uses_earlier_weights_per_level(model):
    unet, vocab = model
    text, mask = vocab.encode(["photo of a car"])
    refs = make_references(unet, torch.randn(1, 2, 3, 16, 16), [cams(2)], text, mask)
    with torch.no_grad():
        on = unet.render_conditions(refs, text, mask, cams(1, start=30), None, importance=True)
        off = unet.render_conditions(refs, text, mask, cams(1, start=30), None, importance=False)
    first, second = [n for n in unet.pose_layers if unet.spec(n).level == 1][:2]
    assert np.array_equal(on[first].depths, off[first].depths)
    assert not np.array_equal(on[second].depths, off[second].depths)
