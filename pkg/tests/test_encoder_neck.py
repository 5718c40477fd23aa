import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from meev.encoder import (
    Encoder,
    FeatureMaps,
    ImageCrop,
    ToyBackbone,
    available_backbones,
    build_backbone,
    encode,
    register_backbone,
)
from meev.errors import ConfigError, ShapeContractError
from meev.neck import FusionNeck
from oracles import window_mean_loop


def test_toy_shapes():
    enc = Encoder("toy", channels=32).eval()
    maps = enc(torch.randn(2, 3, 256, 192))
    assert maps.f1.shape == (2, 32, 16, 12)
    assert maps.f0.shape == (2, 32, 8, 6)


def test_unbatched_crop():
    enc = Encoder("toy").eval()
    crop = ImageCrop(torch.randn(3, 256, 192), np.array([[1.0, 0, 5], [0, 1.0, 7]]))
    maps = encode(enc, crop)
    assert maps.f1.shape == (32, 16, 12) and maps.f0.shape == (32, 8, 6)


def test_deterministic_in_eval():
    enc = Encoder("toy").eval()
    x = torch.randn(1, 3, 256, 192)
    a, b = enc(x), enc(x.clone())
    assert torch.equal(a.f1, b.f1) and torch.equal(a.f0, b.f0)


def test_wrong_resolution_rejected():
    with pytest.raises(ValueError):
        Encoder("toy")(torch.randn(1, 3, 224, 224))


def test_crop_transform_must_be_invertible():
    with pytest.raises(ValueError):
        ImageCrop(torch.zeros(3, 256, 192), np.zeros((2, 3)))


def test_registry():
    name = "toy_registry_test"
    register_backbone(name, ToyBackbone)
    assert name in available_backbones()
    assert isinstance(build_backbone(name, channels=8), ToyBackbone)
    with pytest.raises(ConfigError):
        register_backbone(name, ToyBackbone)
    with pytest.raises(ConfigError):
        build_backbone("does_not_exist")


class _WrongStride(nn.Module):
    channels = 4
    mean = std = (0.5, 0.5, 0.5)

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, stride=8, padding=1)

    def forward(self, x):
        y = self.conv(x)
        return y, y


def test_mis_sized_backbone_fails_contract():
    register_backbone("wrong_stride_test", _WrongStride)
    enc = Encoder("wrong_stride_test")
    with pytest.raises(ShapeContractError):
        enc(torch.zeros(1, 3, 256, 192))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 24), st.integers(1, 3))
def test_shape_contract_property(channels, batch):
    enc = Encoder("toy", channels=channels).eval()
    with torch.no_grad():
        maps = enc(torch.randn(batch, 3, 256, 192))
    assert maps.f1.shape == (batch, channels, 16, 12)
    assert maps.f0.shape == (batch, channels, 8, 6)


def test_gradient_reaches_pixels():
    enc = Encoder("toy").eval()
    x = torch.randn(1, 3, 256, 192, requires_grad=True)
    enc(x).f0.mean().backward()
    assert x.grad.abs().sum() > 0


def test_normalize_toy():
    enc = Encoder("toy")
    out = enc.normalize(torch.full((3, 2, 2), 0.75))
    assert torch.allclose(out, torch.full((3, 2, 2), 0.5))


def test_convnext_large_shapes():
    pytest.importorskip("torchvision")
    enc = Encoder("convnext_large").eval()
    with torch.no_grad():
        maps = enc(torch.zeros(1, 3, 256, 192))
    assert maps.f1.shape == (1, 1536, 16, 12)
    assert maps.f0.shape == (1, 1536, 8, 6)
    neck = FusionNeck(1536).eval()
    with torch.no_grad():
        assert neck.concat(maps).shape == (1, 3072, 8, 6)
        assert neck(maps).shape == (1, 1536, 8, 6)


def test_load_pretrained(tmp_path):
    src = Encoder("toy")
    torch.save(src.backbone.state_dict(), tmp_path / "w.pt")
    dst = Encoder("toy")
    dst.load_pretrained(tmp_path / "w.pt")
    for a, b in zip(src.backbone.state_dict().values(), dst.backbone.state_dict().values()):
        assert torch.equal(a, b)


# -- neck --------------------------------------------------------------------


def _identity_neck(c):
    neck = FusionNeck(c).eval()
    with torch.no_grad():
        w = torch.zeros(c, c, 3, 3)
        w[range(c), range(c), 1, 1] = 1.0
        neck.reduce[0].weight.copy_(w)
        bn = neck.reduce[1]
        bn.weight.copy_(torch.sqrt(bn.running_var + bn.eps))
    return neck


def test_neck_constant_maps():
    c, a, b = 4, 0.7, -0.3
    neck = _identity_neck(c)
    maps = FeatureMaps(torch.full((1, c, 16, 12), a), torch.full((1, c, 8, 6), b))
    with torch.no_grad():
        cat = neck.concat(maps)
    assert cat.shape == (1, 2 * c, 8, 6)
    assert torch.allclose(cat[:, :c], torch.full_like(cat[:, :c], a), atol=1e-6)
    assert torch.equal(cat[:, c:], maps.f0)


def test_neck_pool_matches_window_mean():
    c = 3
    neck = _identity_neck(c)
    f1 = torch.rand(1, c, 16, 12, dtype=torch.float64) + 0.1
    neck = neck.double()
    with torch.no_grad():
        got = neck.branch(f1)[0].numpy()
    assert np.abs(got - window_mean_loop(f1[0].numpy())).max() < 1e-6


def test_neck_output_shape_and_default_width():
    for c in (1, 5, 16):
        neck = FusionNeck(c).eval()
        out = neck(FeatureMaps(torch.randn(2, c, 16, 12), torch.randn(2, c, 8, 6)))
        assert out.shape == (2, c, 8, 6)
    assert FusionNeck(8, out_channels=3)(FeatureMaps(torch.randn(1, 8, 16, 12), torch.randn(1, 8, 8, 6))).shape == (1, 3, 8, 6)


def test_neck_channel_mismatch():
    with pytest.raises(ValueError):
        FusionNeck(4)(FeatureMaps(torch.randn(1, 4, 16, 12), torch.randn(1, 5, 8, 6)))


def test_neck_gradients_reach_both_inputs():
    neck = FusionNeck(4).eval().double()
    f1 = torch.randn(1, 4, 16, 12, dtype=torch.float64)
    f0 = torch.randn(1, 4, 8, 6, dtype=torch.float64)

    def out(a, b):
        with torch.no_grad():
            return neck(FeatureMaps(a, b)).sum().item()

    base = out(f1, f0)
    # finite-difference sensitivity on each branch
    bump1 = f1.clone()
    bump1[0, :, 4, 4] += 1e-3
    bump0 = f0.clone()
    bump0[0, :, 2, 2] += 1e-3
    assert abs(out(bump1, f0) - base) > 0
    assert abs(out(f1, bump0) - base) > 0


def test_max_pool_option():
    neck = FusionNeck(2, pool="max")
    assert isinstance(neck.pool, nn.MaxPool2d)
    with pytest.raises(ValueError):
        FusionNeck(2, pool="median")
