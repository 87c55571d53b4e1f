import math

import numpy as np
import pytest
import torch

from virtualde.imagecore import Image, ImageError, normalize, sobel_arrays
from virtualde.model import (CHECKPOINT_MAGIC, DiscriminatorSpec, GeneratorSpec, SpecError,
                             build_discriminator, build_generator, discriminator_forward,
                             expected_shapes, generator_forward, load_checkpoint,
                             parameter_count, save_checkpoint, shape_audit, sobel_torch)
from virtualde.imagecore import GradientField

SMALL = GeneratorSpec(n_scales=2, base_channels=4, depth=2)


def test_parameter_count_by_hand():
    # channels 4, 8, 16; weights + biases per layer
    stem = 4 * 1 * 9 + 4
    down = (8 * 4 * 16 + 8) + (16 * 8 * 16 + 16)
    up = (16 * 8 * 16 + 8) + (8 * 4 * 16 + 4)
    fuse = (8 * 16 * 9 + 8) + (4 * 8 * 9 + 4)
    heads = (4 + 1) + (8 + 1)
    assert parameter_count(build_generator(SMALL)) == stem + down + up + fuse + heads == 6662


def test_discriminator_parameter_count_by_hand():
    spec = DiscriminatorSpec(patch_size=16, n_layers=2, base_channels=4)
    want = (4 * 4 * 16 + 4) + (8 * 4 * 16 + 8) + (1 * 8 * 9 + 1)
    assert parameter_count(build_discriminator(spec)) == want


@pytest.mark.parametrize("spec", [GeneratorSpec(), SMALL, DiscriminatorSpec(),
                                  GeneratorSpec(base_channels=64, depth=5, n_scales=5)])
def test_shape_audit_clean(spec):
    build = build_generator if isinstance(spec, GeneratorSpec) else build_discriminator
    m = build(spec)
    assert shape_audit(m) == []
    assert {k: tuple(v.shape) for k, v in m.state_dict().items()} == expected_shapes(spec)


def test_shape_audit_reports_damage():
    g = build_generator(SMALL)
    with torch.no_grad():
        g.heads[0].weight.fill_(float("nan"))
    assert any("non-finite" in p for p in shape_audit(g))


def test_channel_cap():
    spec = GeneratorSpec(base_channels=32, depth=5, max_channels=128)
    assert [spec.channels(i) for i in range(6)] == [32, 64, 128, 128, 128, 128]


@pytest.mark.parametrize("kw", [{"n_scales": 1}, {"n_scales": 5, "depth": 4},
                                {"encoder_activation": "swish"}])
def test_generator_spec_validation(kw):
    with pytest.raises(SpecError):
        GeneratorSpec(**kw)


def test_discriminator_spec_validation():
    with pytest.raises(SpecError):
        DiscriminatorSpec(patch_size=20, n_layers=3)
    with pytest.raises(SpecError):
        DiscriminatorSpec(in_channels=2)


def test_init_is_seeded():
    a = build_generator(SMALL, 3).state_dict()
    b = build_generator(SMALL, 3).state_dict()
    c = build_generator(SMALL, 4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_init_scale_follows_fan_in():
    g = build_generator(GeneratorSpec(), 0)
    w = g.down[1][0].weight.detach()   # 64 -> 128 channels, 4x4 kernel
    want = math.sqrt(2 / (1 + 0.2 ** 2)) / math.sqrt(64 * 16)
    assert float(w.std()) == pytest.approx(want, rel=0.05)
    assert all(float(m.bias.detach().abs().max()) == 0 for m in g.modules()
               if isinstance(m, torch.nn.Conv2d))


def test_generator_forward_shapes_and_range():
    g = build_generator(SMALL, 0)
    x = torch.rand(2, 1, 16, 24) * 2 - 1
    with torch.no_grad():
        out, maps = g(x)
    assert out.shape == (2, 1, 16, 24)
    assert [tuple(m.shape[-2:]) for m in maps] == [(16, 24), (8, 12)]
    assert float(out.abs().max()) < 1
    with pytest.raises(ImageError):
        g(torch.zeros(1, 1, 18, 16))


def test_output_is_tanh_of_upsampled_scale_sum():
    g = build_generator(SMALL, 1).double()
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    out, maps = g(x)
    up = torch.nn.functional.interpolate(maps[1], size=(16, 16), mode="bilinear",
                                         align_corners=False)
    assert torch.allclose(out, torch.tanh(maps[0] + up), atol=1e-12)
    only_coarse, _ = g(x, scale_mask=[False, True])
    assert torch.allclose(only_coarse, torch.tanh(up), atol=1e-12)
    none, _ = g(x, scale_mask=[False, False])
    assert float(none.abs().max()) == 0


def test_discriminator_probability_and_patch_check():
    spec = DiscriminatorSpec(patch_size=16, n_layers=2, base_channels=4)
    d = build_discriminator(spec, 0)
    p = d(torch.randn(3, 2, 16, 16), torch.randn(3, 2, 16, 16))
    assert p.shape == (3,) and bool(((p > 0) & (p < 1)).all())
    with pytest.raises(ImageError):
        d(torch.randn(1, 2, 8, 8), torch.randn(1, 2, 8, 8))
    g = GradientField(np.zeros((16, 16)), np.zeros((16, 16)))
    assert 0 < discriminator_forward(d, g, g) < 1


def test_sobel_torch_matches_numpy(rng):
    a = rng.normal(size=(12, 10))
    t = sobel_torch(torch.from_numpy(a)[None, None])
    gx, gy = sobel_arrays(a)
    assert np.allclose(t[0, 0].numpy(), gx, atol=1e-12)
    assert np.allclose(t[0, 1].numpy(), gy, atol=1e-12)


def test_generator_forward_wrapper(rng):
    g = build_generator(SMALL, 0)
    img = Image.from_array(rng.uniform(2, 5, size=(16, 16)))
    out, maps = generator_forward(g, normalize(img))
    assert out.normalized and out.shape == (16, 16) and len(maps) == 2
    assert (out.intensity_min, out.intensity_max) == (img.pixels.min(), img.pixels.max())
    with pytest.raises(ImageError):
        generator_forward(g, img)


def test_checkpoint_roundtrip(tmp_path):
    g = build_generator(SMALL, 5)
    d = build_discriminator(DiscriminatorSpec(patch_size=16, n_layers=2, base_channels=4), 6)
    p = save_checkpoint(tmp_path / "m.ckpt", g, d, {"epoch": 3})
    assert p.read_bytes().startswith(CHECKPOINT_MAGIC)
    g2, d2, extra = load_checkpoint(p)
    assert extra == {"epoch": 3} and g2.spec == SMALL and d2.spec == d.spec
    x = torch.rand(1, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(g(x)[0], g2(x)[0])
    for k, v in d.state_dict().items():
        assert torch.equal(v, d2.state_dict()[k])
    # identical models give identical bytes
    save_checkpoint(tmp_path / "n.ckpt", g2, d2, {"epoch": 3})
    assert (tmp_path / "n.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_without_discriminator(tmp_path):
    save_checkpoint(tmp_path / "g.ckpt", build_generator(SMALL))
    _, d, extra = load_checkpoint(tmp_path / "g.ckpt")
    assert d is None and extra == {}


def test_checkpoint_rejects_foreign_and_truncated(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
    p = save_checkpoint(tmp_path / "g.ckpt", build_generator(SMALL))
    data = p.read_bytes()
    p.write_bytes(data[:-100])
    with pytest.raises(ValueError):
        load_checkpoint(p)
