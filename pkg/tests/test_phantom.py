import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from virtualde.imagecore import sobel
from virtualde.phantom import (PhantomSpec, generate_dataset, generate_sample, load_manifest,
                               load_sample, read_lesions, split_assignment, write_lesions)


def test_sample_is_additive_without_noise():
    s, _ = generate_sample(PhantomSpec(seed=3, noise_sigma=0.0))
    assert np.allclose(s.standard.pixels, s.bone.pixels + s.soft.pixels, atol=1e-12)


def test_noise_is_the_only_difference():
    s, _ = generate_sample(PhantomSpec(seed=3, noise_sigma=0.01))
    resid = s.standard.pixels - s.bone.pixels - s.soft.pixels
    assert 0.008 < resid.std() < 0.012


def test_deterministic_per_seed():
    a, la = generate_sample(PhantomSpec(seed=11))
    b, lb = generate_sample(PhantomSpec(seed=11))
    c, _ = generate_sample(PhantomSpec(seed=12))
    assert np.array_equal(a.standard.pixels, b.standard.pixels) and la == lb
    assert not np.array_equal(a.standard.pixels, c.standard.pixels)


def test_shared_bounds_cover_all_images():
    s, _ = generate_sample(PhantomSpec(seed=0))
    bounds = {(im.intensity_min, im.intensity_max) for im in s.images()}
    assert len(bounds) == 1
    lo, hi = bounds.pop()
    assert all(im.pixels.min() >= lo and im.pixels.max() <= hi for im in s.images())


def test_no_bone_means_zero_bone_image():
    s, _ = generate_sample(PhantomSpec(seed=1, n_ribs=0, calcification_count=0))
    assert np.all(s.bone.pixels == 0)


def test_bone_gradient_vanishes_away_from_edges():
    s, _ = generate_sample(PhantomSpec(seed=2))
    mag = sobel(s.bone).magnitude()
    flat = mag == 0
    # compact support: most of the image has exactly zero bone gradient
    assert flat.mean() > 0.5


def test_bone_coverage_is_moderate():
    cover = [np.mean(generate_sample(PhantomSpec(seed=k))[0].bone.pixels > 0)
             for k in range(5)]
    assert 0.1 < np.mean(cover) < 0.35


@given(st.integers(0, 10_000))
def test_lesions_inside_image(seed):
    spec = PhantomSpec(seed=seed, size=64, nodule_count=2)
    _, lesions = generate_sample(spec)
    assert len(lesions) == 2
    for les in lesions:
        assert les.radius <= les.x <= 63 - les.radius
        assert les.radius <= les.y <= 63 - les.radius


def test_nodule_is_in_soft_image_only():
    spec = PhantomSpec(seed=4, noise_sigma=0.0, soft_blob_count=0, n_ribs=0,
                       calcification_count=0)
    s, (les,) = generate_sample(spec)
    y, x = int(round(les.y)), int(round(les.x))
    assert s.soft.pixels[y, x] == pytest.approx(spec.soft_base + spec.nodule_amplitude)
    assert s.bone.pixels[y, x] == 0


@pytest.mark.parametrize("kw", [{"size": 32}, {"n_ribs": -1}, {"noise_sigma": -0.1}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_split_is_exact_and_order_independent():
    ids = [f"case-{k:04d}" for k in range(50)]
    a = split_assignment(ids, 0.2)
    b = split_assignment(ids[::-1], 0.2)
    assert a == b
    assert sum(v == "test" for v in a.values()) == 10


def test_lesion_csv_roundtrip(tmp_path):
    _, lesions = generate_sample(PhantomSpec(seed=5, nodule_count=3))
    write_lesions(tmp_path / "l.csv", lesions)
    assert read_lesions(tmp_path / "l.csv") == lesions


def test_generate_dataset(tmp_path):
    entries = generate_dataset(5, 100, PhantomSpec(size=64), tmp_path, 0.4)
    manifest, base = load_manifest(tmp_path / "manifest.json")
    assert manifest == entries
    assert [e["id"] for e in manifest] == [f"case-{k:04d}" for k in range(5)]
    assert sum(e["split"] == "test" for e in manifest) == 2
    s = load_sample(manifest[2], base)
    direct, _ = generate_sample(PhantomSpec(size=64, seed=102), "case-0002")
    # PFM stores float32
    assert np.allclose(s.standard.pixels, direct.standard.pixels, atol=1e-6)
    spec = json.loads((tmp_path / "phantom_spec.json").read_text())
    assert spec["base_seed"] == 100 and spec["size"] == 64


def test_generate_dataset_threaded_matches_serial(tmp_path, monkeypatch):
    generate_dataset(4, 7, PhantomSpec(size=64), tmp_path / "a")
    monkeypatch.setenv("VDE_NUM_THREADS", "3")
    generate_dataset(4, 7, PhantomSpec(size=64), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_dataset_rejects_zero(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(0, 0, None, tmp_path)
