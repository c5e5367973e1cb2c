import json

import numpy as np
import pytest
from PIL import Image

from sparsepat import acoustics as ac
from sparsepat.containers import read_image
from sparsepat.dataset import (DatasetError, DatasetSpec, PhantomKind, assign_splits, augment, build_dataset,
                               disc_phantom, expand, generate_vessel_phantom, load_external_image,
                               load_manifest, load_pairs, plan_samples, point_phantom, sample_augmentations)


@pytest.mark.parametrize("size", [64, 128, 256])
def test_vessel_phantom_properties(size):
    for seed in range(6):
        ph = generate_vessel_phantom(seed, size)
        img = ph.image
        assert img.shape == (size, size) and ph.kind is PhantomKind.VESSEL_TREE
        nz = img[img > 0]
        assert nz.min() >= 0.5 and nz.max() <= 1.0
        assert 0.01 <= nz.size / img.size <= 0.25


def test_vessel_phantom_coverage_fixture():
    # frozen regression bounds over many seeds at the training resolution
    fr = [np.mean(generate_vessel_phantom(s, 64).image > 0) for s in range(60)]
    assert 0.01 <= min(fr) and max(fr) <= 0.25


def test_vessel_phantom_determinism_and_seed_sensitivity():
    a = generate_vessel_phantom(11, 64).image
    assert np.array_equal(a, generate_vessel_phantom(11, 64).image)
    b = generate_vessel_phantom(12, 64).image
    assert np.mean(a != b) >= 0.01


def test_vessel_phantom_size_checked():
    with pytest.raises(DatasetError):
        generate_vessel_phantom(0, 100)


def test_disc_and_point_phantoms():
    d = disc_phantom(32, 5).image
    assert d[15, 15] == 1 and d[0, 0] == 0
    assert abs(d.sum() - np.pi * 25) < 0.15 * np.pi * 25
    p = point_phantom(16, [(3, 4), (10, 12)], 0.7).image
    assert p.sum() == pytest.approx(1.4) and p[3, 4] == 0.7
    with pytest.raises(DatasetError):
        point_phantom(8, [], 1.0)


def test_augment_flips_are_involutions():
    img = np.random.default_rng(0).random((16, 16))
    assert np.array_equal(augment(augment(img, ["hflip"]), ["hflip"]), img)
    assert np.array_equal(augment(augment(img, ["vflip"]), ["vflip"]), img)
    assert np.array_equal(augment(img, ["hflip"]), img[:, ::-1])


def test_augment_identity_cases():
    img = np.random.default_rng(1).random((16, 16))
    assert np.array_equal(augment(img, [("zoom", 1.0)]), img)
    assert np.array_equal(augment(img, []), img)
    assert np.array_equal(augment(img, [("crop", (0, 0, 16))]), img)


def _interp_oracle(img, top, left, side):
    """Separable bilinear resample with edge clamping, written with np.interp."""
    n = img.shape[0]
    grid = np.arange(n)
    cy = top - 0.5 + (grid + 0.5) * side / n
    cx = left - 0.5 + (grid + 0.5) * side / n
    rows = np.array([np.interp(cx, grid, r) for r in img])
    return np.array([np.interp(cy, grid, c) for c in rows.T]).T


def test_augment_crop_and_zoom_match_interp_oracle():
    img = np.random.default_rng(2).random((16, 16))
    assert np.allclose(augment(img, [("crop", (4, 4, 8))]), _interp_oracle(img, 4, 4, 8), atol=1e-12)
    assert np.allclose(augment(img, [("crop", (1.5, 3.25, 10.5))]), _interp_oracle(img, 1.5, 3.25, 10.5),
                       atol=1e-12)
    z = 1.25  # centred zoom window of side n / z
    side = 16 / z
    off = (16 - side) / 2
    assert np.allclose(augment(img, [("zoom", z)]), _interp_oracle(img, off, off, side), atol=1e-12)


def test_augment_range_shape_determinism():
    img = generate_vessel_phantom(0, 64).image
    ops = ["crop", "zoom", "hflip", "vflip"]
    a = augment(img, ops, seed=3)
    assert a.shape == img.shape
    assert a.min() >= img.min() - 1e-12 and a.max() <= img.max() + 1e-12
    assert np.array_equal(a, augment(img, ops, seed=3))
    assert not np.array_equal(a, augment(img, ops, seed=4))


def test_augment_errors():
    img = np.zeros((8, 8))
    with pytest.raises(DatasetError, match="zoom"):
        augment(img, [("zoom", 1.6)])
    with pytest.raises(DatasetError, match="zoom"):
        augment(img, [("zoom", 0.9)])
    with pytest.raises(DatasetError, match="square"):
        augment(np.zeros((8, 6)), ["hflip"])
    with pytest.raises(DatasetError, match="unknown"):
        augment(img, ["rotate"])
    with pytest.raises(DatasetError, match="crop"):
        augment(img, [("crop", (4, 4, 8))])


def test_expand_80_to_2000():
    imgs = [np.full((8, 8), i / 80) for i in range(80)]
    out = expand(imgs, 25, seed=0)
    assert len(out) == 2000
    assert np.array_equal(out[0], imgs[0])  # first plan of each image is the identity


def test_sample_augmentations():
    plans = sample_augmentations(20, 3)
    assert len(plans) == 20 and plans[0] == []
    assert plans == sample_augmentations(20, 3)
    assert all(set(p) <= {"crop", "zoom", "hflip", "vflip"} for p in plans)


def test_split_sizes_and_no_leakage():
    spec = DatasetSpec(n_phantoms=100, augment_factor=20, split_ratio=0.8, seed=0)
    plan = plan_samples(spec)
    train = [p for p in plan if p[3] == "train"]
    test = [p for p in plan if p[3] == "test"]
    assert (len(train), len(test)) == (1600, 400)
    assert not {p[0] for p in train} & {p[0] for p in test}


def test_assign_splits_validation_and_determinism():
    assert assign_splits(10, 0.5, 1) == assign_splits(10, 0.5, 1)
    assert assign_splits(10, 0.5, 1) != assign_splits(10, 0.5, 2)
    for bad in (0.0, 1.0):
        with pytest.raises(DatasetError):
            assign_splits(10, bad, 0)


def test_spec_validation():
    with pytest.raises(DatasetError):
        DatasetSpec(preset="nope")
    with pytest.raises(DatasetError):
        DatasetSpec(split_ratio=1.5)
    with pytest.raises(ValueError):
        DatasetSpec(phantom_kind="mri")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = DatasetSpec(n_phantoms=3, augment_factor=2, preset="toy64", keep_every=8, split_ratio=0.67, seed=4)
    manifest = build_dataset(spec, root)
    return spec, root, manifest


def test_build_dataset_layout_and_manifest(small_dataset):
    spec, root, manifest = small_dataset
    assert manifest["counts"] == {"train": 4, "test": 2, "total": 6}
    m = load_manifest(root)
    for s in m["samples"]:
        assert (root / s["input"]).name == f"{s['id']}.input.pai"
        assert s["input"].startswith(s["split"] + "/")
    by_phantom = {}
    for s in m["samples"]:
        by_phantom.setdefault(s["phantom"], set()).add(s["split"])
    assert all(len(v) == 1 for v in by_phantom.values())


def test_persisted_input_is_reconstruction_of_target(small_dataset):
    spec, root, manifest = small_dataset
    s = manifest["samples"][0]
    target, th = read_image(root / s["target"])
    inp, ih = read_image(root / s["input"])
    assert th["provenance"]["keep_every"] == 8 and ih["provenance"]["role"] == "input"
    grid, ring = ac.make_geometry(spec.preset)
    sino = ac.sparse_subsample(ac.forward_simulate(target.astype(np.float64), grid, ring), 8)
    recon = ac.time_reversal(sino, grid, ring.with_keep_every(8))
    assert np.allclose(inp, recon, atol=1e-5)


def test_manifest_is_reproducible(small_dataset, tmp_path):
    spec, root, _ = small_dataset
    build_dataset(spec, tmp_path)
    assert (tmp_path / "manifest.json").read_bytes() == (root / "manifest.json").read_bytes()
    for s in json.loads((root / "manifest.json").read_text())["samples"]:
        assert (tmp_path / s["input"]).read_bytes() == (root / s["input"]).read_bytes()


def test_parallel_build_matches_serial(small_dataset, tmp_path):
    spec, root, _ = small_dataset
    build_dataset(spec, tmp_path, workers=2)
    assert (tmp_path / "manifest.json").read_bytes() == (root / "manifest.json").read_bytes()


def test_load_pairs(small_dataset):
    _, root, _ = small_dataset
    m = load_manifest(root / "manifest.json")
    pairs = load_pairs(m, "train")
    assert len(pairs) == 4
    x, y = pairs[0]
    assert x.shape == y.shape == (64, 64) and x.dtype == np.float32


def test_manifest_validation(small_dataset, tmp_path):
    _, root, _ = small_dataset
    raw = json.loads((root / "manifest.json").read_text())
    bad = dict(raw, samples=raw["samples"] + raw["samples"][:1])
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(DatasetError, match="duplicate"):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(DatasetError, match="missing file"):
        load_manifest(tmp_path)
    with pytest.raises(DatasetError, match="not found"):
        load_manifest(tmp_path / "nope.json")


def test_simulation_failure_names_sample(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ac.SimulationError("exploded")

    monkeypatch.setattr(ac, "forward_simulate", boom)
    spec = DatasetSpec(n_phantoms=2, augment_factor=1, preset="toy64", keep_every=8, split_ratio=0.5)
    with pytest.raises(DatasetError, match="p0000_a00.*exploded"):
        build_dataset(spec, tmp_path)


def test_external_image_loader(tmp_path):
    arr = (np.random.default_rng(0).random((40, 50)) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "v.png")
    ph = load_external_image(tmp_path / "v.png", 64)
    assert ph.image.shape == (64, 64)
    assert ph.image.min() == 0.0 and ph.image.max() == 1.0
