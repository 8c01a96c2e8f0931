import json
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from calibseg.datagen import (
    AnnotationSet,
    generate_dataset,
    grader_stats,
    load_dataset,
    save_dataset,
)
from calibseg.errors import ConfigurationError, DatasetError, ValidationError


def brute_force_variance(masks):
    """Direct per-pixel loop over the population-variance formula."""
    d, h, w = masks.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            col = [float(masks[k, i, j]) for k in range(d)]
            mean = sum(col) / d
            out[i, j] = sum((v - mean) ** 2 for v in col) / d
    return out


def test_grader_stats_half_split():
    masks = np.array([1, 1, 0, 0], dtype=np.uint8).reshape(4, 1, 1)
    stats = grader_stats(AnnotationSet(masks))
    assert stats.mean_map[0, 0] == 0.5
    assert stats.variance_map[0, 0] == 0.25


def test_identical_graders_have_zero_variance():
    mask = (np.random.default_rng(1).random((10, 12)) > 0.5).astype(np.uint8)
    stats = grader_stats(np.stack([mask] * 3))
    assert np.all(stats.variance_map == 0)


def test_variance_matches_brute_force_and_binary_identity():
    rng = np.random.default_rng(7)
    for d in range(1, 7):
        masks = (rng.random((d, 6, 5)) > 0.4).astype(np.uint8)
        stats = grader_stats(masks)
        np.testing.assert_allclose(stats.variance_map, brute_force_variance(masks), atol=1e-15)
        np.testing.assert_allclose(stats.variance_map, stats.mean_map * (1 - stats.mean_map), atol=1e-12)


def test_non_binary_masks_rejected():
    with pytest.raises(ValidationError):
        grader_stats(np.full((2, 4, 4), 2))


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 6), seed=st.integers(0, 2 ** 32 - 1))
def test_grader_stats_properties(d, seed):
    rng = np.random.default_rng(seed)
    masks = (rng.random((d, 5, 5)) > 0.5).astype(np.uint8)
    stats = grader_stats(masks)
    assert np.all(stats.variance_map >= 0) and np.all(stats.variance_map <= 0.25)
    at_max = np.isclose(stats.variance_map, 0.25)
    assert np.all(stats.mean_map[at_max] == 0.5)
    perm = rng.permutation(d)
    np.testing.assert_array_equal(grader_stats(masks[perm]).variance_map, stats.variance_map)


def test_zero_disagreement_gives_identical_masks():
    ds = generate_dataset(12, 4, 0.0, 32, seed=3)
    for it in ds:
        assert np.all(it.annotations.masks == it.annotations.masks[0])
        assert np.all(it.stats.variance_map == 0)


def test_generation_is_deterministic():
    a = generate_dataset(10, 3, 0.5, (24, 32), seed=11)
    b = generate_dataset(10, 3, 0.5, (24, 32), seed=11)
    for x, y in zip(a, b):
        assert x.id == y.id and x.split == y.split
        assert x.image.pixels.tobytes() == y.image.pixels.tobytes()
        assert x.annotations.masks.tobytes() == y.annotations.masks.tobytes()
    c = generate_dataset(10, 3, 0.5, (24, 32), seed=12)
    assert any(x.image.pixels.tobytes() != z.image.pixels.tobytes() for x, z in zip(a, c))


def test_disagreement_produces_nondegenerate_variance():
    ds = generate_dataset(100, 4, 0.5, 64, seed=0)
    maxima = [it.stats.variance_map.max() for it in ds]
    assert np.mean(maxima) > 0
    # variance concentrates in a thin band rather than covering the image
    frac = np.mean([(it.stats.variance_map > 0).mean() for it in ds])
    assert 0 < frac < 0.3


def test_generated_images_are_valid_patches():
    ds = generate_dataset(20, 2, 1.0, 16, seed=5)
    for it in ds:
        assert it.image.pixels.min() >= 0 and it.image.pixels.max() <= 1
        np.testing.assert_array_equal(np.round(it.image.pixels * 255) / 255, it.image.pixels)


def test_splits_partition_with_default_ratios():
    ds = generate_dataset(100, 1, 0.3, 16, seed=2)
    counts = {s: len(ds.subset(s)) for s in ("train", "val", "test")}
    assert counts == {"train": 70, "val": 15, "test": 15}
    ids = [set(ds.subset(s).ids) for s in ("train", "val", "test")]
    for a, b in itertools.combinations(ids, 2):
        assert not a & b


@pytest.mark.parametrize("kwargs", [
    dict(disagreement=1.5), dict(disagreement=-0.1), dict(size=4), dict(size="big"),
    dict(n_images=0), dict(graders=0),
])
def test_invalid_generation_arguments(kwargs):
    args = dict(n_images=2, graders=2, disagreement=0.5, size=16, seed=0)
    args.update(kwargs)
    with pytest.raises(ConfigurationError):
        generate_dataset(**args)


def test_save_load_round_trip(tmp_path):
    ds = generate_dataset(9, 3, 0.6, (20, 24), seed=4)
    manifest = save_dataset(ds, tmp_path / "data")
    loaded = load_dataset(manifest)
    assert (loaded.height, loaded.width) == (20, 24)
    assert len(loaded) == len(ds)
    for a, b in zip(ds, loaded):
        assert a.id == b.id and a.split == b.split
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
        np.testing.assert_array_equal(a.annotations.masks, b.annotations.masks)
        np.testing.assert_array_equal(a.stats.variance_map, b.stats.variance_map)


def test_manifest_schema(tmp_path):
    ds = generate_dataset(3, 2, 0.5, 16, seed=0)
    manifest = json.loads(save_dataset(ds, tmp_path).read_text())
    assert manifest["height"] == 16 and manifest["width"] == 16
    entry = manifest["items"][0]
    assert set(entry) == {"id", "image", "masks", "split"}
    assert len(entry["masks"]) == 2


def test_missing_file_error_names_file(tmp_path):
    ds = generate_dataset(3, 2, 0.5, 16, seed=0)
    manifest = save_dataset(ds, tmp_path)
    victim = tmp_path / "masks" / f"{ds.items[1].id}_g1.png"
    victim.unlink()
    with pytest.raises(DatasetError, match=victim.name):
        load_dataset(manifest)


def test_grader_count_mismatch(tmp_path):
    ds = generate_dataset(3, 2, 0.5, 16, seed=0)
    path = save_dataset(ds, tmp_path)
    manifest = json.loads(path.read_text())
    manifest["items"][0]["masks"] = manifest["items"][0]["masks"][:1]
    path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="graders"):
        load_dataset(path)


def test_8bit_masks_map_to_binary(tmp_path):
    (tmp_path / "m").mkdir()
    img = np.full((8, 8), 100, dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "m" / "x.png")
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:5, 3:7] = 255
    Image.fromarray(mask).save(tmp_path / "m" / "y.png")
    (tmp_path / "manifest.json").write_text(json.dumps({
        "items": [{"id": "a", "image": "m/x.png", "masks": ["m/y.png"], "split": "test"}],
        "height": 8, "width": 8,
    }))
    ds = load_dataset(tmp_path / "manifest.json")
    loaded = ds.items[0].annotations.masks[0]
    assert set(np.unique(loaded)) == {0, 1}
    np.testing.assert_array_equal(loaded, mask // 255)


def test_non_binary_mask_file_rejected(tmp_path):
    ds = generate_dataset(2, 1, 0.5, 16, seed=0)
    path = save_dataset(ds, tmp_path)
    target = tmp_path / "masks" / f"{ds.items[0].id}_g0.png"
    Image.fromarray(np.full((16, 16), 77, dtype=np.uint8)).save(target)
    with pytest.raises(DatasetError, match="not binary"):
        load_dataset(path)
