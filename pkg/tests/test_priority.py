import numpy as np
import pytest

from foveate import priority as pr


def brute_convolve(image, kernel):
    """Direct nested-loop convolution with edge-replicate padding (oracle)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((ph, ph), (pw, pw)), mode="edge")
    out = np.zeros((28, 28))
    flipped = kernel[::-1, ::-1]
    for r in range(28):
        for c in range(28):
            out[r, c] = np.sum(padded[r : r + kh, c : c + kw] * flipped)
    return out


def test_constant_image_zero_channels():
    maps = pr.saliency(np.full((28, 28), 0.6))
    assert np.allclose(maps["contrast"].values, 0.0, atol=1e-9)
    assert np.allclose(maps["orientation"].values, 0.0, atol=1e-9)


def test_impulse_contrast_peak():
    img = np.zeros((28, 28))
    img[13, 9] = 1.0
    maps = pr.saliency(img)
    assert np.unravel_index(np.argmax(maps["contrast"].values), (28, 28)) == (13, 9)


def test_translation_equivariance_interior():
    rng = np.random.default_rng(1)
    img = np.zeros((28, 28))
    img[10, 10] = 1.0
    shifted = np.zeros((28, 28))
    shifted[13, 12] = 1.0
    a = pr.saliency(img)["contrast"].values
    b = pr.saliency(shifted)["contrast"].values
    assert np.allclose(a[6:15, 6:15], b[9:18, 8:17], atol=1e-12)


def test_saliency_matches_brute_force_convolution():
    rng = np.random.default_rng(2)
    img = rng.random((28, 28))
    center = brute_convolve(img, pr._DOG_CENTER)
    surround = brute_convolve(img, pr._DOG_SURROUND)
    contrast = np.abs(center - surround)
    contrast = contrast / contrast.max()
    assert np.allclose(pr.saliency(img)["contrast"].values, contrast, atol=1e-10)
    oriented = np.max([np.abs(brute_convolve(img, k)) for k in pr._ORIENTED], axis=0)
    oriented = oriented / oriented.max()
    assert np.allclose(pr.saliency(img)["orientation"].values, oriented, atol=1e-10)


def test_vertical_stroke_orientation_column(train_set):
    ones = train_set.images[train_set.labels == 1][:200].astype(np.float64) / 255.0
    mean_one = ones.mean(axis=0)
    omap = pr.saliency(mean_one)["orientation"].values
    col = int(np.argmax(mean_one.sum(axis=0)))  # column of the stroke
    threshold = np.quantile(omap, 0.9)
    assert omap[:, col].max() >= threshold


@pytest.mark.parametrize("value,expected", [(0.0, 1), (0.19, 1), (0.2, 2), (0.5, 3), (0.99, 5), (1.0, 5)])
def test_quantize_bins(value, expected):
    assert pr.quantize(value) == expected


def test_quantize_monotone():
    vals = np.linspace(0, 1, 101)
    levels = [pr.quantize(v) for v in vals]
    assert all(b >= a for a, b in zip(levels, levels[1:]))


def test_quantize_rejects_out_of_range():
    with pytest.raises(ValueError):
        pr.quantize(-0.01)
    with pytest.raises(ValueError):
        pr.quantize(1.01)


def test_pool_shape_and_mean():
    v = np.arange(784, dtype=np.float64).reshape(28, 28) / 783
    pooled = pr.pool_to_grid(v)
    assert pooled.shape == (7, 7)
    assert np.isclose(pooled[0, 0], v[0:4, 0:4].mean())


def _exemplars(img, n=100):
    return np.repeat(img[None], n, axis=0)


def test_atlas_identical_exemplars_equals_single():
    rng = np.random.default_rng(4)
    imgs = {d: _exemplars(rng.random((28, 28))) for d in range(10)}
    atlas = pr.build_atlas(imgs)
    for d in range(10):
        single = imgs[d][0]
        maps = pr.saliency(single)
        for ci, name in enumerate(pr.CHANNELS):
            direct = np.vectorize(pr.quantize)(pr.pool_to_grid(maps[name].values))
            assert np.array_equal(atlas.levels[d, ci], direct)


def test_atlas_all_black_level_one():
    imgs = {d: np.zeros((120, 28, 28)) for d in range(10)}
    atlas = pr.build_atlas(imgs)
    assert np.all(atlas.levels == 1)


def test_atlas_missing_class():
    imgs = {d: np.zeros((120, 28, 28)) for d in range(9)}
    with pytest.raises(ValueError, match="missing class"):
        pr.build_atlas(imgs)


def test_atlas_too_few_exemplars():
    imgs = {d: np.zeros((99, 28, 28)) for d in range(10)}
    with pytest.raises(ValueError, match="100"):
        pr.build_atlas(imgs)


def test_atlas_permutation_invariant():
    rng = np.random.default_rng(5)
    base = rng.random((110, 28, 28))
    imgs_a = {d: base for d in range(10)}
    perm = rng.permutation(110)
    imgs_b = {d: base[perm] for d in range(10)}
    a = pr.build_atlas(imgs_a)
    b = pr.build_atlas(imgs_b)
    assert np.array_equal(a.levels, b.levels)


def test_atlas_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    atlas = pr.PriorityAtlas(levels=rng.integers(1, 6, size=(10, 2, 7, 7)).astype(np.uint8))
    pr.save_atlas(tmp_path / "a.patl", atlas)
    loaded = pr.load_atlas(tmp_path / "a.patl")
    assert np.array_equal(loaded.levels, atlas.levels)


def test_atlas_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(pr.AtlasFormatError, match="magic"):
        pr.load_atlas(tmp_path / "bad")


def test_atlas_truncated(tmp_path):
    rng = np.random.default_rng(7)
    atlas = pr.PriorityAtlas(levels=rng.integers(1, 6, size=(10, 2, 7, 7)).astype(np.uint8))
    pr.save_atlas(tmp_path / "a.patl", atlas)
    blob = (tmp_path / "a.patl").read_bytes()
    (tmp_path / "a.patl").write_bytes(blob[:-10])
    with pytest.raises(pr.AtlasFormatError, match="truncated"):
        pr.load_atlas(tmp_path / "a.patl")


def test_class_zero_ring_structure(train_set):
    """Ring cells of the class-0 atlas are salient, the center is not."""
    zeros = train_set.images[train_set.labels == 0][:150]
    exemplars = {0: zeros}
    for d in range(1, 10):
        exemplars[d] = train_set.images[train_set.labels == d][:150]
    atlas = pr.build_atlas(exemplars)
    contrast = atlas.levels[0, 0]
    ring = [contrast[1, 3], contrast[5, 3], contrast[3, 2], contrast[3, 4]]
    assert min(ring) >= 3
    assert contrast[3, 3] <= 2
