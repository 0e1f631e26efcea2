import gzip

import numpy as np
import pytest

from gedi.data import (
    AugmentConfig,
    Dataset,
    TripletBatch,
    augment,
    gen_circles,
    gen_moons,
    load_cache,
    load_mnist_idx,
    make_addition_triplets,
    save_cache,
    write_mnist_idx,
)
from gedi.errors import ContractViolation, FormatError


# -- moons --------------------------------------------------------------------------


def test_moons_noise_free_parametrization():
    ds = gen_moons(200, noise_std=0.0, seed=1)
    class0 = ds.points[ds.labels == 0]
    class1 = ds.points[ds.labels == 1]
    # class 0 on the unit upper half circle
    assert np.allclose(np.linalg.norm(class0, axis=1), 1.0, atol=1e-12)
    assert np.all(class0[:, 1] >= -1e-12)
    # class 1 on the shifted reflected half circle
    recentered = class1 - np.array([1.0, 0.5])
    assert np.allclose(np.linalg.norm(recentered, axis=1), 1.0, atol=1e-12)
    assert np.all(class1[:, 1] <= 0.5 + 1e-12)


def test_moons_theta_zero_maps_to_one_zero():
    ds = gen_moons(2000, noise_std=0.0, seed=2)
    class0 = ds.points[ds.labels == 0]
    # theta ~ 0 points approach (1, 0)
    closest = class0[np.argmin(np.abs(np.arctan2(class0[:, 1], class0[:, 0])))]
    assert np.linalg.norm(closest - [1.0, 0.0]) < 0.02


def test_moons_deterministic_per_seed():
    a = gen_moons(100, noise_std=0.05, seed=3)
    b = gen_moons(100, noise_std=0.05, seed=3)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.labels, b.labels)


def test_moons_rejects_tiny_n():
    with pytest.raises(ContractViolation):
        gen_moons(1)


# -- circles -------------------------------------------------------------------------


def test_circles_noise_free_radii():
    ds = gen_circles(300, noise_std=0.0, inner_scale=0.5, seed=4)
    r = np.linalg.norm(ds.points, axis=1)
    assert np.allclose(r[ds.labels == 0], 1.0, atol=1e-12)
    assert np.allclose(r[ds.labels == 1], 0.5, atol=1e-12)


def test_circles_balanced_classes():
    ds = gen_circles(500, seed=5)
    assert (ds.labels == 0).sum() == 250
    assert (ds.labels == 1).sum() == 250


def test_circles_deterministic_and_validates_scale():
    a = gen_circles(40, seed=6)
    b = gen_circles(40, seed=6)
    assert np.array_equal(a.points, b.points)
    with pytest.raises(ContractViolation):
        gen_circles(40, inner_scale=1.5)


# -- IDX -----------------------------------------------------------------------------


def synthetic_digit_images(n, side=6, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, side * side)).astype(np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    return imgs, labels


def test_idx_round_trip(tmp_path):
    imgs, labels = synthetic_digit_images(2)
    ipath, lpath = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_mnist_idx(imgs, labels, ipath, lpath)
    ds = load_mnist_idx(ipath, lpath)
    assert ds.n == 2
    recovered = np.clip((ds.points + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    assert np.array_equal(recovered, imgs)
    assert np.array_equal(ds.labels, labels)


def test_idx_gzip_round_trip(tmp_path):
    imgs, labels = synthetic_digit_images(3, seed=1)
    ipath, lpath = tmp_path / "img.idx.gz", tmp_path / "lab.idx.gz"
    write_mnist_idx(imgs, labels, ipath, lpath)
    ds = load_mnist_idx(ipath, lpath)
    assert ds.n == 3
    assert np.all(ds.points >= -1.0) and np.all(ds.points <= 1.0)
    assert np.all((0 <= ds.labels) & (ds.labels <= 9))


def test_idx_rejects_wrong_magic(tmp_path):
    imgs, labels = synthetic_digit_images(2, seed=2)
    ipath, lpath = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_mnist_idx(imgs, labels, ipath, lpath)
    # a label file offered as an image file has the wrong magic
    with pytest.raises(FormatError, match="magic"):
        load_mnist_idx(lpath, ipath)


def test_idx_rejects_count_mismatch(tmp_path):
    imgs, labels = synthetic_digit_images(4, seed=3)
    ipath, lpath = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_mnist_idx(imgs, labels, ipath, lpath)
    ipath2, lpath2 = tmp_path / "img2.idx", tmp_path / "lab2.idx"
    write_mnist_idx(imgs[:3], labels[:3], ipath2, lpath2)
    with pytest.raises(FormatError, match="count"):
        load_mnist_idx(ipath, lpath2)


# -- triplets -----------------------------------------------------------------------


def digit_dataset(per_class=40, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), per_class)
    points = rng.normal(size=(labels.size, dim))
    return Dataset(points, labels)


def test_triplets_satisfy_constraint_and_grouping():
    ds = digit_dataset()
    batch = make_addition_triplets(ds, 50, seed=1)
    assert batch.num_triplets == 50
    assert np.all(batch.records[:, 0] + batch.records[:, 1] == batch.records[:, 2])
    # labels of the stored images match the records, grouped consecutively
    assert np.array_equal(batch.labels[0::3], batch.records[:, 0])
    assert np.array_equal(batch.labels[1::3], batch.records[:, 1])
    assert np.array_equal(batch.labels[2::3], batch.records[:, 2])


def test_triplets_use_each_image_at_most_once():
    ds = digit_dataset(per_class=100)
    batch = make_addition_triplets(ds, 200, seed=2)
    rows = [tuple(img) for img in batch.images]
    assert len(rows) == len(set(rows))


def test_triplet_exhaustion_raises():
    ds = digit_dataset(per_class=2)
    with pytest.raises(ContractViolation, match="label"):
        make_addition_triplets(ds, 100, seed=3)


def test_triplet_pairs_cover_admissible_set():
    ds = digit_dataset(per_class=400)
    batch = make_addition_triplets(ds, 1000, seed=4)
    pairs = {(a, b) for a, b, _ in batch.records}
    assert len(pairs) > 40  # covers most of the 55 admissible pairs
    assert all(a + b <= 9 for a, b in pairs)


def test_triplet_shuffle_preserves_blocks():
    ds = digit_dataset()
    batch = make_addition_triplets(ds, 30, seed=5)
    shuffled = batch.shuffled(np.random.default_rng(6))
    assert np.all(shuffled.records[:, 0] + shuffled.records[:, 1] == shuffled.records[:, 2])
    assert np.array_equal(shuffled.labels[0::3], shuffled.records[:, 0])
    assert np.array_equal(shuffled.labels[2::3], shuffled.records[:, 2])
    assert sorted(map(tuple, shuffled.records)) == sorted(map(tuple, batch.records))


# -- augment -------------------------------------------------------------------------


def test_augment_identity_when_disabled():
    x = np.random.default_rng(7).normal(size=(5, 2))
    cfg = AugmentConfig(gaussian_noise_std=0.0)
    out = augment(x, cfg, np.random.default_rng(8))
    assert np.array_equal(out, x)


def test_augment_toy_noise_statistics():
    x = np.zeros((10_000, 2))
    cfg = AugmentConfig(gaussian_noise_std=0.03)
    out = augment(x, cfg, np.random.default_rng(9))
    disp = out - x
    assert abs(disp.mean()) < 0.002
    assert abs(disp.std() - 0.03) < 0.002


def test_augment_preserves_shape_and_is_seeded():
    x = np.random.default_rng(10).normal(size=(12, 49))
    cfg = AugmentConfig(gaussian_noise_std=0.3, crop=True, max_shift=2, jitter_prob=0.5)
    a = augment(x, cfg, np.random.default_rng(11))
    b = augment(x, cfg, np.random.default_rng(11))
    assert a.shape == x.shape
    assert np.array_equal(a, b)
    assert not np.array_equal(a, x)


def test_augment_crop_rejects_non_square_data():
    cfg = AugmentConfig(crop=True)
    with pytest.raises(ContractViolation):
        augment(np.zeros((3, 5)), cfg, np.random.default_rng(12))


# -- cache ---------------------------------------------------------------------------


def test_cache_round_trip(tmp_path):
    ds = gen_moons(64, seed=13)
    path = tmp_path / "moons.bin"
    save_cache(ds, path)
    back = load_cache(path)
    assert np.array_equal(back.points, ds.points)
    assert np.array_equal(back.labels, ds.labels)


def test_cache_rejects_corruption(tmp_path):
    ds = gen_circles(32, seed=14)
    path = tmp_path / "c.bin"
    save_cache(ds, path)
    blob = bytearray(path.read_bytes())
    blob[50] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        load_cache(path)


def test_cache_rejects_truncation(tmp_path):
    ds = gen_circles(32, seed=15)
    path = tmp_path / "c.bin"
    save_cache(ds, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_cache(path)
