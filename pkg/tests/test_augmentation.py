import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from veinseg import augmentation as A


def test_rotation_range_and_flip_frequency():
    rng = np.random.default_rng(0)
    samples = [A.sample_augmentation(rng, "spatial") for _ in range(10_000)]
    rot = np.array([s.rotation for s in samples])
    assert rot.min() >= -15 and rot.max() <= 15
    assert abs(np.mean([s.hflip for s in samples]) - 0.5) <= 0.02
    for s in samples[:500]:
        assert -15 <= s.shear <= 15 and -0.01 <= s.aspect <= 0.01


def test_intensity_ranges():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        a = A.sample_augmentation(rng, "intensity")
        assert -15 <= a.offset <= 15 and 0.8 <= a.gain <= 1.2
        assert 0 <= a.dropout <= 0.05 and 0.8 <= a.contrast <= 1.2


def test_same_seed_same_sequence():
    r1, r2 = np.random.default_rng(7), np.random.default_rng(7)
    assert [A.sample_augmentation(r1, "spatial") for _ in range(20)] == \
        [A.sample_augmentation(r2, "spatial") for _ in range(20)]
    assert A.sample_augmentation(3, "intensity") == A.sample_augmentation(3, "intensity")


def test_unknown_kind_and_out_of_range():
    with pytest.raises(ValueError):
        A.sample_augmentation(0, "colour")
    with pytest.raises(ValueError):
        A.SpatialAug(rotation=20)
    with pytest.raises(ValueError):
        A.IntensityAug(gain=2.0)


def test_identity_is_only_a_resize():
    img = np.random.default_rng(2).uniform(0, 255, (70, 70))
    out, _ = A.apply_spatial(img, None, A.SpatialAug())
    np.testing.assert_array_equal(out, A.resize(img, 64))
    same, _ = A.apply_spatial(img[:64, :64], None, A.SpatialAug())
    np.testing.assert_allclose(same, img[:64, :64], atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.floats(-15, 15), st.floats(-15, 15), st.floats(-0.01, 0.01), st.integers(0, 1000))
def test_mask_stays_binary(hflip, rot, shear, aspect, seed):
    rng = np.random.default_rng(seed)
    mask = (rng.random((70, 70)) < 0.3).astype(np.uint8)
    img = rng.uniform(0, 255, (70, 70))
    out, m = A.apply_spatial(img, mask, A.SpatialAug(hflip, rot, shear, aspect))
    assert set(np.unique(m)) <= {0, 1}
    assert out.shape == m.shape == (64, 64)
    assert out.min() >= 0 and out.max() <= 255


def _centroid(m):
    ys, xs = np.nonzero(m)
    return xs.mean(), ys.mean()


def test_rotation_moves_centroid_analytically():
    n = 64
    yy, xx = np.mgrid[0:n, 0:n]
    mask = ((xx - 45) ** 2 + (yy - 25) ** 2 <= 36).astype(np.uint8)
    aug = A.SpatialAug(rotation=10.0)
    _, out = A.apply_spatial(np.zeros((n, n)), mask, aug)
    cx, cy = _centroid(mask)
    c = (n - 1) / 2
    th = np.deg2rad(10.0)
    ex = c + np.cos(th) * (cx - c) - np.sin(th) * (cy - c)
    ey = c + np.sin(th) * (cx - c) + np.cos(th) * (cy - c)
    gx, gy = _centroid(out)
    assert np.hypot(gx - ex, gy - ey) <= 1.0
    assert np.allclose(aug.map_point(cx, cy, n), (ex, ey))


def test_flip_mirrors_columns():
    img = np.tile(np.arange(64, dtype=float), (64, 1))
    out, _ = A.apply_spatial(img, None, A.SpatialAug(hflip=True))
    np.testing.assert_allclose(out, img[:, ::-1], atol=1e-4)


def test_intensity_identity_clamp_and_dropout():
    img = np.random.default_rng(3).uniform(0, 255, (64, 64))
    np.testing.assert_allclose(A.apply_intensity(img, A.IntensityAug()), img, atol=1e-4)
    assert A.apply_intensity(np.array([[250.0]]), A.IntensityAug(gain=1.2))[0, 0] == 255.0
    ones = np.full((64, 64), 100.0)
    zeroed = [int((A.apply_intensity(ones, A.IntensityAug(dropout=0.05, dropout_seed=s)) == 0).sum())
              for s in range(200)]
    # binomial(4096, 0.05): mean 204.8, sd ~13.9
    assert abs(np.mean(zeroed) - 204.8) < 3 * 13.9 / np.sqrt(200)


def test_intensity_order_contrast_then_gain_then_offset():
    out = A.apply_intensity(np.array([[200.0]]), A.IntensityAug(offset=-10, gain=0.9, contrast=1.1))
    expected = (127.5 + 1.1 * (200 - 127.5)) * 0.9 - 10
    assert out[0, 0] == pytest.approx(expected, abs=1e-3)


def test_paired_views_share_geometry():
    img = np.random.default_rng(4).uniform(0, 255, (70, 70))
    v = A.paired_views(img, np.random.default_rng(5))
    teacher, _ = A.apply_spatial(img, None, v.spatial)
    np.testing.assert_array_equal(v.teacher, teacher)
    np.testing.assert_array_equal(v.student, A.apply_intensity(teacher, v.intensity))
