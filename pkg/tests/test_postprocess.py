import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from veinseg.postprocess import (EmptyMaskError, centroid, closing, disk, largest_component, navigate, opening,
                                 plan_puncture, postprocess_mask)

from oracles import centroid_oracle, largest_component_oracle


def test_disk_radius_one_is_cross():
    np.testing.assert_array_equal(disk(1), [[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def test_two_blobs_keep_the_larger():
    p = np.zeros((64, 64))
    p[5:15, 5:10] = 0.9     # 50 pixels
    p[40:42, 40:45] = 0.9   # 10 pixels
    vm = postprocess_mask(p)
    assert not vm.failed and not vm.mask[40:42, 40:45].any()
    # opening with the cross trims the rectangle's four corners and nothing else
    assert vm.mask.sum() == 46 and vm.mask[5:15, 5:10].sum() == 46


def test_isolated_pixel_removed_by_opening():
    p = np.zeros((64, 64))
    p[30, 30] = 1.0
    vm = postprocess_mask(p)
    assert vm.failed and not vm.mask.any()
    assert vm.stages["raw"].sum() == 1


def test_all_zero_map_fails():
    vm = postprocess_mask(np.zeros((64, 64)))
    assert vm.failed and vm.mask.dtype == np.uint8 and not vm.mask.any()


def test_threshold_is_strict():
    p = np.zeros((64, 64))
    p[10:20, 10:20] = 0.5
    assert postprocess_mask(p).failed
    p[10:20, 10:20] = 0.5000001
    np.testing.assert_array_equal(postprocess_mask(p).mask, postprocess_mask(np.ceil(p)).mask)
    assert postprocess_mask(p).mask.sum() == 96


def test_closing_fills_a_one_pixel_gap():
    m = np.zeros((20, 20), bool)
    m[5:15, 5:9] = True
    m[5:15, 10:14] = True
    c = closing(m, 1)
    # the gap fills except at its two ends, where the cross cannot bridge diagonally
    assert c[6:14, 9].all() and not c[5, 9] and not c[14, 9]
    assert (c & ~m).sum() == 8
    assert opening(m, 1).sum() <= m.sum()


def test_blob_touching_border_survives_closing():
    m = np.zeros((20, 20), bool)
    m[0:6, 0:6] = True
    np.testing.assert_array_equal(closing(m, 1), m)


def test_largest_component_oracle_1000_grids():
    rng = np.random.default_rng(0)
    for i in range(1000):
        m = rng.random((64, 64)) < rng.uniform(0.05, 0.6)
        expected = largest_component_oracle(m)
        got = largest_component(m)
        assert np.array_equal(got, expected), i
        if expected.any():
            assert centroid(got) == centroid_oracle(expected)


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, (16, 16)))
def test_largest_component_properties(m):
    lc = largest_component(m)
    assert not (lc & ~m).any()
    np.testing.assert_array_equal(lc, largest_component_oracle(m))
    np.testing.assert_array_equal(largest_component(lc), lc)


def test_centroid_examples():
    m = np.zeros((3, 3), int)
    m[0, 0] = m[0, 2] = m[2, 0] = m[2, 2] = 1
    assert centroid(m) == (1.0, 1.0)
    m = np.zeros((10, 10), int)
    m[7, 5] = 1  # row 7, column 5
    assert centroid(m) == (5.0, 7.0)
    with pytest.raises(EmptyMaskError):
        centroid(np.zeros((4, 4)))


def test_centroid_random_200_pixels():
    rng = np.random.default_rng(1)
    m = np.zeros((64, 64), int)
    m.flat[rng.choice(64 * 64, 200, replace=False)] = 1
    cx, cy = centroid(m)
    ox, oy = centroid_oracle(m)
    assert abs(cx - ox) <= 1e-9 and abs(cy - oy) <= 1e-9


def test_plan_puncture_depth_and_axes():
    cmd = plan_puncture((20.0, 10.0 / 0.3), skin_row=0, mm_per_pixel=0.3, needle_angle_deg=17.0)
    assert cmd.depth_mm == pytest.approx(10.0, abs=1e-12)
    assert cmd.axis6_travel_mm == pytest.approx(10 / math.sin(math.radians(17)), abs=1e-12)
    assert abs(cmd.axis6_travel_mm - 34.20) <= 0.01
    dx, dy = cmd.tip_displacement()
    assert abs(dy - cmd.depth_mm) <= 1e-9 and abs(dx - cmd.axis5_travel_mm) <= 1e-9
    assert plan_puncture((3.0, 40.0)).depth_mm == pytest.approx(12.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1, 63), st.floats(0.5, 63), st.floats(0.05, 1.0), st.floats(1, 89))
def test_tip_lands_on_target(x, y, mmpp, angle):
    cmd = plan_puncture((x, y), skin_row=0.0, mm_per_pixel=mmpp, needle_angle_deg=angle)
    _, dy = cmd.tip_displacement()
    assert abs(dy - y * mmpp) <= 1e-9 * max(1.0, y * mmpp)


def test_plan_puncture_rejects_degenerate():
    with pytest.raises(ValueError):
        plan_puncture((10.0, 5.0), skin_row=5.0)
    with pytest.raises(ValueError):
        plan_puncture((10.0, 20.0), needle_angle_deg=90)
    with pytest.raises(ValueError):
        plan_puncture((10.0, 20.0), mm_per_pixel=0)


def test_navigate_records():
    p = np.zeros((64, 64))
    p[30:40, 20:30] = 0.9
    rec = navigate(p)
    assert not rec["failed"] and rec["centroid"] == [24.5, 34.5]
    assert rec["depth_mm"] == pytest.approx(34.5 * 0.3)
    assert navigate(np.zeros((64, 64)))["failed"]
    above = navigate(p, skin_row=50)
    assert above["failed"] and "error" in above
