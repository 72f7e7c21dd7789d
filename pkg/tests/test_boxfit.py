import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from segtrack import boxfit
from segtrack.geometry import RotatedBox, convex_hull, rasterize_box


def render_ellipse(shape, cx, cy, a, b, angle):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def naive_counts(box, mask):
    ys, xs = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
    inside = box.contains(xs, ys)
    return int((inside & mask).sum()), int((inside & ~mask).sum()), int((~inside & mask).sum())


def random_blob(seed, shape=(96, 96)):
    rng = np.random.default_rng(seed)
    m = np.zeros(shape, bool)
    for _ in range(rng.integers(1, 4)):
        m |= render_ellipse(shape, rng.uniform(35, 60), rng.uniform(35, 60), rng.uniform(8, 25),
                            rng.uniform(5, 15), rng.uniform(0, math.pi))
    m = ndimage.binary_opening(m, iterations=1)
    return boxfit.binarize_largest_component(m.astype(float))


# -- binarization ------------------------------------------------------------

def test_largest_component_kept():
    prob = np.zeros((30, 30))
    prob[2:4, 2:7] = 0.9  # 10 px
    prob[10:20, 10:15] = 0.9  # 50 px
    m = boxfit.binarize_largest_component(prob)
    assert m.sum() == 50 and m[10, 10] and not m[2, 2]


def test_two_channel_input_and_empty_signal():
    prob = np.full((2, 8, 8), 0.5)
    prob[1] = 0.4
    prob[0] = 0.6
    assert boxfit.binarize_largest_component(prob) is None


def test_diagonal_pixels_connect():
    prob = np.zeros((5, 5))
    prob[1, 1] = prob[2, 2] = prob[3, 3] = 1
    assert boxfit.binarize_largest_component(prob).sum() == 3


# -- ellipse -----------------------------------------------------------------

def test_ellipse_recovers_rendered_parameters():
    mask = render_ellipse((160, 160), 80.3, 77.6, 40, 20, math.radians(30))
    box = boxfit.fit_ellipse(mask)
    assert math.hypot(box.cx - 80.3, box.cy - 77.6) < 1
    assert abs(box.s_major / 2 - 40) / 40 < 0.02
    assert abs(box.s_minor / 2 - 20) / 20 < 0.02
    assert abs(math.degrees(box.angle) - 30) < 2


def test_circle_has_equal_axes():
    box = boxfit.fit_ellipse(render_ellipse((100, 100), 50, 50, 30, 30, 0))
    assert abs(box.s_major - box.s_minor) / box.s_major < 0.02


def test_tiny_component_falls_back_to_min_area():
    mask = np.zeros((10, 10), bool)
    mask[4, 2:7] = True  # 5 collinear pixels
    assert boxfit.fit_ellipse(mask) == boxfit.min_area_box(mask)


# -- IoU_mod -----------------------------------------------------------------

def test_iou_mod_arithmetic():
    assert boxfit.iou_mod_from_counts(80, 20, 20, 0.25) == 80 / 105


def test_iou_mod_exact_cover_is_one():
    box = RotatedBox.make(40.2, 35.7, 30, 12, 0.6)
    mask = rasterize_box(box, (80, 80))
    score, stats = boxfit.iou_mod(box, mask)
    assert score == 1.0 and stats.n_in_neg == 0 and stats.n_out_pos == 0


def test_iou_mod_disjoint_is_zero():
    mask = np.zeros((50, 50), bool)
    mask[:10, :10] = True
    assert boxfit.iou_mod(RotatedBox.make(40, 40, 6, 6), mask)[0] == 0.0
    assert boxfit.iou_mod_from_counts(0, 0, 0) == 0.0


def test_iou_mod_rejects_negative_alpha():
    with pytest.raises(ValueError):
        boxfit.iou_mod(RotatedBox.make(5, 5, 2, 2), np.ones((10, 10), bool), alpha=-1)


@pytest.mark.oracle
@pytest.mark.parametrize("seed", range(5))
def test_counts_match_naive_rasterization(seed):
    rng = np.random.default_rng(seed)
    mask = random_blob(seed)
    box = RotatedBox.make(rng.uniform(30, 60), rng.uniform(30, 60), rng.uniform(5, 50), rng.uniform(5, 30),
                          rng.uniform(0, math.pi))
    _, stats = boxfit.iou_mod(box, mask)
    assert (stats.n_in_pos, stats.n_in_neg, stats.n_out_pos) == naive_counts(box, mask)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_alpha_zero_is_recall(n_in_pos, n_in_neg, n_out_pos):
    lhs = boxfit.iou_mod_from_counts(n_in_pos, n_in_neg, n_out_pos, 0.0)
    rhs = n_in_pos / (n_in_pos + n_out_pos) if n_in_pos + n_out_pos else 0.0
    assert lhs == rhs


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 50),
       st.floats(0, 2))
def test_iou_mod_monotone(n_in_pos, n_in_neg, n_out_pos, extra, alpha):
    base = boxfit.iou_mod_from_counts(n_in_pos, n_in_neg, n_out_pos, alpha)
    assert boxfit.iou_mod_from_counts(n_in_pos, n_in_neg + extra, n_out_pos, alpha) <= base
    assert boxfit.iou_mod_from_counts(n_in_pos, n_in_neg, n_out_pos + extra, alpha) <= base


# -- coordinate descent ------------------------------------------------------

def test_axis_aligned_rectangle_recovered():
    mask = np.zeros((120, 120), bool)
    mask[30:70, 20:100] = True  # 80 wide, 40 tall
    box, info = boxfit.fit_rotated_box(mask, return_info=True)
    assert info["final"] >= 0.95
    ys, xs = np.nonzero(rasterize_box(box, mask.shape))
    assert abs(xs.min() - 20) <= 1 and abs(xs.max() - 99) <= 1
    assert abs(ys.min() - 30) <= 1 and abs(ys.max() - 69) <= 1


@pytest.mark.parametrize("seed", range(6))
def test_descent_never_worse_than_initial(seed):
    mask = random_blob(seed)
    box, info = boxfit.fit_rotated_box(mask, return_info=True)
    assert info["final"] >= info["initial"]
    assert info["evaluations"] <= boxfit.MAX_EVALUATIONS
    assert boxfit.iou_mod(box, mask)[0] == pytest.approx(info["final"])


def grid_search_best(mask, init, alpha=0.25):
    best = 0.0
    for f1 in np.arange(0.5, 1.2001, 0.025):
        for f2 in np.arange(0.5, 1.2001, 0.025):
            box = RotatedBox(init.cx, init.cy, init.s_major * f1, init.s_minor * f2, init.angle)
            best = max(best, boxfit.iou_mod_from_counts(*naive_counts(box, mask), alpha))
    return best


@pytest.mark.oracle
def test_descent_close_to_grid_search_on_blobs():
    for seed in range(20):
        mask = random_blob(100 + seed)
        init = boxfit.fit_ellipse(mask)
        _, info = boxfit.fit_rotated_box(mask, return_info=True)
        assert info["final"] >= 0.98 * grid_search_best(mask, init), seed


def test_shrink_only_never_grows():
    mask = random_blob(7)
    init = boxfit.fit_ellipse(mask)
    box = boxfit.fit_rotated_box(mask, shrink_only=True)
    assert box.s_major <= init.s_major + 1e-9 and box.s_minor <= init.s_minor + 1e-9


def test_translation_invariance():
    mask = np.zeros((128, 128), bool)
    mask[:96, :96] = random_blob(3)
    moved = np.roll(mask, (11, 17), axis=(0, 1))
    a = boxfit.fit_rotated_box(mask)
    b = boxfit.fit_rotated_box(moved)
    assert b.cx - a.cx == pytest.approx(17, abs=1e-6) and b.cy - a.cy == pytest.approx(11, abs=1e-6)
    assert b.s_major == pytest.approx(a.s_major, rel=1e-9) and b.s_minor == pytest.approx(a.s_minor, rel=1e-9)
    assert b.angle == pytest.approx(a.angle, abs=1e-9)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        boxfit.fit_rotated_box(np.zeros((10, 10), bool))


# -- alternatives ------------------------------------------------------------

def test_min_max_extremes():
    mask = np.zeros((12, 12), bool)
    mask[1, 1] = mask[9, 5] = True  # points (x, y) = (1, 1) and (5, 9)
    corners = boxfit.alternative_boxes(mask, "min_max").corners()
    np.testing.assert_allclose([corners[:, 0].min(), corners[:, 0].max()], [1, 5], atol=1e-12)
    np.testing.assert_allclose([corners[:, 1].min(), corners[:, 1].max()], [1, 9], atol=1e-12)


def test_min_area_equals_min_max_for_axis_aligned_rectangle():
    mask = np.zeros((60, 60), bool)
    mask[10:30, 5:50] = True
    a = boxfit.alternative_boxes(mask, "min_area").area
    b = boxfit.alternative_boxes(mask, "min_max").area
    assert abs(a - b) / b < 0.01


@pytest.mark.oracle
@pytest.mark.parametrize("seed", range(10))
def test_min_area_beats_angle_sweep(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 2)) * [30, 10] @ np.array([[0.8, 0.6], [-0.6, 0.8]]) + 50
    mask = np.zeros((120, 120), bool)
    ij = np.clip(np.round(pts).astype(int), 0, 119)
    mask[ij[:, 1], ij[:, 0]] = True
    box = boxfit.min_area_box(mask)
    ys, xs = np.nonzero(mask)
    P = np.stack([xs, ys], axis=1).astype(float)
    for deg in range(0, 180):
        t = math.radians(deg)
        u = P @ [math.cos(t), math.sin(t)]
        v = P @ [-math.sin(t), math.cos(t)]
        assert box.area <= (u.max() - u.min()) * (v.max() - v.min()) + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_alternative_boxes_contain_foreground(seed):
    mask = random_blob(seed)
    ys, xs = np.nonzero(mask)
    mm = boxfit.alternative_boxes(mask, "min_max")
    assert mm.contains(xs, ys, tol=1e-9).all()
    ma = boxfit.alternative_boxes(mask, "min_area")
    hull = convex_hull(np.stack([xs, ys], axis=1))
    assert ma.contains(hull[:, 0], hull[:, 1], tol=1e-6).all()


def test_fit_speed_on_384_masks():
    masks = [render_ellipse((384, 384), 192 + 5 * k, 190, 70 + 3 * k, 35, 0.3 * k) for k in range(10)]
    masks = [m & ~render_ellipse((384, 384), 230, 200, 12, 12, 0) for m in masks]
    times = []
    for m in masks:
        t0 = time.perf_counter()
        _, info = boxfit.fit_rotated_box(m, return_info=True)
        times.append(time.perf_counter() - t0)
        assert info["evaluations"] <= 200
    assert np.median(times) < 0.005 * 10  # order-of-magnitude tolerance; strict 5 ms in acceptance
