import numpy as np
import pytest

from segtrack import features, nn


def labeled_frame(W=320, H=240, box=(140, 100, 40, 20)):
    frame = np.zeros((H, W, 3), np.uint8)
    x, y, w, h = box
    frame[y:y + h, x:x + w] = 255
    return frame


def test_interior_target_lands_centered():
    x, y, w, h = 140, 100, 40, 20
    frame = labeled_frame(box=(x, y, w, h))
    # pixel centers of the block span [x, x+w-1]; its center is the mean of those
    center = (x + (w - 1) / 2, y + (h - 1) / 2)
    S = 128
    region = features.extract_search_region(frame, center, (w, h), crop_size=S)
    side = 4 * np.sqrt(w * h)
    assert region.scale == pytest.approx(side / S)
    bright = region.image_crop[0] > 0.5
    rows, cols = np.nonzero(bright)
    # geometric oracle: block edges mapped into crop coordinates
    u0, v0 = region.to_crop(x - 0.5, y - 0.5)
    u1, v1 = region.to_crop(x + w - 0.5, y + h - 0.5)
    assert abs(cols.min() - u0) <= 1 and abs(cols.max() + 1 - u1) <= 1
    assert abs(rows.min() - v0) <= 1 and abs(rows.max() + 1 - v1) <= 1
    assert abs(cols.mean() + 0.5 - S / 2) < 1 and abs(rows.mean() + 0.5 - S / 2) < 1


def test_corner_target_replicates_edges():
    rng = np.random.default_rng(0)
    frame = (rng.random((60, 80, 3)) * 255).astype(np.uint8)
    region = features.extract_search_region(frame, (0, 0), (10, 10), crop_size=64)
    crop = region.image_crop
    # crop pixels mapping to x < 0 and y < 0 take the frame corner value
    us, vs = np.meshgrid(np.arange(64), np.arange(64))
    fx, fy = region.to_frame(us, vs)
    outside = (fx <= 0) & (fy <= 0)
    assert outside.sum() > 100
    np.testing.assert_allclose(crop[:, outside], (frame[0, 0] / 255.0)[:, None].repeat(outside.sum(), 1), atol=1e-6)
    # crop pixels left of the frame, within its rows, replicate column 0
    left = (fx <= 0) & (fy >= 1) & (fy <= 58) & (np.abs(fy - np.round(fy)) < 1e-9)
    for u, v in zip(us[left], vs[left]):
        np.testing.assert_allclose(crop[:, v, u], frame[int(round(fy[v, u])), 0] / 255.0, atol=1e-6)


def test_inverse_mapping_roundtrip():
    region = features.extract_search_region(np.zeros((100, 100, 3)), (37.2, 61.9), (13, 21), crop_size=96)
    for x, y in [(10.0, 20.0), (37.2, 61.9), (70.5, 80.25)]:
        u, v = region.to_crop(x, y)
        bx, by = region.to_frame(u, v)
        assert abs(bx - x) < 0.5 and abs(by - y) < 0.5
    # model grid round trip
    gc, gr = region.to_grid(50.0, 55.0)
    assert np.allclose(region.grid_to_frame(gc, gr), (50.0, 55.0))


def test_degenerate_target_size():
    with pytest.raises(ValueError):
        features.extract_search_region(np.zeros((10, 10, 3)), (5, 5), (0, 4))


def test_pyramid_shapes_at_384():
    crop = np.random.default_rng(1).random((3, 384, 384)).astype(np.float32)
    pyr = features.HandcraftedBackbone()(crop)
    assert [lv.shape[1:] for lv in pyr.levels] == [(192, 192), (96, 96), (48, 48)]
    assert pyr.channels == [features.BASE_CHANNELS] * 3


def test_reduced_features_shape():
    rng = np.random.default_rng(2)
    crop = rng.random((3, 384, 384)).astype(np.float32)
    region = features.SearchRegion(crop, (0, 0), 1.0, (384, 384))
    reduce = nn.LayerParams.kaiming(features.BASE_CHANNELS, 64, 1, rng)
    adjust = nn.LayerParams.kaiming(64, 64, 3, rng)
    _, feats = features.compute_feature_pyramid(region, reduce, adjust)
    assert feats.shape == (64, 48, 48)


def test_constant_image_has_no_gradient_channels():
    base = features.base_channels(np.full((3, 32, 32), 0.3, np.float32))
    assert not base[3:].any()
    np.testing.assert_allclose(base[:3], 0.3)


def test_vertical_edge_orientation_bin():
    crop = np.zeros((3, 16, 16), np.float32)
    crop[:, :, 8:] = 1.0
    base = features.base_channels(crop)
    hist = base[5:]
    # per-pixel oracle: central difference in x, zero in y -> angle 0 -> bin 0
    gray = crop.mean(axis=0)
    gx = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2
    np.testing.assert_allclose(hist[0], np.abs(gx), atol=1e-7)
    assert not hist[1:].any()


def test_translation_covariance_by_one_stride():
    rng = np.random.default_rng(3)
    big = rng.random((3, 96, 96 + 8)).astype(np.float32)
    bb = features.HandcraftedBackbone()
    a = bb(big[:, :, :96])
    for s in features.STRIDES:
        b = bb(big[:, :, s:96 + s])
        la, lb = a.level(s), b.level(s)
        # shifted crop: cell j of b equals cell j+1 of a (interior cells)
        np.testing.assert_allclose(lb[:, 1:-1, 1:-2], la[:, 1:-1, 2:-1], atol=1e-6)


def test_precomputed_backbone(tmp_path):
    rng = np.random.default_rng(4)
    crop = rng.random((3, 64, 64)).astype(np.float32)
    pyr = features.HandcraftedBackbone()(crop)
    features.save_pyramid(tmp_path, 0, pyr)
    loaded = features.PrecomputedBackbone(tmp_path)(crop)
    for x, y in zip(pyr.levels, loaded.levels):
        np.testing.assert_array_equal(x, y)


def test_mask_crop_and_paste_roundtrip():
    mask = np.zeros((120, 160), bool)
    mask[40:80, 60:100] = True
    region = features.extract_search_region(np.zeros((120, 160, 3)), (79.5, 59.5), (40, 40), crop_size=160)
    cm = features.crop_mask(mask, region)
    back = features.paste_mask(cm, region)
    assert (back ^ mask).sum() <= 2 * 40 * 2  # boundary-only disagreement
