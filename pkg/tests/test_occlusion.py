import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowmend.occlusion import (
    CropClampedWarning, CropGeometry, EyeAnchors, MaskKind, OcclusionError, OcclusionMask,
    apply_occlusion, crop_box, crop_face, mask_on_flow, read_anchors_csv, write_anchors_csv,
)


def test_crop_box_worked_example():
    # ipd 40: side 88, top 50 - 24
    assert crop_box(EyeAnchors((40, 50), (80, 50))) == (16.0, 26.0, 104.0, 114.0)


def test_degenerate_ipd():
    with pytest.raises(OcclusionError, match="degenerate ipd"):
        EyeAnchors((10, 10), (10, 10))
    with pytest.raises(OcclusionError):
        EyeAnchors((50, 10), (20, 10))


def test_symmetric_anchors_center_the_box():
    img = np.zeros((120, 120))
    x0, _, x1, _ = crop_box(EyeAnchors((40, 50), (80, 50)))
    assert (x0 + x1) / 2 == img.shape[1] / 2


def test_crop_face_shape_and_content():
    img = np.random.default_rng(0).random((130, 120))
    out = crop_face(img, EyeAnchors((40, 50), (80, 50)))
    assert out.shape == (88, 88)
    assert np.array_equal(out, img[26:114, 16:104])


def test_crop_side_scales_with_ipd():
    img = np.zeros((400, 400))
    a = crop_face(img, EyeAnchors((180, 150), (220, 150)))
    b = crop_face(img, EyeAnchors((160, 150), (240, 150)))
    assert a.shape[0] == a.shape[1]
    assert b.shape[0] == 2 * a.shape[0]


def test_crop_anchor_outside_image():
    with pytest.raises(OcclusionError):
        crop_face(np.zeros((50, 50)), EyeAnchors((10, 10), (60, 10)))


def test_crop_clamps_and_warns():
    img = np.random.default_rng(1).random((60, 60))
    with pytest.warns(CropClampedWarning):
        out = crop_face(img, EyeAnchors((2, 10), (22, 10)))
    assert out.shape == (44, 44)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        crop_face(np.zeros((200, 200)), EyeAnchors((80, 80), (120, 80)))


def test_mask_invariants():
    with pytest.raises(OcclusionError):
        OcclusionMask(MaskKind.CUSTOM, ())
    with pytest.raises(OcclusionError):
        OcclusionMask(MaskKind.CUSTOM, ((0.0, 0.0, 1.2, 1.0),))
    with pytest.raises(OcclusionError):
        OcclusionMask.preset("custom")
    assert OcclusionMask.preset("lower_part").rects == ((0.0, 0.52, 1.0, 1.0),)


def test_full_frame_black():
    m = OcclusionMask(MaskKind.CUSTOM, ((0, 0, 1, 1),))
    assert np.all(apply_occlusion(np.random.default_rng(0).random((9, 9)), m) == 0)
    assert mask_on_flow(m, 5, 3).all()


def test_mask_on_flow_left_half():
    m = OcclusionMask(MaskKind.CUSTOM, ((0, 0, 0.5, 1),))
    g = mask_on_flow(m, 4, 4)
    assert g[:, :2].all() and not g[:, 2:].any()


def test_mask_on_flow_disjoint_counts():
    r1, r2 = (0.0, 0.0, 0.3, 0.4), (0.5, 0.5, 1.0, 0.9)
    both = OcclusionMask(MaskKind.CUSTOM, (r1, r2))
    one = OcclusionMask(MaskKind.CUSTOM, (r1,))
    two = OcclusionMask(MaskKind.CUSTOM, (r2,))
    for w, h in ((7, 5), (64, 64), (13, 31)):
        assert mask_on_flow(both, w, h).sum() == mask_on_flow(one, w, h).sum() + mask_on_flow(two, w, h).sum()


def _inside(mask, h, w, i, j):
    cx, cy = (j + 0.5) / w, (i + 0.5) / h
    return any(x0 <= cx < x1 and y0 <= cy < y1 for x0, y0, x1, y1 in mask.rects)


@pytest.mark.parametrize("kind", ["eyes", "mouth", "lower_part"])
def test_pixels_outside_untouched_exhaustive(kind):
    mask = OcclusionMask.preset(kind, fill=0.25)
    img = np.random.default_rng(2).random((37, 41))
    out = apply_occlusion(img, mask)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            if _inside(mask, *img.shape, i, j):
                assert out[i, j] == 0.25
            else:
                assert out[i, j] == img[i, j]


@settings(max_examples=40, deadline=None)
@given(rects=st.lists(st.tuples(*[st.floats(0, 1)] * 4), min_size=1, max_size=3),
       fill=st.floats(0, 1), h=st.integers(1, 30), w=st.integers(1, 30))
def test_occlusion_idempotent(rects, fill, h, w):
    rects = [(min(a, c), min(b, d), max(a, c), max(b, d)) for a, b, c, d in rects]
    mask = OcclusionMask(MaskKind.CUSTOM, rects, fill)
    img = np.random.default_rng(h * w).random((h, w))
    once = apply_occlusion(img, mask)
    assert np.array_equal(apply_occlusion(once, mask), once)
    assert np.array_equal(once[~mask_on_flow(mask, w, h)], img[~mask_on_flow(mask, w, h)])


def test_mask_json_roundtrip(tmp_path):
    m = OcclusionMask(MaskKind.CUSTOM, ((0.1, 0.2, 0.3, 0.4), (0.5, 0.5, 0.9, 1.0)), 0.5)
    m.save(tmp_path / "m.json")
    assert OcclusionMask.load(tmp_path / "m.json") == m
    assert OcclusionMask.from_dict({"kind": "mouth"}) == OcclusionMask.preset("mouth")


def test_anchors_csv_roundtrip(tmp_path):
    anchors = {"a/frame_0001.png": EyeAnchors((10.25, 20), (30.5, 21)),
               "b/frame_0001.png": EyeAnchors((1 / 3, 2), (5, 2))}
    write_anchors_csv(tmp_path / "a.csv", anchors)
    assert read_anchors_csv(tmp_path / "a.csv") == anchors
    (tmp_path / "bad.csv").write_text("frame_path,left_x\nx,1\n")
    with pytest.raises(OcclusionError):
        read_anchors_csv(tmp_path / "bad.csv")


def test_geometry_override():
    g = CropGeometry(side_factor=2.0, top_factor=0.5)
    assert crop_box(EyeAnchors((40, 50), (80, 50)), g) == (20.0, 30.0, 100.0, 110.0)
