"""Tests for the capture-bundle container, disk layout, and downsampling."""

import os

import numpy as np
import pytest

from haircap.bundle import (
    CaptureBundle,
    downsample_bundle,
    load_bundle,
    read_bbox,
    read_parting,
    save_bundle,
    scale_camera,
    write_bbox,
    write_parting,
)
from haircap.errors import ContractViolation, SpecParseError
from haircap.fieldopt import ViewData
from haircap.geometry import HairBBox, look_at_camera, project_point
from haircap.mesh import icosphere


# ---------------------------------------------------------------------------
# fixtures


def make_bundle(n_views=2, res=16, n_sources=1, parting=None, seed=3):
    rng = np.random.default_rng(seed)
    cams = []
    eyes = [(0.0, -0.4, 0.1), (0.4, 0.0, 0.1), (0.0, 0.4, 0.1)][:n_views]
    for eye in eyes:
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.1), (0.0, 0.0, 1.0),
                                   focal=30.0, width=res, height=res))
    images = [rng.uniform(0.0, 1.0, (res, res, 3)) for _ in range(n_views)]
    masks = [[rng.integers(0, 3, (res, res)).astype(np.uint8)
              for _ in range(n_sources)] for _ in range(n_views)]
    return CaptureBundle(
        cameras=cams, images=images, masks=masks,
        inner=icosphere(1, 0.03), outer=icosphere(1, 0.2),
        bbox=HairBBox([-0.2, -0.2, -0.1], [0.2, 0.2, 0.3]),
        parting=parting)


# ---------------------------------------------------------------------------
# container validation


def test_bundle_accessors():
    b = make_bundle(n_views=2, n_sources=2)
    assert b.n_views == 2
    vd = b.view(1)
    assert isinstance(vd, ViewData)
    assert vd.camera is b.cameras[1]
    assert vd.image is b.images[1]
    assert len(b.views()) == 2


def test_bundle_rejects_misaligned_lists():
    b = make_bundle(n_views=2)
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=b.cameras, images=b.images[:1], masks=b.masks,
                      inner=b.inner, outer=b.outer, bbox=b.bbox)


def test_bundle_rejects_empty():
    b = make_bundle()
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=[], images=[], masks=[],
                      inner=b.inner, outer=b.outer, bbox=b.bbox)


def test_bundle_rejects_size_mismatch():
    b = make_bundle(n_views=2)
    bad = [b.images[0], np.zeros((8, 8, 3))]
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=b.cameras, images=bad, masks=b.masks,
                      inner=b.inner, outer=b.outer, bbox=b.bbox)


def test_bundle_rejects_missing_mask_source():
    b = make_bundle(n_views=2)
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=b.cameras, images=b.images,
                      masks=[b.masks[0], []],
                      inner=b.inner, outer=b.outer, bbox=b.bbox)


def test_bundle_rejects_bad_parting():
    b = make_bundle(n_views=2)
    pts = np.array([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=b.cameras, images=b.images, masks=b.masks,
                      inner=b.inner, outer=b.outer, bbox=b.bbox,
                      parting=(5, pts))
    with pytest.raises(ContractViolation):
        CaptureBundle(cameras=b.cameras, images=b.images, masks=b.masks,
                      inner=b.inner, outer=b.outer, bbox=b.bbox,
                      parting=(0, pts[:, :1]))


# ---------------------------------------------------------------------------
# small file formats


def test_bbox_roundtrip(tmp_path):
    box = HairBBox([-0.123456, -0.2, 0.01], [0.3, 0.223456789, 0.5])
    p = tmp_path / "bbox.txt"
    write_bbox(p, box)
    back = read_bbox(p)
    np.testing.assert_allclose(back.lo, box.lo, atol=1e-9)
    np.testing.assert_allclose(back.hi, box.hi, atol=1e-9)


def test_bbox_wrong_count(tmp_path):
    p = tmp_path / "bbox.txt"
    p.write_text("1 2 3 4 5\n")
    with pytest.raises(SpecParseError):
        read_bbox(p)


def test_parting_roundtrip(tmp_path):
    pts = np.array([[12.5, 30.25], [13.0, 31.0], [14.5, 32.75]])
    p = tmp_path / "parting.txt"
    write_parting(p, 3, pts)
    vid, back = read_parting(p)
    assert vid == 3
    np.testing.assert_allclose(back, pts, atol=1e-6)


def test_parting_rejects_odd_tokens(tmp_path):
    p = tmp_path / "parting.txt"
    p.write_text("0 1.0 2.0 3.0\n")
    with pytest.raises(SpecParseError):
        read_parting(p)


# ---------------------------------------------------------------------------
# directory roundtrip


def test_save_load_roundtrip(tmp_path):
    pts = np.array([[4.0, 2.5], [5.0, 3.5]])
    b = make_bundle(n_views=2, n_sources=3, parting=(1, pts))
    root = tmp_path / "bundle"
    save_bundle(root, b)
    assert (root / "images" / "view_000.png").exists()
    assert (root / "masks" / "view_001.png").exists()
    assert (root / "masks" / "src1" / "view_000.png").exists()
    assert (root / "masks" / "src2" / "view_001.png").exists()
    back = load_bundle(root)
    assert back.n_views == 2
    for ca, cb in zip(b.cameras, back.cameras):
        np.testing.assert_array_equal(ca.intrinsics, cb.intrinsics)
        np.testing.assert_array_equal(ca.extrinsics, cb.extrinsics)
        assert (ca.width, ca.height) == (cb.width, cb.height)
    for ia, ib in zip(b.images, back.images):
        assert np.abs(ia - ib).max() <= 0.5 / 255.0 + 1e-12
    for ma, mb in zip(b.masks, back.masks):
        assert len(mb) == 3
        for sa, sb in zip(ma, mb):
            np.testing.assert_array_equal(sa, sb)
    np.testing.assert_array_equal(b.inner.vertices, back.inner.vertices)
    np.testing.assert_array_equal(b.outer.faces, back.outer.faces)
    np.testing.assert_allclose(back.bbox.lo, b.bbox.lo, atol=1e-9)
    assert back.parting[0] == 1
    np.testing.assert_allclose(back.parting[1], pts, atol=1e-6)


def test_load_requires_cameras(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(SpecParseError):
        load_bundle(tmp_path / "empty")


def test_load_reports_missing_view(tmp_path):
    b = make_bundle(n_views=2)
    root = tmp_path / "bundle"
    save_bundle(root, b)
    os.remove(root / "images" / "view_001.png")
    with pytest.raises(SpecParseError, match="view 1"):
        load_bundle(root)


# ---------------------------------------------------------------------------
# downsampling


def test_downsample_factor_validation():
    b = make_bundle(res=16)
    with pytest.raises(ContractViolation):
        downsample_bundle(b, 0)
    with pytest.raises(ContractViolation):
        downsample_bundle(b, 1.5)
    assert downsample_bundle(b, 1) is b


def test_downsample_requires_divisible_size():
    rng = np.random.default_rng(0)
    cam = look_at_camera((0.0, -0.4, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                         focal=30.0, width=15, height=15)
    b = CaptureBundle(
        cameras=[cam], images=[rng.uniform(0, 1, (15, 15, 3))],
        masks=[[np.zeros((15, 15), np.uint8)]],
        inner=icosphere(1, 0.03), outer=icosphere(1, 0.2),
        bbox=HairBBox([-0.2] * 3, [0.2] * 3))
    with pytest.raises(ContractViolation):
        downsample_bundle(b, 2)


def test_downsample_image_block_mean():
    b = make_bundle(res=16)
    small = downsample_bundle(b, 4)
    img = b.images[0]
    out = small.images[0]
    assert out.shape == (4, 4, 3)
    np.testing.assert_allclose(out[1, 2], img[4:8, 8:12].mean(axis=(0, 1)),
                               atol=1e-12)


def test_downsample_mask_majority_and_tiebreak():
    # one 4x4 view built from four 2x2 blocks with known outcomes
    mask = np.array([
        [1, 0, 1, 1],
        [0, 0, 0, 0],
        [2, 0, 1, 2],
        [0, 2, 1, 2],
    ], dtype=np.uint8)
    cam = look_at_camera((0.0, -0.4, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                         focal=30.0, width=4, height=4)
    b = CaptureBundle(
        cameras=[cam], images=[np.zeros((4, 4, 3))], masks=[[mask]],
        inner=icosphere(1, 0.03), outer=icosphere(1, 0.2),
        bbox=HairBBox([-0.2] * 3, [0.2] * 3))
    out = downsample_bundle(b, 2).masks[0][0]
    # blocks: majority bg; 2-2 hair/bg tie -> hair; 2-2 body/bg tie -> body;
    # 2-2 hair/body tie -> hair
    np.testing.assert_array_equal(out, np.array([[0, 1], [2, 1]],
                                                dtype=np.uint8))


def test_downsample_scales_projection():
    b = make_bundle(res=16)
    small = downsample_bundle(b, 2)
    p = np.array([0.01, -0.02, 0.05])
    for cam, cam2 in zip(b.cameras, small.cameras):
        uv = project_point(cam, p)
        uv2 = project_point(cam2, p)
        np.testing.assert_allclose(uv2, uv / 2.0, atol=1e-12)
        assert cam2.width == cam.width // 2


def test_downsample_scales_parting():
    pts = np.array([[4.0, 6.0], [8.0, 10.0]])
    b = make_bundle(res=16, parting=(0, pts))
    small = downsample_bundle(b, 2)
    np.testing.assert_allclose(small.parting[1], pts / 2.0, atol=1e-12)


def test_scale_camera_keeps_extrinsics():
    b = make_bundle(res=16)
    cam2 = scale_camera(b.cameras[0], 4)
    np.testing.assert_array_equal(cam2.extrinsics, b.cameras[0].extrinsics)
    np.testing.assert_allclose(cam2.intrinsics[2], [0.0, 0.0, 1.0],
                               atol=1e-15)
