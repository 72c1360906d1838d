"""Capture-bundle container and on-disk layout.

A bundle directory holds everything one capture needs:

    images/view_000.png ...   linear-ish RGB frames
    masks/view_000.png ...    primary label maps (0 bg, 1 hair, 2 body)
    masks/<src>/view_*.png    optional extra segmentation sources
    cameras.txt               calibrated cameras, one block per view
    inner.obj / outer.obj     bald head surface and dilated outer bound
    bbox.txt                  loose hair bounding box (6 floats)
    parting.txt               optional 2D parting polyline (view id + points)
    gt.hair                   optional ground-truth strands (synthetic only)
"""

import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ContractViolation, SpecParseError
from .fieldopt import ViewData
from .geometry import Camera, HairBBox, read_cameras, write_cameras
from .mesh import TriMesh, read_obj, write_obj
from .pngio import read_image, read_mask, write_image, write_mask

_VIEW_FMT = "view_{:03d}.png"
# majority tie-break priority when downsampling label blocks: thin hair
# lines survive ties against background, body beats background
_LABEL_PRIORITY = (0.0, 0.4, 0.2)


@dataclass
class CaptureBundle:
    """In-memory capture: cameras, frames, masks, meshes, bbox."""

    cameras: list
    images: list
    masks: list  # per view: list of label maps, first = primary
    inner: TriMesh
    outer: TriMesh
    bbox: HairBBox
    parting: Optional[tuple] = None  # (view index, (n, 2) pixel polyline)

    def __post_init__(self):
        n = len(self.cameras)
        if not (len(self.images) == len(self.masks) == n):
            raise ContractViolation("cameras, images and masks must align")
        if n == 0:
            raise ContractViolation("a bundle needs at least one view")
        for cam, img, srcs in zip(self.cameras, self.images, self.masks):
            if img.shape[:2] != (cam.height, cam.width):
                raise ContractViolation("image size disagrees with camera")
            if len(srcs) == 0:
                raise ContractViolation("each view needs at least one mask")
            for m in srcs:
                if m.shape != img.shape[:2]:
                    raise ContractViolation("mask size disagrees with image")
        if self.parting is not None:
            vid, pts = self.parting
            if not (0 <= int(vid) < n):
                raise ContractViolation("parting view index out of range")
            if np.asarray(pts).ndim != 2 or np.asarray(pts).shape[1] != 2:
                raise ContractViolation("parting polyline must be (n, 2)")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def view(self, i: int) -> ViewData:
        return ViewData(self.cameras[i], self.images[i], self.masks[i])

    def views(self) -> list:
        return [self.view(i) for i in range(self.n_views)]


def write_bbox(path, box: HairBBox) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(f"{x:.9g}" for x in np.concatenate([box.lo, box.hi])))
        fh.write("\n")


def read_bbox(path) -> HairBBox:
    vals = np.loadtxt(path).ravel()
    if vals.size != 6:
        raise SpecParseError(f"{path}: bounding box needs 6 values")
    return HairBBox(vals[:3], vals[3:])


def write_parting(path, view_index: int, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{int(view_index)}\n")
        for u, v in pts:
            fh.write(f"{u:.6f} {v:.6f}\n")


def read_parting(path) -> tuple:
    with open(path) as fh:
        tokens = fh.read().split()
    if len(tokens) < 3 or (len(tokens) - 1) % 2:
        raise SpecParseError(f"{path}: expected a view id and (u, v) pairs")
    vid = int(tokens[0])
    pts = np.array(tokens[1:], dtype=np.float64).reshape(-1, 2)
    return vid, pts


def save_bundle(path, bundle: CaptureBundle) -> None:
    """Write the bundle directory layout (creates directories)."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "masks"), exist_ok=True)
    write_cameras(os.path.join(path, "cameras.txt"), bundle.cameras)
    n_sources = len(bundle.masks[0])
    for i in range(bundle.n_views):
        write_image(os.path.join(path, "images", _VIEW_FMT.format(i)),
                    bundle.images[i])
        write_mask(os.path.join(path, "masks", _VIEW_FMT.format(i)),
                   bundle.masks[i][0])
        for s in range(1, n_sources):
            sdir = os.path.join(path, "masks", f"src{s}")
            os.makedirs(sdir, exist_ok=True)
            write_mask(os.path.join(sdir, _VIEW_FMT.format(i)),
                       bundle.masks[i][s])
    write_obj(os.path.join(path, "inner.obj"), bundle.inner)
    write_obj(os.path.join(path, "outer.obj"), bundle.outer)
    write_bbox(os.path.join(path, "bbox.txt"), bundle.bbox)
    if bundle.parting is not None:
        write_parting(os.path.join(path, "parting.txt"), *bundle.parting)


def load_bundle(path) -> CaptureBundle:
    """Read a bundle directory written by save_bundle (or compatible)."""
    cam_path = os.path.join(path, "cameras.txt")
    if not os.path.exists(cam_path):
        raise SpecParseError(f"{path}: not a capture bundle (no cameras.txt)")
    cameras = read_cameras(cam_path)
    mask_root = os.path.join(path, "masks")
    extra = sorted(d for d in os.listdir(mask_root)
                   if os.path.isdir(os.path.join(mask_root, d)))
    images, masks = [], []
    for i in range(len(cameras)):
        name = _VIEW_FMT.format(i)
        img_file = os.path.join(path, "images", name)
        msk_file = os.path.join(mask_root, name)
        if not os.path.exists(img_file) or not os.path.exists(msk_file):
            raise SpecParseError(f"{path}: missing image or mask for view {i}")
        images.append(read_image(img_file))
        srcs = [read_mask(msk_file)]
        for d in extra:
            srcs.append(read_mask(os.path.join(mask_root, d, name)))
        masks.append(srcs)
    parting = None
    ppath = os.path.join(path, "parting.txt")
    if os.path.exists(ppath):
        parting = read_parting(ppath)
    return CaptureBundle(
        cameras=cameras,
        images=images,
        masks=masks,
        inner=read_obj(os.path.join(path, "inner.obj")),
        outer=read_obj(os.path.join(path, "outer.obj")),
        bbox=read_bbox(os.path.join(path, "bbox.txt")),
        parting=parting,
    )


def _block_mean(img: np.ndarray, f: int) -> np.ndarray:
    h, w = img.shape[:2]
    tail = img.shape[2:]
    return img.reshape(h // f, f, w // f, f, *tail).mean(axis=(1, 3))


def _block_majority(mask: np.ndarray, f: int) -> np.ndarray:
    h, w = mask.shape
    blocks = mask.reshape(h // f, f, w // f, f)
    counts = np.stack([(blocks == k).sum(axis=(1, 3)) for k in range(3)],
                      axis=-1).astype(np.float64)
    counts += np.asarray(_LABEL_PRIORITY)
    return np.argmax(counts, axis=-1).astype(np.uint8)


def scale_camera(cam: Camera, factor: int) -> Camera:
    """Camera for an image area-downsampled by an integer factor.

    With pixel centers at (i + 0.5) the continuous image coordinate just
    divides by the factor, so the intrinsics scale uniformly.
    """
    k = cam.intrinsics.copy()
    k[0, :] /= factor
    k[1, :] /= factor
    return Camera(k, cam.extrinsics, cam.width // factor,
                  cam.height // factor)


def downsample_bundle(bundle: CaptureBundle, factor: int) -> CaptureBundle:
    """Area-downsample all views by an integer factor (working resolution).

    Images use block averaging; label masks use per-block majority with a
    fixed tie-break so one-pixel hair lines don't vanish behind ties.
    """
    if factor < 1 or int(factor) != factor:
        raise ContractViolation("downsampling factor must be a positive int")
    factor = int(factor)
    if factor == 1:
        return bundle
    for img in bundle.images:
        if img.shape[0] % factor or img.shape[1] % factor:
            raise ContractViolation(
                "image size must be divisible by the downsampling factor")
    cameras = [scale_camera(c, factor) for c in bundle.cameras]
    images = [_block_mean(img, factor) for img in bundle.images]
    masks = [[_block_majority(m, factor) for m in srcs]
             for srcs in bundle.masks]
    parting = bundle.parting
    if parting is not None:
        parting = (parting[0], np.asarray(parting[1], dtype=np.float64)
                   / factor)
    return replace(bundle, cameras=cameras, images=images, masks=masks,
                   parting=parting)
