"""Cameras, rays, and axis-aligned boxes.

Conventions
-----------
* World and camera coordinates are in meters; pixels are continuous
  with +x right and +y down.
* Extrinsics map world to camera: x_cam = R @ x_world + t.
* Image-plane line angles eta live in (0, pi], measured from the +x
  axis counter-clockwise with +y downward, folded undirectionally
  (eta and eta + pi are the same line; the fold maps 0 to pi).
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ContractViolation, DegenerateDirectionError, SpecParseError
from .histograms import fold_angle

ROT_TOL = 1e-6

MIN_DEPTH = 1e-9


@dataclass
class Camera:
    """Calibrated pinhole camera."""

    intrinsics: np.ndarray   # (3, 3) pixels
    extrinsics: np.ndarray   # (3, 4) world -> camera, meters
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ContractViolation("intrinsics must be 3x3")
        if self.extrinsics.shape != (3, 4):
            raise ContractViolation("extrinsics must be 3x4")
        R = self.extrinsics[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=ROT_TOL):
            raise ContractViolation("extrinsic rotation block is not orthonormal")
        if self.intrinsics[0, 0] <= 0 or self.intrinsics[1, 1] <= 0:
            raise ContractViolation("intrinsics must have positive focal entries")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit view direction (camera +z) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


def project_point(cam: Camera, p) -> np.ndarray:
    """Pinhole projection of a world point to continuous pixels.

    Raises BehindCameraError for points at or behind the camera center.
    """
    pc = cam.world_to_camera(np.asarray(p, dtype=np.float64))
    if pc[2] <= MIN_DEPTH:
        raise BehindCameraError("point at or behind camera")
    uvw = cam.intrinsics @ pc
    return uvw[:2] / uvw[2]


def project_points(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (n,2), depths (n,)).

    Points at or behind the camera get NaN pixels instead of raising;
    callers filter on depth.
    """
    pc = cam.world_to_camera(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = pc @ cam.intrinsics.T
        pix = uvw[:, :2] / uvw[:, 2:3]
    pix[z <= MIN_DEPTH] = np.nan
    return pix, z


def project_direction(cam: Camera, d) -> float:
    """Image-plane line angle of a 3D direction, in (0, pi].

    Rotation-only (locally orthographic): the direction is rotated into
    the camera frame, the depth component dropped, and the remaining 2D
    direction folded into an undirectional angle.
    """
    dc = cam.rotation @ np.asarray(d, dtype=np.float64)
    m = np.hypot(dc[0], dc[1])
    if m < 1e-9:
        raise DegenerateDirectionError("direction parallel to optical axis")
    return float(fold_angle(np.arctan2(dc[1], dc[0])))


def camera_ray(cam: Camera, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through continuous pixel (u, v).

    Returns (origin, unit direction); origin is the camera center.
    """
    dc = np.linalg.solve(cam.intrinsics, np.array([u, v, 1.0]))
    dw = cam.rotation.T @ dc
    return cam.center, dw / np.linalg.norm(dw)


def camera_rays(cam: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized camera_ray for an (n, 2) array of pixel coordinates."""
    pix = np.asarray(pixels, dtype=np.float64)
    homo = np.concatenate([pix, np.ones((pix.shape[0], 1))], axis=1)
    dc = np.linalg.solve(cam.intrinsics, homo.T).T
    dw = dc @ cam.rotation
    dw /= np.linalg.norm(dw, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, dw.shape).copy()
    return origins, dw


@dataclass
class HairBBox:
    """Axis-aligned bounding box, min strictly below max componentwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ContractViolation("box corners must be 3-vectors")
        if not np.all(self.lo < self.hi):
            raise ContractViolation("box min must be strictly below max")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def padded(self, margin: float) -> "HairBBox":
        return HairBBox(self.lo - margin, self.hi + margin)


def ray_box_clip(origin, direction, box: HairBBox):
    """Slab-method ray/box intersection.

    Returns (t_near, t_far) with 0 <= t_near <= t_far, or None on miss.
    Origins inside the box clamp t_near to 0. The interval behind the
    origin (t_far < 0) counts as a miss.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if np.all(d == 0):
        raise ContractViolation("ray direction must be nonzero")
    t_near, t_far = 0.0, np.inf
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < box.lo[k] or o[k] > box.hi[k]:
                return None
            continue
        t0 = (box.lo[k] - o[k]) / d[k]
        t1 = (box.hi[k] - o[k]) / d[k]
        if t0 > t1:
            t0, t1 = t1, t0
        t_near = max(t_near, t0)
        t_far = min(t_far, t1)
        if t_near > t_far:
            return None
    return t_near, t_far


def read_cameras(path) -> list[Camera]:
    """Parse the plain-text camera file.

    The file is a whitespace-separated token stream; each camera block
    is 23 numbers: 9 intrinsics row-major, 12 extrinsics row-major,
    width, height.
    """
    with open(path, "r") as fh:
        tokens = fh.read().split()
    if len(tokens) == 0 or len(tokens) % 23 != 0:
        raise SpecParseError(f"camera file has {len(tokens)} tokens, expected a multiple of 23")
    vals = np.array([float(t) for t in tokens], dtype=np.float64).reshape(-1, 23)
    cams = []
    for row in vals:
        cams.append(Camera(
            intrinsics=row[0:9].reshape(3, 3),
            extrinsics=row[9:21].reshape(3, 4),
            width=int(round(row[21])),
            height=int(round(row[22])),
        ))
    return cams


def write_cameras(path, cameras: list[Camera]) -> None:
    lines = []
    for cam in cameras:
        lines.append(" ".join(repr(float(v)) for v in cam.intrinsics.ravel()))
        lines.append(" ".join(repr(float(v)) for v in cam.extrinsics.ravel()))
        lines.append(f"{cam.width} {cam.height}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def look_at_camera(eye, target, up, focal: float, width: int, height: int) -> Camera:
    """Build a camera at `eye` looking toward `target`.

    Principal point at the image center; `up` fixes the roll (image +y
    points away from up, since pixel y runs downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ContractViolation("eye and target coincide")
    z = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(-upv, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ContractViolation("up vector parallel to view direction")
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=0)
    t = -R @ eye
    K = np.array([[focal, 0.0, width / 2.0],
                  [0.0, focal, height / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(K, np.concatenate([R, t[:, None]], axis=1), width, height)
