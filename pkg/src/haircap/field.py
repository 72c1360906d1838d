"""Explicit volumetric hair field and its sampling machinery.

The field stores per-node density sigma in [0, 1], hair/body
occupancies rho_h/rho_b in [0, 1], undirectional orientation angles
(theta, phi) in (0, pi]^2, and rgb radiance in [0, 1]^3, on a regular
lattice spanning the hair bounding box. Stored sigma is unitless; ray
sampling converts it to a metric extinction by dividing by the voxel
edge length, so alpha = 1 - exp(-sigma_metric * dt) saturates at
roughly one voxel's worth of travel.

Orientation angles are undirectional: interpolation runs on the
doubled-angle circle per axis (atan2 of weighted sin/cos of 2*angle),
which respects the pi-periodicity — averaging 0.1 and pi - 0.1 lands
near the 0/pi boundary, not at pi/2.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, SpecParseError
from .geometry import HairBBox
from .histograms import fold_angle

HFLD_MAGIC = b"HFLD"

DEFAULT_RESOLUTION = 128


@dataclass
class HairField:
    box: HairBBox
    sigma: np.ndarray      # (nx, ny, nz) in [0, 1]
    rho_h: np.ndarray
    rho_b: np.ndarray
    theta: np.ndarray      # (0, pi]
    phi: np.ndarray        # (0, pi]
    radiance: np.ndarray   # (nx, ny, nz, 3) in [0, 1]

    def __post_init__(self):
        shp = self.sigma.shape
        for name in ("rho_h", "rho_b", "theta", "phi"):
            if getattr(self, name).shape != shp:
                raise ContractViolation(f"field array {name} shape mismatch")
        if self.radiance.shape != shp + (3,):
            raise ContractViolation("radiance shape mismatch")

    @property
    def shape(self) -> tuple:
        return self.sigma.shape

    @property
    def spacing(self) -> np.ndarray:
        n = np.array(self.shape, dtype=np.float64)
        return self.box.extent / (n - 1)

    @property
    def voxel_edge(self) -> float:
        """Mean lattice spacing; the unit that scales stored sigma."""
        return float(self.spacing.mean())

    @classmethod
    def create(cls, box: HairBBox, resolution=DEFAULT_RESOLUTION) -> "HairField":
        if np.isscalar(resolution):
            shape = (int(resolution),) * 3
        else:
            shape = tuple(int(r) for r in resolution)
        if min(shape) < 2:
            raise ContractViolation("field needs at least 2 nodes per axis")
        return cls(
            box=box,
            sigma=np.full(shape, 0.05),
            rho_h=np.full(shape, 0.5),
            rho_b=np.full(shape, 0.5),
            theta=np.full(shape, np.pi / 2),
            phi=np.full(shape, np.pi / 2),
            radiance=np.full(shape + (3,), 0.5),
        )

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.box.lo[k], self.box.hi[k], self.shape[k])
                for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def clamp(self) -> None:
        """Project all parameters back into their valid ranges in place."""
        np.clip(self.sigma, 0.0, 1.0, out=self.sigma)
        np.clip(self.rho_h, 0.0, 1.0, out=self.rho_h)
        np.clip(self.rho_b, 0.0, 1.0, out=self.rho_b)
        np.clip(self.radiance, 0.0, 1.0, out=self.radiance)
        self.theta[:] = fold_angle(self.theta)
        self.phi[:] = fold_angle(self.phi)


def angles_to_direction(theta, phi) -> np.ndarray:
    """Unit vector for polar angles: z-polar theta, azimuth phi."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def direction_to_angles(d) -> tuple[np.ndarray, np.ndarray]:
    """Angles in (0, pi]^2 for an undirectional 3D direction.

    The sign of d is chosen so the azimuth lands in (0, pi]; directions
    along +-z (azimuth undefined) get theta = pi, phi = pi.
    """
    v = np.asarray(d, dtype=np.float64)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    phi = np.arctan2(v[:, 1], v[:, 0])
    flip = (phi <= 0) | (phi > np.pi)
    v = np.where(flip[:, None], -v, v)
    phi = np.where(flip, np.arctan2(v[:, 1], v[:, 0]), phi)
    theta = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
    axial = np.hypot(v[:, 0], v[:, 1]) < 1e-12
    theta = np.where(axial, np.pi, theta)
    phi = np.where(axial, np.pi, fold_angle(phi))
    theta = fold_angle(theta)
    if single:
        return float(theta[0]), float(phi[0])
    return theta, phi


def trilinear_setup(field: HairField, points: np.ndarray):
    """Corner indices and weights for trilinear interpolation.

    Returns (flat corner indices (n, 8), weights (n, 8), inside mask).
    Outside points get all-zero weights.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = field.box.contains(p)
    u = (p - field.box.lo) / field.spacing
    shape = np.array(field.shape)
    u = np.clip(u, 0.0, shape - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), shape - 2)
    f = u - i0
    strides = np.array([field.shape[1] * field.shape[2], field.shape[2], 1])
    base = i0 @ strides
    offsets = np.array([dx * strides[0] + dy * strides[1] + dz
                        for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
    idx = base[:, None] + offsets[None, :]
    wx = np.stack([1 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1 - f[:, 2], f[:, 2]], axis=1)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    w = np.where(inside[:, None], w, 0.0)
    return idx, w, inside


def interp_scalar(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("nc,nc->n", values.reshape(-1)[idx], w)


def interp_vector(values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    flat = values.reshape(-1, values.shape[-1])
    return np.einsum("ncj,nc->nj", flat[idx], w)


def interp_angle(angles: np.ndarray, idx: np.ndarray, w: np.ndarray,
                 return_uv: bool = False):
    """Doubled-angle trilinear interpolation into (0, pi]."""
    a2 = 2.0 * angles.reshape(-1)[idx]
    u = np.einsum("nc,nc->n", np.cos(a2), w)
    v = np.einsum("nc,nc->n", np.sin(a2), w)
    out = fold_angle(0.5 * np.arctan2(v, u))
    if return_uv:
        return out, u, v
    return out


def query_field(field: HairField, p):
    """Field values at point(s) p: (sigma, rho_h, rho_b, g).

    sigma is in stored [0, 1] units; g is the unit orientation vector.
    Points outside the box return zeros for everything.
    """
    single = np.asarray(p).ndim == 1
    idx, w, inside = trilinear_setup(field, p)
    sigma = interp_scalar(field.sigma, idx, w)
    rho_h = interp_scalar(field.rho_h, idx, w)
    rho_b = interp_scalar(field.rho_b, idx, w)
    theta = interp_angle(field.theta, idx, w)
    phi = interp_angle(field.phi, idx, w)
    g = angles_to_direction(theta, phi)
    g = np.where(inside[:, None], g, 0.0)
    if single:
        return float(sigma[0]), float(rho_h[0]), float(rho_b[0]), g[0]
    return sigma, rho_h, rho_b, g


@dataclass
class RaySampleSet:
    """Stratified samples along a batch of rays clipped to the field box.

    Depth arrays are strictly increasing per ray; dt is the constant
    sample spacing of each ray. Corner indices/weights cache the
    trilinear stencil of every sample point.
    """

    origins: np.ndarray    # (R, 3)
    dirs: np.ndarray       # (R, 3) unit
    t: np.ndarray          # (R, S) strictly increasing
    dt: np.ndarray         # (R,)
    idx: np.ndarray        # (R, S, 8)
    w: np.ndarray          # (R, S, 8)

    def __post_init__(self):
        if np.any(np.diff(self.t, axis=1) <= 0):
            raise ContractViolation("ray sample depths must be strictly increasing")

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    def positions(self) -> np.ndarray:
        return self.origins[:, None, :] + self.t[:, :, None] * self.dirs[:, None, :]


def clip_rays_to_box(origins: np.ndarray, dirs: np.ndarray, box: HairBBox):
    """Vectorized slab clip; returns (t_near, t_far, hit mask)."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (box.lo - o) / d
        t1 = (box.hi - o) / d
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays: interval is everything or nothing
    par = d == 0
    inside_slab = (o >= box.lo) & (o <= box.hi)
    lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = t_near < t_far
    return t_near, t_far, hit


def sample_rays(field: HairField, origins: np.ndarray, dirs: np.ndarray,
                n_samples: int = 64, rng: np.random.Generator = None) -> tuple:
    """Build a RaySampleSet for the rays that hit the field box.

    Samples are stratified: midpoints when rng is None, jittered within
    each stratum otherwise. Returns (samples, hit mask); rays that miss
    the box are dropped from the sample set.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near, t_far, hit = clip_rays_to_box(origins, dirs, field.box)
    o, d = origins[hit], dirs[hit]
    tn, tf = t_near[hit], t_far[hit]
    r = len(o)
    span = (tf - tn) / n_samples
    if rng is None:
        offs = np.full((r, n_samples), 0.5)
    else:
        offs = rng.uniform(size=(r, n_samples))
    t = tn[:, None] + (np.arange(n_samples)[None, :] + offs) * span[:, None]
    pos = o[:, None, :] + t[:, :, None] * d[:, None, :]
    idx, w, _ = trilinear_setup(field, pos.reshape(-1, 3))
    samples = RaySampleSet(
        origins=o, dirs=d, t=t, dt=span,
        idx=idx.reshape(r, n_samples, 8),
        w=w.reshape(r, n_samples, 8),
    )
    return samples, hit


def save_field(path, field: HairField) -> None:
    """HFLD checkpoint: magic, u32 dims, 6 f32 box corners, then per-node
    (sigma, rho_h, rho_b, theta, phi, r, g, b) float32 LE in C order."""
    nx, ny, nz = field.shape
    rec = np.empty((nx, ny, nz, 8), dtype="<f4")
    rec[..., 0] = field.sigma
    rec[..., 1] = field.rho_h
    rec[..., 2] = field.rho_b
    rec[..., 3] = field.theta
    rec[..., 4] = field.phi
    rec[..., 5:8] = field.radiance
    with open(path, "wb") as fh:
        fh.write(HFLD_MAGIC)
        fh.write(struct.pack("<III", nx, ny, nz))
        fh.write(np.concatenate([field.box.lo, field.box.hi]).astype("<f4").tobytes())
        fh.write(rec.tobytes())


def load_field(path) -> HairField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HFLD_MAGIC:
        raise SpecParseError(f"{path}: bad magic, not a field checkpoint")
    nx, ny, nz = struct.unpack_from("<III", data, 4)
    corners = np.frombuffer(data, dtype="<f4", count=6, offset=16).astype(np.float64)
    expect = 40 + nx * ny * nz * 8 * 4
    if len(data) != expect:
        raise SpecParseError(f"{path}: field checkpoint size mismatch")
    rec = np.frombuffer(data, dtype="<f4", offset=40).reshape(nx, ny, nz, 8).astype(np.float64)
    field = HairField(
        box=HairBBox(corners[:3], corners[3:]),
        sigma=rec[..., 0].copy(), rho_h=rec[..., 1].copy(), rho_b=rec[..., 2].copy(),
        theta=rec[..., 3].copy(), phi=rec[..., 4].copy(),
        radiance=rec[..., 5:8].copy(),
    )
    # float32 round-trip can leave angles a hair outside (0, pi]
    field.theta[:] = fold_angle(field.theta)
    field.phi[:] = fold_angle(field.phi)
    return field
