"""Rendering 3D orientation distributions along rays.

Every field sample expands its orientation (theta, phi) into a 64x64
histogram over (0, pi]^2 through a damped inverse-quadratic kernel with
a 3x3 sum of pi-shifted periodic images (handling both periodicity and
the undirectional identification), normalized to unit mass:

    h''(theta, phi) = sum_{i,j in {-1,0,1}}
        1 / (beta * ((theta - tc + i*pi)^2 + (phi - pc + j*pi)^2) + delta)

Sample histograms are alpha-composited along the ray with standard
volume-rendering weights w_k = T_k * alpha_k; the result is left
unnormalized so it carries the accumulated mass sum_k w_k.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .field import HairField, RaySampleSet, angles_to_direction, interp_angle, interp_scalar, interp_vector
from .geometry import Camera
from .histograms import (
    DEFAULT_BINS,
    OrientationHistogram2D,
    OrientationHistogram3D,
    bin_centers,
    bin_index,
    fold_angle,
)

DEGENERATE_BIN = -1

# rotated bin directions closer than this to the optical axis have no
# meaningful image-plane angle and are excluded from projection
AXIS_TOL = 1e-6


@dataclass
class KernelParams:
    beta: float = (64.0 / np.pi) ** 2
    delta: float = 0.01
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.beta <= 0 or self.delta <= 0:
            raise ContractViolation("kernel parameters must be positive")


def kernel_batch(theta_c: np.ndarray, phi_c: np.ndarray, params: KernelParams):
    """Unnormalized kernel tables W for a batch of centers.

    Returns (W, S): W has shape (n, B, B) over (theta-bin, phi-bin) and
    S = W.sum over bins, so the normalized histogram is W / S.
    """
    B = params.bins
    centers = bin_centers(B)
    tc = np.atleast_1d(np.asarray(theta_c, dtype=np.float64))
    pc = np.atleast_1d(np.asarray(phi_c, dtype=np.float64))
    # squared offsets of every bin center to each periodic image
    dth = centers[None, :, None] - tc[:, None, None] + np.array([-np.pi, 0.0, np.pi])
    dph = centers[None, :, None] - pc[:, None, None] + np.array([-np.pi, 0.0, np.pi])
    th2 = params.beta * dth ** 2          # (n, B, 3)
    ph2 = params.beta * dph ** 2
    W = np.zeros((len(tc), B, B))
    for i in range(3):
        for j in range(3):
            W += 1.0 / (th2[:, :, None, i] + ph2[:, None, :, j] + params.delta)
    return W, W.sum(axis=(1, 2))


def kernel_batch_grad(theta_c: np.ndarray, phi_c: np.ndarray, params: KernelParams):
    """Kernel tables with center gradients: (W, S, dW/dtc, dW/dpc)."""
    B = params.bins
    centers = bin_centers(B)
    tc = np.atleast_1d(np.asarray(theta_c, dtype=np.float64))
    pc = np.atleast_1d(np.asarray(phi_c, dtype=np.float64))
    dth = centers[None, :, None] - tc[:, None, None] + np.array([-np.pi, 0.0, np.pi])
    dph = centers[None, :, None] - pc[:, None, None] + np.array([-np.pi, 0.0, np.pi])
    n = len(tc)
    W = np.zeros((n, B, B))
    dWt = np.zeros((n, B, B))
    dWp = np.zeros((n, B, B))
    for i in range(3):
        for j in range(3):
            denom = params.beta * dth[:, :, None, i] ** 2 \
                + params.beta * dph[:, None, :, j] ** 2 + params.delta
            inv = 1.0 / denom
            W += inv
            inv2 = inv * inv
            # d/dtc of (th - tc + i*pi)^2 is -2*(th - tc + i*pi)
            dWt += (2.0 * params.beta) * dth[:, :, None, i] * inv2
            dWp += (2.0 * params.beta) * dph[:, None, :, j] * inv2
    return W, W.sum(axis=(1, 2)), dWt, dWp


def expand_kernel(center, params: KernelParams = None) -> OrientationHistogram3D:
    """Normalized kernel histogram for a single (theta, phi) center."""
    params = params or KernelParams()
    tc, pc = center
    if not (np.isfinite(tc) and np.isfinite(pc)):
        raise ContractViolation("kernel center must be finite")
    W, S = kernel_batch([tc], [pc], params)
    return OrientationHistogram3D(W[0] / S[0], normalized=True)


def compositing_weights(sigma_metric: np.ndarray, dt: np.ndarray):
    """Volume-rendering weights for (R, S) metric densities.

    Returns (alpha, T, w) with alpha_k = 1 - exp(-sigma_k * dt),
    T_k = prod_{j<k} (1 - alpha_j), w_k = T_k * alpha_k.
    """
    alpha = 1.0 - np.exp(-sigma_metric * dt[:, None])
    one_minus = 1.0 - alpha
    T = np.cumprod(np.concatenate([np.ones_like(alpha[:, :1]), one_minus[:, :-1]], axis=1), axis=1)
    return alpha, T, T * alpha


def field_samples(field: HairField, samples: RaySampleSet):
    """Interpolated per-sample field values for a sample set.

    Returns dict with sigma (stored units), metric sigma, rho_h, rho_b,
    theta, phi, rgb — all shaped (R, S) (+3 for rgb).
    """
    R, S = samples.t.shape
    idx = samples.idx.reshape(-1, 8)
    w = samples.w.reshape(-1, 8)
    sig = interp_scalar(field.sigma, idx, w).reshape(R, S)
    out = {
        "sigma": sig,
        "sigma_metric": sig / field.voxel_edge,
        "rho_h": interp_scalar(field.rho_h, idx, w).reshape(R, S),
        "rho_b": interp_scalar(field.rho_b, idx, w).reshape(R, S),
        "theta": interp_angle(field.theta, idx, w).reshape(R, S),
        "phi": interp_angle(field.phi, idx, w).reshape(R, S),
        "rgb": interp_vector(field.radiance, idx, w).reshape(R, S, 3),
    }
    return out


def render_ray_distribution(field: HairField, samples: RaySampleSet,
                            ray: int = 0,
                            params: KernelParams = None) -> OrientationHistogram3D:
    """Accumulated (unnormalized) 3D orientation histogram of one ray."""
    params = params or KernelParams()
    if not 0 <= ray < samples.n_rays:
        raise ContractViolation(f"ray index {ray} out of range")
    sub = RaySampleSet(
        origins=samples.origins[ray:ray + 1], dirs=samples.dirs[ray:ray + 1],
        t=samples.t[ray:ray + 1], dt=samples.dt[ray:ray + 1],
        idx=samples.idx[ray:ray + 1], w=samples.w[ray:ray + 1])
    G = render_distribution_batch(field, sub, params)[0]
    return OrientationHistogram3D(G, normalized=False)


def render_distribution_batch(field: HairField, samples: RaySampleSet,
                              params: KernelParams = None) -> np.ndarray:
    """(R, B, B) accumulated histograms; fused accumulation per sample."""
    params = params or KernelParams()
    vals = field_samples(field, samples)
    _, _, w = compositing_weights(vals["sigma_metric"], samples.dt)
    R, S = samples.t.shape
    W, Ws = kernel_batch(vals["theta"].ravel(), vals["phi"].ravel(), params)
    h = W / Ws[:, None, None]
    return np.einsum("rs,rsab->rab", w, h.reshape(R, S, params.bins, params.bins))


def build_projection_table(cam: Camera, params: KernelParams = None) -> np.ndarray:
    """Map each 3D bin (theta, phi) to its 2D eta bin under the camera.

    Rotation-only projection of the bin-center direction; bins within
    AXIS_TOL of the optical axis get DEGENERATE_BIN.
    """
    params = params or KernelParams()
    B = params.bins
    centers = bin_centers(B)
    th, ph = np.meshgrid(centers, centers, indexing="ij")
    dirs = angles_to_direction(th.ravel(), ph.ravel())
    dc = dirs @ cam.rotation.T
    m = np.hypot(dc[:, 0], dc[:, 1])
    eta = fold_angle(np.arctan2(dc[:, 1], dc[:, 0]))
    table = bin_index(eta, B).astype(np.int64)
    table[m < AXIS_TOL] = DEGENERATE_BIN
    return table.reshape(B, B)


def project_distribution(h3: OrientationHistogram3D, projection,
                         ray_direction=None) -> OrientationHistogram2D:
    """Project a 3D orientation histogram to the image-plane angle bins.

    `projection` is either a Camera or a precomputed table from
    build_projection_table. Each eta bin takes the MAXIMUM over its
    preimage 3D bins (empty preimages give 0), then the result is
    normalized. The projection is rotation-only per camera, so
    `ray_direction` does not enter the mapping; the argument is accepted
    for signature compatibility.
    """
    if isinstance(projection, Camera):
        table = build_projection_table(projection, KernelParams(bins=h3.n_bins))
    else:
        table = np.asarray(projection)
    B = h3.n_bins
    flat = h3.bins.ravel()
    tbl = table.ravel()
    valid = tbl != DEGENERATE_BIN
    out = np.zeros(B)
    np.maximum.at(out, tbl[valid], flat[valid])
    total = out.sum()
    if total <= 0:
        return OrientationHistogram2D(np.full(B, 1.0 / B), normalized=True)
    return OrientationHistogram2D(out / total, normalized=True)


def orientation_loss(rendered: OrientationHistogram2D,
                     reference: OrientationHistogram2D) -> float:
    """Mean squared bin-wise difference of two normalized histograms."""
    if not (rendered.normalized and reference.normalized):
        raise ContractViolation("orientation_loss requires normalized histograms")
    d = rendered.bins - reference.bins
    return float(np.mean(d * d))


def render_occupancy(field: HairField, samples: RaySampleSet, ray: int = 0):
    """Composited (psi_h, psi_b, rgb, total alpha) for one ray of the set."""
    if not 0 <= ray < samples.n_rays:
        raise ContractViolation(f"ray index {ray} out of range")
    psi_h, psi_b, rgb, acc = render_occupancy_batch(field, samples)
    return float(psi_h[ray]), float(psi_b[ray]), rgb[ray], float(acc[ray])


def render_occupancy_batch(field: HairField, samples: RaySampleSet):
    vals = field_samples(field, samples)
    _, _, w = compositing_weights(vals["sigma_metric"], samples.dt)
    psi_h = (w * vals["rho_h"]).sum(axis=1)
    psi_b = (w * vals["rho_b"]).sum(axis=1)
    rgb = (w[:, :, None] * vals["rgb"]).sum(axis=1)
    return psi_h, psi_b, rgb, w.sum(axis=1)


def occupancy_loss(pred: tuple, refs: list) -> float:
    """Per-ray min-over-sources squared error, averaged over rays.

    pred is (psi_h, psi_b) arrays; refs is a list of (ref_h, ref_b)
    pairs, one per pseudo-ground-truth source.
    """
    if len(refs) == 0:
        raise ContractViolation("occupancy_loss needs at least one reference source")
    psi_h = np.atleast_1d(np.asarray(pred[0], dtype=np.float64))
    psi_b = np.atleast_1d(np.asarray(pred[1], dtype=np.float64))
    eh = np.stack([(psi_h - np.atleast_1d(rh)) ** 2 for rh, _ in refs])
    eb = np.stack([(psi_b - np.atleast_1d(rb)) ** 2 for _, rb in refs])
    return float(eh.min(axis=0).mean() + eb.min(axis=0).mean())
