"""Differentiable Gaussian splatting.

Every 3D Gaussian is projected to a 2D Gaussian through the camera's
local affine approximation (first-order Jacobian at the center), then
composited front-to-back by center depth with alpha = opacity times
the 2D falloff, cut off at three standard deviations.

The rasterizer is organized around one flat list of (pixel, gaussian)
contribution entries sorted by pixel then depth; transmittances become
segmented cumulative products and the backward pass segmented suffix
sums, so both directions are single vectorized passes with no
per-pixel Python work. The backward pass returns gradients with
respect to Gaussian centers, covariances, colors, and opacities —
including the covariance's dependence on the center through the
projection Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import MIN_DEPTH, Camera

ALPHA_CAP = 0.999
# EWA-style low-pass: every projected Gaussian is dilated by this many
# square pixels so sub-pixel hair cross-sections still cover samples
PIXEL_DILATION = 0.3
CLIP_SIGMA = 3.0
_Q_MAX = CLIP_SIGMA ** 2
_ALPHA_MIN = 1e-8


@dataclass
class Splats:
    """Flat renderer input: one entry per Gaussian."""

    centers: np.ndarray     # (G, 3)
    covs: np.ndarray        # (G, 3, 3)
    colors: np.ndarray      # (G, 3)
    opacities: np.ndarray   # (G,)

    def __post_init__(self):
        g = len(self.centers)
        if (self.covs.shape != (g, 3, 3) or self.colors.shape != (g, 3)
                or self.opacities.shape != (g,)):
            raise ContractViolation("splat arrays disagree on Gaussian count")


def _project(splats: Splats, cam: Camera):
    """Per-Gaussian screen-space quantities.

    Returns a dict of arrays over the visible subset plus the index of
    that subset into the input.
    """
    r = cam.rotation
    xc = splats.centers @ r.T + cam.translation
    vis = np.flatnonzero(xc[:, 2] > MIN_DEPTH)
    xc = xc[vis]
    fx, fy = cam.intrinsics[0, 0], cam.intrinsics[1, 1]
    cx, cy = cam.intrinsics[0, 2], cam.intrinsics[1, 2]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    u = fx * x / z + cx
    v = fy * y / z + cy

    m = np.einsum("ab,gbc,dc->gad", r, splats.covs[vis], r)
    jac = np.zeros((len(vis), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z ** 2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z ** 2
    sig2 = np.einsum("gab,gbc,gdc->gad", jac, m, jac)
    sig2[:, 0, 0] += PIXEL_DILATION
    sig2[:, 1, 1] += PIXEL_DILATION

    a, b, c = sig2[:, 0, 0], sig2[:, 0, 1], sig2[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(sig2)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CLIP_SIGMA * np.sqrt(lam_max)
    return {"vis": vis, "xc": xc, "u": u, "v": v, "m": m, "jac": jac,
            "sig2": sig2, "inv": inv, "radius": radius,
            "fx": fx, "fy": fy}


def _entries(proj, width: int, height: int):
    """Flat (pixel, gaussian) contribution entries within 3 sigma."""
    u, v, radius = proj["u"], proj["v"], proj["radius"]
    x0 = np.clip(np.ceil(u - radius - 0.5).astype(np.int64), 0, width - 1)
    x1 = np.clip(np.floor(u + radius - 0.5).astype(np.int64), -1, width - 1)
    y0 = np.clip(np.ceil(v - radius - 0.5).astype(np.int64), 0, height - 1)
    y1 = np.clip(np.floor(v + radius - 0.5).astype(np.int64), -1, height - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    cnt = nx * ny
    total = int(cnt.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    gl = np.repeat(np.arange(len(u)), cnt)
    start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    off = np.arange(total) - np.repeat(start, cnt)
    nx_r = np.repeat(nx, cnt)
    px = np.repeat(x0, cnt) + off % nx_r
    py = np.repeat(y0, cnt) + off // nx_r
    return gl, px, py


def _alphas(proj, splats, gl, px, py):
    """Alpha and falloff for each entry; entries are kept only inside
    the 3-sigma ellipse and above a negligible-contribution floor."""
    vis = proj["vis"]
    dx = px + 0.5 - proj["u"][gl]
    dy = py + 0.5 - proj["v"][gl]
    inv = proj["inv"][gl]
    q = inv[:, 0, 0] * dx * dx + 2.0 * inv[:, 0, 1] * dx * dy \
        + inv[:, 1, 1] * dy * dy
    keep = q <= _Q_MAX
    gl, px, py, dx, dy, q = gl[keep], px[keep], py[keep], dx[keep], dy[keep], q[keep]
    gauss = np.exp(-0.5 * q)
    alpha = splats.opacities[vis[gl]] * gauss
    capped = alpha > ALPHA_CAP
    alpha = np.minimum(alpha, ALPHA_CAP)
    keep2 = alpha > _ALPHA_MIN
    return (gl[keep2], px[keep2], py[keep2], dx[keep2], dy[keep2],
            gauss[keep2], alpha[keep2], capped[keep2])


def _sorted_entries(proj, splats, width, height):
    gl, px, py = _entries(proj, width, height)
    gl, px, py, dx, dy, gauss, alpha, capped = _alphas(proj, splats, gl, px, py)
    if len(gl) == 0:
        return None
    depth_rank = np.empty(len(proj["u"]), dtype=np.int64)
    depth_rank[np.argsort(proj["xc"][:, 2], kind="stable")] = \
        np.arange(len(proj["u"]))
    pix = py * width + px
    order = np.lexsort((depth_rank[gl], pix))
    return {"gl": gl[order], "pix": pix[order], "dx": dx[order],
            "dy": dy[order], "gauss": gauss[order], "alpha": alpha[order],
            "capped": capped[order]}


def _segment_starts(pix):
    starts = np.zeros(len(pix), dtype=bool)
    starts[0] = True
    starts[1:] = pix[1:] != pix[:-1]
    return starts


def render(splats: Splats, cam: Camera, background=None):
    """Composite the scene into an (H, W, 3) image.

    Returns (image, cache); the cache feeds render_backward.
    """
    width, height = cam.width, cam.height
    bg = np.zeros(3) if background is None else \
        np.asarray(background, dtype=np.float64)
    proj = _project(splats, cam)
    ent = _sorted_entries(proj, splats, width, height)
    image = np.zeros((height * width, 3))
    t_final = np.ones(height * width)
    if ent is not None:
        alpha = ent["alpha"]
        log_t = np.log1p(-alpha)
        cs = np.cumsum(log_t)
        excl = cs - log_t
        starts = _segment_starts(ent["pix"])
        start_idx = np.flatnonzero(starts)
        seg_id = np.cumsum(starts) - 1
        t_before = np.exp(excl - excl[start_idx][seg_id])
        weight = t_before * alpha
        color = splats.colors[proj["vis"][ent["gl"]]]
        np.add.at(image, ent["pix"], weight[:, None] * color)
        ends = np.concatenate([start_idx[1:] - 1, [len(alpha) - 1]])
        t_done = t_before[ends] * (1.0 - alpha[ends])
        t_final[ent["pix"][ends]] = t_done
        cache = {"proj": proj, "ent": ent, "t_before": t_before,
                 "seg_id": seg_id, "start_idx": start_idx, "bg": bg}
    else:
        cache = {"proj": proj, "ent": None, "bg": bg}
    image += t_final[:, None] * bg
    cache["t_final"] = t_final
    return image.reshape(height, width, 3), cache


def render_backward(splats: Splats, cam: Camera, cache, g_image):
    """Gradients of a scalar loss with given per-pixel image gradient.

    Returns dict with g_centers (G,3), g_covs (G,3,3), g_colors (G,3),
    g_opacities (G,).
    """
    g = len(splats.centers)
    out = {"g_centers": np.zeros((g, 3)), "g_covs": np.zeros((g, 3, 3)),
           "g_colors": np.zeros((g, 3)), "g_opacities": np.zeros(g)}
    proj = cache["proj"]
    ent = cache["ent"]
    if ent is None:
        return out
    vis = proj["vis"]
    width = cam.width
    gpix = np.asarray(g_image, dtype=np.float64).reshape(-1, 3)

    alpha = ent["alpha"]
    gl = ent["gl"]
    t_before = cache["t_before"]
    seg_id = cache["seg_id"]
    start_idx = cache["start_idx"]
    color = splats.colors[vis[gl]]
    gpx = gpix[ent["pix"]]

    # suffix color mass behind each entry, within its pixel segment,
    # including the background seen through the final transmittance
    contrib = t_before[:, None] * alpha[:, None] * color
    cs = np.cumsum(contrib, axis=0)
    seg_total = cs[np.concatenate([start_idx[1:] - 1, [len(alpha) - 1]])]
    suffix = seg_total[seg_id] - cs
    suffix += (cache["t_final"][ent["pix"]])[:, None] * cache["bg"]

    g_color_e = gpx * (t_before * alpha)[:, None]
    g_alpha = np.einsum("ec,ec->e", gpx,
                        t_before[:, None] * color
                        - suffix / (1.0 - alpha)[:, None])
    free = ~ent["capped"]
    g_gauss = np.where(free, g_alpha * splats.opacities[vis[gl]], 0.0)
    g_op_e = np.where(free, g_alpha * ent["gauss"], 0.0)
    g_q = -0.5 * ent["gauss"] * g_gauss

    inv = proj["inv"][gl]
    dx, dy = ent["dx"], ent["dy"]
    adx = inv[:, 0, 0] * dx + inv[:, 0, 1] * dy
    ady = inv[:, 0, 1] * dx + inv[:, 1, 1] * dy
    g_u = -2.0 * g_q * adx   # dq/du = -2*(A d)_x, since d = pix - p
    g_v = -2.0 * g_q * ady

    # W = sum g_q * d d^T accumulated per Gaussian, then gSig = -A W A
    nvis = len(proj["u"])
    w_xx = np.bincount(gl, g_q * dx * dx, minlength=nvis)
    w_xy = np.bincount(gl, g_q * dx * dy, minlength=nvis)
    w_yy = np.bincount(gl, g_q * dy * dy, minlength=nvis)
    gu = np.bincount(gl, g_u, minlength=nvis)
    gv = np.bincount(gl, g_v, minlength=nvis)

    np.add.at(out["g_colors"], vis[gl], g_color_e)
    out["g_opacities"][vis] += np.bincount(gl, g_op_e, minlength=nvis)

    w_mat = np.empty((nvis, 2, 2))
    w_mat[:, 0, 0] = w_xx
    w_mat[:, 0, 1] = w_mat[:, 1, 0] = w_xy
    w_mat[:, 1, 1] = w_yy
    a_inv = proj["inv"]
    g_sig2 = -np.einsum("gab,gbc,gcd->gad", a_inv, w_mat, a_inv)

    # covariance path: Sigma2 = J M J^T
    jac = proj["jac"]
    g_m = np.einsum("gba,gbc,gcd->gad", jac, g_sig2, jac)
    r = cam.rotation
    out["g_covs"][vis] = np.einsum("ba,gbc,cd->gad", r, g_m, r)

    # center path: through the exact projection and through J's
    # dependence on the camera-space center
    xc = proj["xc"]
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    fx, fy = proj["fx"], proj["fy"]
    g_xc = np.zeros_like(xc)
    g_xc[:, 0] = gu * fx / z
    g_xc[:, 1] = gv * fy / z
    g_xc[:, 2] = -gu * fx * x / z ** 2 - gv * fy * y / z ** 2

    bmat = np.einsum("gab,gcb->gac", proj["m"], jac)  # M J^T (3,2)
    gs = g_sig2
    g_xc[:, 0] += -2.0 * fx / z ** 2 * (gs[:, 0, 0] * bmat[:, 2, 0]
                                        + gs[:, 0, 1] * bmat[:, 2, 1])
    g_xc[:, 1] += -2.0 * fy / z ** 2 * (gs[:, 1, 0] * bmat[:, 2, 0]
                                        + gs[:, 1, 1] * bmat[:, 2, 1])
    g_xc[:, 2] += 2.0 * (
        gs[:, 0, 0] * (-fx / z ** 2 * bmat[:, 0, 0]
                       + 2.0 * fx * x / z ** 3 * bmat[:, 2, 0])
        + gs[:, 0, 1] * (-fx / z ** 2 * bmat[:, 0, 1]
                         + 2.0 * fx * x / z ** 3 * bmat[:, 2, 1])
        + gs[:, 1, 0] * (-fy / z ** 2 * bmat[:, 1, 0]
                         + 2.0 * fy * y / z ** 3 * bmat[:, 2, 0])
        + gs[:, 1, 1] * (-fy / z ** 2 * bmat[:, 1, 1]
                         + 2.0 * fy * y / z ** 3 * bmat[:, 2, 1]))
    out["g_centers"][vis] = g_xc @ r
    return out


def l2_image_loss(image: np.ndarray, reference: np.ndarray):
    """Summed squared pixel error and its image gradient.

    The sum (rather than mean) normalisation keeps the photometric term
    commensurate with the strand-level regularisers, whose gradients do not
    shrink with image resolution.
    """
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != image.shape:
        raise ContractViolation("reference image shape mismatch")
    diff = image - ref
    loss = float(np.sum(diff ** 2))
    return loss, 2.0 * diff
