"""Two-phase optimization of the volumetric hair field.

Phase 1 fits density and radiance to the capture images with a plain
L2 photometric loss (body pixels painted a key color, background
black). Phase 2 freezes density and radiance and fits orientations and
the hair/body occupancy channels against per-pixel 2D orientation
distributions and segmentation maps.

All gradients are analytic; finite differences only appear in tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation, EmptyVolumeError
from .field import (
    HairField,
    RaySampleSet,
    interp_scalar,
    sample_rays,
)
from .geometry import Camera, HairBBox, camera_rays
from .histograms import fold_angle
from .orientrender import (
    DEGENERATE_BIN,
    KernelParams,
    build_projection_table,
    compositing_weights,
    kernel_batch_grad,
)

PHASE2_ORI_WEIGHT = 100.0
PHASE2_OCC_WEIGHT = 0.02
SIGNIFICANT_WEIGHT = 1e-6
_MASS_FLOOR = 1e-12


@dataclass
class ViewData:
    """Supervision for one calibrated view.

    masks is a list of label maps (0 background, 1 hair, 2 body); the
    first entry is the primary segmentation, extra entries act as
    alternative sources for the occupancy loss. orient_hist holds the
    per-pixel normalized 2D orientation distributions (h, w, bins).
    """

    camera: Camera
    image: Optional[np.ndarray]
    masks: Sequence[np.ndarray]
    orient_hist: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.masks) == 0:
            raise ContractViolation("a view needs at least one segmentation mask")
        shape = self.masks[0].shape
        for m in self.masks:
            if m.shape != shape:
                raise ContractViolation("all masks of a view must share a shape")
        if self.image is not None and self.image.shape[:2] != shape:
            raise ContractViolation("image and mask shapes disagree")
        if self.orient_hist is not None and self.orient_hist.shape[:2] != shape:
            raise ContractViolation("orientation map and mask shapes disagree")

    @property
    def label(self) -> np.ndarray:
        return self.masks[0]


@dataclass
class FieldOptConfig:
    resolution: int = 128
    n_samples: int = 64
    phase1_steps: int = 400
    phase2_steps: int = 400
    rays_per_step: int = 2048
    pixels_per_step: int = 16
    chunk_rays: int = 8
    lr_sigma: float = 0.05
    lr_radiance: float = 0.05
    lr_angles: float = 0.02
    lr_rho: float = 0.05
    key_color: tuple = (0.0, 0.85, 0.1)
    keep_phase1_snapshot: bool = False
    debug_dir: Optional[str] = None


class Adam:
    """Adam updates for one parameter array, applied in place."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def photometric_target(view: ViewData, key_color) -> np.ndarray:
    """Reference image: hair keeps its pixels, body is painted the key
    color, background is black."""
    if view.image is None:
        raise ContractViolation("photometric phase needs view images")
    label = view.label
    target = np.zeros(view.image.shape[:2] + (3,))
    hair = label == 1
    target[hair] = view.image[hair][:, :3]
    target[label == 2] = np.asarray(key_color, dtype=np.float64)
    return target


def photometric_loss_and_grad(field: HairField, samples: RaySampleSet,
                              target_rgb: np.ndarray):
    """L2 photometric loss with gradients for sigma and radiance.

    Returns (loss, dsigma, dradiance) where the gradient arrays match
    the field's node grids.
    """
    R, S = samples.t.shape
    target = np.asarray(target_rgb, dtype=np.float64)
    if target.shape != (R, 3):
        raise ContractViolation("target_rgb must be (n_rays, 3)")
    idx = samples.idx.reshape(-1, 8)
    w_tri = samples.w.reshape(-1, 8)
    sig = interp_scalar(field.sigma, idx, w_tri).reshape(R, S)
    rad = field.radiance.reshape(-1, 3)[samples.idx]          # (R, S, 8, 3)
    rgb = np.einsum("rscj,rsc->rsj", rad, samples.w)
    alpha, T, w = compositing_weights(sig / field.voxel_edge, samples.dt)
    color = np.einsum("rs,rsj->rj", w, rgb)

    diff = color - target
    loss = float(np.mean(diff * diff))
    dLdC = 2.0 * diff / (3.0 * R)                             # (R, 3)

    # radiance path: dC/dc_k = w_k
    drad = np.zeros_like(field.radiance).reshape(-1, 3)
    contrib = (w[:, :, None] * dLdC[:, None, :])[:, :, None, :] * samples.w[..., None]
    np.add.at(drad, samples.idx.reshape(-1),
              contrib.reshape(-1, 3))

    # density path: dC/dalpha_k = T_k c_k - suffix_k / (1 - alpha_k)
    wc = w[:, :, None] * rgb                                  # (R, S, 3)
    suffix = np.flip(np.cumsum(np.flip(wc, axis=1), axis=1), axis=1) - wc
    dCda = T[:, :, None] * rgb - suffix / np.maximum(1.0 - alpha, 1e-12)[:, :, None]
    g_alpha = np.einsum("rj,rsj->rs", dLdC, dCda)
    g_sig = g_alpha * samples.dt[:, None] * (1.0 - alpha) / field.voxel_edge
    dsig = np.zeros_like(field.sigma).reshape(-1)
    np.add.at(dsig, samples.idx.reshape(-1),
              (g_sig[:, :, None] * samples.w).reshape(-1))

    return loss, dsig.reshape(field.shape), drad.reshape(field.radiance.shape)


def _preimage_lists(table: np.ndarray, bins: int):
    flat = table.reshape(-1)
    return [np.flatnonzero(flat == e) for e in range(bins)]


def phase2_loss_and_grad(field: HairField, samples: RaySampleSet,
                         table: np.ndarray, ref_hist: Optional[np.ndarray],
                         hair_mask: np.ndarray, occ_refs: Sequence[tuple],
                         params: KernelParams = None, chunk_rays: int = 8):
    """Weighted phase-2 loss with gradients for theta/phi/rho_h/rho_b.

    ref_hist (R, bins) holds the normalized reference 2D distribution of
    each ray flagged in hair_mask (other rows are ignored); occ_refs is
    a list of (ref_h, ref_b) arrays over all R rays, one per
    segmentation source. Density and radiance are treated as constants.
    """
    params = params or KernelParams()
    B = params.bins
    R, S = samples.t.shape
    hair_mask = np.asarray(hair_mask, dtype=bool)
    if hair_mask.shape != (R,):
        raise ContractViolation("hair_mask must be (n_rays,)")
    if len(occ_refs) == 0:
        raise ContractViolation("occupancy loss needs at least one source")

    idx_flat = samples.idx.reshape(-1, 8)
    w_flat = samples.w.reshape(-1, 8)
    sig = interp_scalar(field.sigma, idx_flat, w_flat).reshape(R, S)
    _, _, w_comp = compositing_weights(sig / field.voxel_edge, samples.dt)

    dtheta = np.zeros(field.sigma.size)
    dphi = np.zeros(field.sigma.size)
    drho_h = np.zeros(field.sigma.size)
    drho_b = np.zeros(field.sigma.size)

    # --- occupancy term over all rays -------------------------------
    rho_h_s = interp_scalar(field.rho_h, idx_flat, w_flat).reshape(R, S)
    rho_b_s = interp_scalar(field.rho_b, idx_flat, w_flat).reshape(R, S)
    psi_h = (w_comp * rho_h_s).sum(axis=1)
    psi_b = (w_comp * rho_b_s).sum(axis=1)
    ref_h = np.stack([np.asarray(s[0], dtype=np.float64) for s in occ_refs])
    ref_b = np.stack([np.asarray(s[1], dtype=np.float64) for s in occ_refs])
    err_h = (psi_h[None, :] - ref_h) ** 2
    err_b = (psi_b[None, :] - ref_b) ** 2
    pick_h = err_h.argmin(axis=0)
    pick_b = err_b.argmin(axis=0)
    locc = float((err_h.min(axis=0) + err_b.min(axis=0)).mean())
    cols = np.arange(R)
    dpsi_h = 2.0 * (psi_h - ref_h[pick_h, cols]) * (PHASE2_OCC_WEIGHT / R)
    dpsi_b = 2.0 * (psi_b - ref_b[pick_b, cols]) * (PHASE2_OCC_WEIGHT / R)
    np.add.at(drho_h, samples.idx.reshape(-1),
              (dpsi_h[:, None, None] * w_comp[:, :, None] * samples.w).reshape(-1))
    np.add.at(drho_b, samples.idx.reshape(-1),
              (dpsi_b[:, None, None] * w_comp[:, :, None] * samples.w).reshape(-1))

    # --- orientation term over hair rays ----------------------------
    lori = 0.0
    n_hair = int(hair_mask.sum())
    if n_hair > 0:
        if ref_hist is None:
            raise ContractViolation("hair rays need reference histograms")
        pre = _preimage_lists(np.asarray(table), B)
        th_c = field.theta.reshape(-1)[samples.idx]            # (R, S, 8)
        ph_c = field.phi.reshape(-1)[samples.idx]
        Ut = np.einsum("rsc,rsc->rs", np.cos(2 * th_c), samples.w)
        Vt = np.einsum("rsc,rsc->rs", np.sin(2 * th_c), samples.w)
        Up = np.einsum("rsc,rsc->rs", np.cos(2 * ph_c), samples.w)
        Vp = np.einsum("rsc,rsc->rs", np.sin(2 * ph_c), samples.w)
        theta_s = fold_angle(0.5 * np.arctan2(Vt, Ut))
        phi_s = fold_angle(0.5 * np.arctan2(Vp, Up))

        hair_rows = np.flatnonzero(hair_mask)
        ori_scale = PHASE2_ORI_WEIGHT / (B * n_hair)
        has_pre = np.array([len(p) > 0 for p in pre])
        for lo in range(0, len(hair_rows), chunk_rays):
            rows = hair_rows[lo:lo + chunk_rays]
            nr = len(rows)
            sel = w_comp[rows] > SIGNIFICANT_WEIGHT            # (nr, S)
            ridx, sidx = np.nonzero(sel)
            G = np.zeros((nr, B, B))
            if len(ridx):
                th_k = theta_s[rows][sel]
                ph_k = phi_s[rows][sel]
                wk = w_comp[rows][sel]
                W, Wsum, dWt, dWp = kernel_batch_grad(th_k, ph_k, params)
                np.add.at(G, ridx, (wk / Wsum)[:, None, None] * W)
            Gf = G.reshape(nr, B * B)
            m = np.zeros((nr, B))
            arg = np.zeros((nr, B), dtype=np.int64)
            for e in range(B):
                pb = pre[e]
                if len(pb) == 0:
                    continue
                sub = Gf[:, pb]
                j = sub.argmax(axis=1)
                m[:, e] = sub[np.arange(nr), j]
                arg[:, e] = pb[j]
            M = m.sum(axis=1)
            ok = M > _MASS_FLOOR
            f = np.full((nr, B), 1.0 / B)
            f[ok] = m[ok] / M[ok, None]
            diff = f - ref_hist[rows]
            lori += float((diff * diff).sum()) / (B * n_hair)
            if not len(ridx):
                continue
            dLdf = np.zeros_like(f)
            dLdf[ok] = 2.0 * diff[ok] * ori_scale
            inner = (dLdf * f).sum(axis=1)
            dLdm = np.where(ok[:, None],
                            (dLdf - inner[:, None]) / np.maximum(M, _MASS_FLOOR)[:, None],
                            0.0)
            dLdm[:, ~has_pre] = 0.0   # empty preimages carry no mass
            # pull per-ray selected-bin data down to the samples
            bins_k = arg[ridx]                                 # (ns, B)
            coef_k = dLdm[ridx]                                # (ns, B)
            ns = len(ridx)
            Wf = W.reshape(ns, B * B)
            dWtf = dWt.reshape(ns, B * B)
            dWpf = dWp.reshape(ns, B * B)
            W_sel = np.take_along_axis(Wf, bins_k, axis=1)
            A_t = (coef_k * np.take_along_axis(dWtf, bins_k, axis=1)).sum(axis=1)
            A_p = (coef_k * np.take_along_axis(dWpf, bins_k, axis=1)).sum(axis=1)
            Bq = (coef_k * W_sel).sum(axis=1)
            sum_dWt = dWt.sum(axis=(1, 2))
            sum_dWp = dWp.sum(axis=(1, 2))
            g_th = wk * (A_t / Wsum - Bq * sum_dWt / (Wsum * Wsum))
            g_ph = wk * (A_p / Wsum - Bq * sum_dWp / (Wsum * Wsum))
            # chain through the doubled-angle interpolation
            abs_rows = rows[ridx]
            tri_w = samples.w[abs_rows, sidx]                  # (ns, 8)
            tri_i = samples.idx[abs_rows, sidx]
            den_t = np.maximum(Ut[abs_rows, sidx] ** 2 + Vt[abs_rows, sidx] ** 2, 1e-30)
            den_p = np.maximum(Up[abs_rows, sidx] ** 2 + Vp[abs_rows, sidx] ** 2, 1e-30)
            jac_t = tri_w * (Ut[abs_rows, sidx, None] * np.cos(2 * th_c[abs_rows, sidx])
                             + Vt[abs_rows, sidx, None] * np.sin(2 * th_c[abs_rows, sidx])) \
                / den_t[:, None]
            jac_p = tri_w * (Up[abs_rows, sidx, None] * np.cos(2 * ph_c[abs_rows, sidx])
                             + Vp[abs_rows, sidx, None] * np.sin(2 * ph_c[abs_rows, sidx])) \
                / den_p[:, None]
            np.add.at(dtheta, tri_i.reshape(-1), (g_th[:, None] * jac_t).reshape(-1))
            np.add.at(dphi, tri_i.reshape(-1), (g_ph[:, None] * jac_p).reshape(-1))

    loss = PHASE2_ORI_WEIGHT * lori + PHASE2_OCC_WEIGHT * locc
    return (loss,
            dtheta.reshape(field.shape), dphi.reshape(field.shape),
            drho_h.reshape(field.shape), drho_b.reshape(field.shape))


def _occupancy_refs(view: ViewData, rows, cols):
    refs = []
    for mask in view.masks:
        refs.append(((mask[rows, cols] == 1).astype(np.float64),
                     (mask[rows, cols] == 2).astype(np.float64)))
    return refs


def _pixel_rays(view: ViewData, rows, cols):
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1)
    return camera_rays(view.camera, pixels)


def optimize_field(views: Sequence[ViewData], box: HairBBox,
                   config: FieldOptConfig = None,
                   rng: np.random.Generator = None):
    """Run both optimization phases and return (field, stats).

    stats carries per-step loss histories and, when requested, a deep
    snapshot of the field as it stood between the phases.
    """
    config = config or FieldOptConfig()
    rng = rng or np.random.default_rng(0)
    if len(views) == 0:
        raise ContractViolation("optimize_field needs at least one view")
    field = HairField.create(box, config.resolution)
    params = KernelParams()

    targets = [photometric_target(v, config.key_color) for v in views]
    stats = {"phase1_loss": [], "phase2_loss": [], "phase1_snapshot": None}

    opt_sig = Adam(field.sigma.shape, config.lr_sigma)
    opt_rad = Adam(field.radiance.shape, config.lr_radiance)
    any_hit = False
    for step in range(config.phase1_steps):
        vi = step % len(views)
        view = views[vi]
        h, w = view.label.shape
        flat = rng.integers(0, h * w, size=config.rays_per_step)
        rows, cols = np.divmod(flat, w)
        origins, dirs = _pixel_rays(view, rows, cols)
        samples, hit = sample_rays(field, origins, dirs, config.n_samples, rng=rng)
        if not hit.any():
            if step == 0 and not any_hit:
                raise EmptyVolumeError("no sampled rays intersect the capture volume")
            continue
        any_hit = True
        target_rgb = targets[vi][rows[hit], cols[hit]]
        loss, dsig, drad = photometric_loss_and_grad(field, samples, target_rgb)
        opt_sig.step(field.sigma, dsig)
        opt_rad.step(field.radiance, drad)
        field.clamp()
        stats["phase1_loss"].append(loss)
    if not any_hit and config.phase1_steps > 0:
        raise EmptyVolumeError("no sampled rays intersect the capture volume")

    if config.keep_phase1_snapshot:
        stats["phase1_snapshot"] = HairField(
            box=field.box, sigma=field.sigma.copy(), rho_h=field.rho_h.copy(),
            rho_b=field.rho_b.copy(), theta=field.theta.copy(),
            phi=field.phi.copy(), radiance=field.radiance.copy())

    tables = [build_projection_table(v.camera, params) for v in views]
    opt_th = Adam(field.theta.shape, config.lr_angles)
    opt_ph = Adam(field.phi.shape, config.lr_angles)
    opt_rh = Adam(field.rho_h.shape, config.lr_rho)
    opt_rb = Adam(field.rho_b.shape, config.lr_rho)
    for step in range(config.phase2_steps):
        vi = step % len(views)
        view = views[vi]
        h, w = view.label.shape
        n_pix = config.pixels_per_step
        hair_flat = np.flatnonzero(view.label == 1)
        take = []
        if len(hair_flat):
            take.append(rng.choice(hair_flat, size=max(1, n_pix // 2)))
        take.append(rng.integers(0, h * w, size=max(1, n_pix - n_pix // 2)))
        flat = np.concatenate(take)
        rows, cols = np.divmod(flat, w)
        origins, dirs = _pixel_rays(view, rows, cols)
        samples, hit = sample_rays(field, origins, dirs, config.n_samples, rng=rng)
        if not hit.any():
            continue
        rows, cols = rows[hit], cols[hit]
        hair_rows = view.label[rows, cols] == 1
        if view.orient_hist is not None:
            ref_hist = view.orient_hist[rows, cols]
        else:
            ref_hist = np.full((len(rows), params.bins), 1.0 / params.bins)
            hair_rows = np.zeros(len(rows), dtype=bool)
        occ_refs = _occupancy_refs(view, rows, cols)
        loss, dth, dph, drh, drb = phase2_loss_and_grad(
            field, samples, tables[vi], ref_hist, hair_rows, occ_refs,
            params, config.chunk_rays)
        opt_th.step(field.theta, dth)
        opt_ph.step(field.phi, dph)
        opt_rh.step(field.rho_h, drh)
        opt_rb.step(field.rho_b, drb)
        field.theta[:] = fold_angle(field.theta)
        field.phi[:] = fold_angle(field.phi)
        np.clip(field.rho_h, 0.0, 1.0, out=field.rho_h)
        np.clip(field.rho_b, 0.0, 1.0, out=field.rho_b)
        stats["phase2_loss"].append(loss)

    if config.debug_dir:
        export_debug_views(field, views, config.debug_dir)
    return field, stats


def export_debug_views(field: HairField, views: Sequence[ViewData],
                       out_dir, max_size: int = 128) -> None:
    """Write per-view occupancy and dominant-angle debug images plus an
    OBJ of oriented voxel segments."""
    from .orientrender import render_occupancy_batch
    from .pngio import hsv_to_rgb, write_image

    os.makedirs(out_dir, exist_ok=True)
    for vi, view in enumerate(views):
        h, w = view.label.shape
        stride = max(1, int(np.ceil(max(h, w) / max_size)))
        rows, cols = np.mgrid[0:h:stride, 0:w:stride]
        sh = rows.shape
        origins, dirs = _pixel_rays(view, rows.ravel(), cols.ravel())
        samples, hit = sample_rays(field, origins, dirs, 32)
        psi = np.zeros(rows.size)
        eta_img = np.zeros(rows.size)
        alpha_img = np.zeros(rows.size)
        if hit.any():
            psi_h, _, _, acc = render_occupancy_batch(field, samples)
            psi[hit] = psi_h
            alpha_img[hit] = acc
            # dominant direction: the sample with the largest weight
            vals_idx = samples.idx.reshape(-1, 8)
            vals_w = samples.w.reshape(-1, 8)
            sig = interp_scalar(field.sigma, vals_idx, vals_w)
            sig = sig.reshape(samples.t.shape)
            _, _, w_comp = compositing_weights(sig / field.voxel_edge, samples.dt)
            best = w_comp.argmax(axis=1)
            table = build_projection_table(view.camera)
            from .field import interp_angle
            rr = np.arange(samples.t.shape[0])
            th = interp_angle(field.theta, samples.idx[rr, best], samples.w[rr, best])
            ph = interp_angle(field.phi, samples.idx[rr, best], samples.w[rr, best])
            from .histograms import bin_index
            tb = table[bin_index(th), bin_index(ph)]
            eta = np.where(tb == DEGENERATE_BIN, 0.0, (tb + 0.5) / table.shape[0])
            eta_img[hit] = eta
        write_image(os.path.join(out_dir, f"view{vi:02d}_psi_h.png"),
                    np.clip(psi.reshape(sh), 0, 1))
        rgb_dbg = hsv_to_rgb(eta_img.reshape(sh), np.ones(sh),
                             np.clip(alpha_img.reshape(sh), 0, 1))
        write_image(os.path.join(out_dir, f"view{vi:02d}_angle.png"), rgb_dbg)
    field_to_obj_segments(field, os.path.join(out_dir, "field_segments.obj"))


def field_to_obj_segments(field: HairField, path, sigma_threshold: float = 0.3,
                          stride: int = 2) -> None:
    """Dump oriented short segments for occupied voxels as OBJ lines."""
    from .field import angles_to_direction
    from .strands import Strand, write_obj_polylines

    pos = field.node_positions()[::stride, ::stride, ::stride]
    sig = field.sigma[::stride, ::stride, ::stride]
    th = field.theta[::stride, ::stride, ::stride]
    ph = field.phi[::stride, ::stride, ::stride]
    keep = sig > sigma_threshold
    dirs = angles_to_direction(th[keep], ph[keep])
    p = pos[keep]
    half = 0.4 * field.voxel_edge * stride
    segs = [Strand(np.stack([a - half * d, a + half * d]), root_on_scalp=False)
            for a, d in zip(p, dirs)]
    write_obj_polylines(path, segs)
