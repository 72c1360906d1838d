"""Strand refinement by differentiable chained-Gaussian splatting.

Traced strands become chained-Gaussian strands whose latent geometry and
constrained appearance are optimized against the capture images, with
volumetric guidance, penetration and sparsity regularizers, and an
adaptive split/prune population schedule.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .bundle import CaptureBundle
from .errors import ContractViolation, DivergenceError
from .field import HairField, query_field
from .fieldopt import Adam, photometric_target
from .gaussians import (
    _ANCHOR_M,
    _OPACITY_M,
    N_SEGMENTS,
    PARAM_COUNT,
    BodyGaussians,
    ChainedGaussianStrand,
    backprop_batch,
    build_body,
    expand_batch,
    init_strand,
    orthonormal_completion,
    sigmoid,
)
from .mesh import DistanceGrid, TriMesh, distance_to_mesh
from .pngio import write_image
from .splat import Splats, l2_image_loss, render, render_backward
from .strands import N_K, Strand, resample_strand
from .strandlatent import StrandLatentModel, decode, decode_offsets, encode

_LATENT_COLS = slice(0, 128)
_PRUNE_OPACITY = 0.1
_D65 = (0.95047, 1.0, 1.08883)


@dataclass
class RefineConfig:
    """Schedule, weights and reparameterization ranges for refinement."""

    steps: int = 600
    control_every: int = 200        # split/prune cadence in steps
    max_strands: int = 500          # population budget after each control
    final_split_scale: float = 3.0  # split-score multiplier at the end
    lr_latent: float = 1e-2
    lr_appearance: float = 1e-3
    lr_body: float = 1e-3
    lam_image: float = 1.0
    lam_guidance: float = 1.0
    lam_penetration: float = 0.05
    lam_diameter: float = 1.0       # doubled after each split
    lam_latent: float = 1.0
    lam_body: float = 1000.0
    render_fraction: float = 1.0 / 3.0
    prune_opacity: float = _PRUNE_OPACITY
    init_diameter: float = 4e-4
    init_color: tuple = (0.35, 0.25, 0.18)
    init_opacities: tuple = (0.7, 0.4)
    key_color: tuple = (0.0, 0.85, 0.1)
    background: tuple = (0.0, 0.0, 0.0)
    constrained_appearance: bool = True  # False: free per-segment colors
    seed: int = 0
    render_every: int = 0           # save a render PNG every k steps (0: off)

    def __post_init__(self):
        if self.steps < 1 or self.control_every < 1:
            raise ContractViolation("steps and control cadence must be >= 1")
        if not 0.0 < self.render_fraction <= 1.0:
            raise ContractViolation("render fraction must be in (0, 1]")
        if self.max_strands < 1:
            raise ContractViolation("population budget must be >= 1")
        for name in ("lam_image", "lam_guidance", "lam_penetration",
                     "lam_diameter", "lam_latent", "lam_body"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")


@dataclass
class RefineResult:
    strands: list                   # refined ChainedGaussianStrand set
    body: BodyGaussians
    history: list = dataclass_field(default_factory=list)

    def geometry(self, model: StrandLatentModel) -> list:
        return [decode(model, cs.latent, cs.root) for cs in self.strands]


# ---------------------------------------------------------------------------
# color space


def linear_rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Linear sRGB (D65) to CIELAB, vectorized over leading axes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    m = np.array([[0.4124564, 0.3575761, 0.1804375],
                  [0.2126729, 0.7151522, 0.0721750],
                  [0.0193339, 0.1191920, 0.9503041]])
    xyz = rgb @ m.T / np.asarray(_D65)
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(np.maximum(xyz, 0.0)),
                 xyz / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


# ---------------------------------------------------------------------------
# loss terms (scalar public forms)


def loss_volume_guidance(strand: Strand, field: HairField) -> float:
    """Mean over segments of the undirectional gap between the segment
    direction and the field orientation at the segment midpoint."""
    v = strand.vertices
    delta = v[1:] - v[:-1]
    length = np.linalg.norm(delta, axis=1)
    live = length > 1e-12
    mids = 0.5 * (v[:-1] + v[1:])
    g = query_field(field, mids)[3]
    e = np.zeros_like(delta)
    e[live] = delta[live] / length[live, None]
    gap = np.minimum(np.linalg.norm(e - g, axis=1),
                     np.linalg.norm(e + g, axis=1))
    return float(np.sum(gap[live]) / delta.shape[0])


def loss_penetration(strand: Strand, inner: TriMesh) -> float:
    """Mean squared distance to the surface over vertices inside the
    inner mesh (exact nearest-point distances)."""
    d, _, _ = distance_to_mesh(strand.vertices, inner)
    inside = d < 0.0
    return float(np.sum(d[inside] ** 2) / strand.n_vertices)


def loss_heuristics(obj) -> tuple:
    """(L_d, L_l, L_b) for a chained strand or a body-Gaussian set."""
    if isinstance(obj, ChainedGaussianStrand):
        d_seg = obj.anchor_diameters @ _ANCHOR_M.T
        l_d = float(np.sum(np.abs(d_seg)) / N_SEGMENTS)
        l_l = float(np.sum(np.abs(obj.latent - obj.hat_latent)))
        return l_d, l_l, 0.0
    if isinstance(obj, BodyGaussians):
        l_b = float(np.sum((obj.radii - obj.base_radii) ** 2) / obj.n_body)
        return 0.0, 0.0, l_b
    raise ContractViolation("loss_heuristics expects a strand or a body")


# ---------------------------------------------------------------------------
# batched losses with gradients (the forms the optimizer descends)


def _verts_to_latent_grad(model: StrandLatentModel,
                          g_verts: np.ndarray) -> np.ndarray:
    """Route per-vertex gradients to latents (roots are fixed)."""
    n = g_verts.shape[0]
    g_off = g_verts[:, 1:, :].reshape(n, -1)
    return g_off @ model.jacobian


def guidance_loss_batch(vertices: np.ndarray, field: HairField) -> tuple:
    """Mean volume-guidance loss over a strand batch.

    Returns (scalar mean over strands, gradient w.r.t. vertices). Field
    orientations act as fixed targets: the gradient flows through the
    segment directions only.
    """
    n, k = vertices.shape[:2]
    delta = vertices[:, 1:] - vertices[:, :-1]
    length = np.linalg.norm(delta, axis=2)
    live = length > 1e-12
    safe = np.maximum(length, 1e-30)
    e = delta / safe[..., None]
    mids = 0.5 * (vertices[:, :-1] + vertices[:, 1:])
    g = query_field(field, mids.reshape(-1, 3))[3].reshape(n, k - 1, 3)
    d_minus = np.linalg.norm(e - g, axis=2)
    d_plus = np.linalg.norm(e + g, axis=2)
    sign = np.where(d_minus <= d_plus, 1.0, -1.0)
    r = e - sign[..., None] * g
    gap = np.minimum(d_minus, d_plus)
    value = float(np.mean(np.sum(gap * live, axis=1) / (k - 1)))

    rn = np.maximum(gap, 1e-30)
    dval_de = r / rn[..., None]
    # unit-vector chain: de/ddelta = (I - e e^T) / length
    g_delta = (dval_de - e * np.einsum("nsj,nsj->ns", e,
                                       dval_de)[..., None]) / safe[..., None]
    g_delta *= (live / ((k - 1) * n))[..., None]
    g_verts = np.zeros_like(vertices)
    g_verts[:, :-1] -= g_delta
    g_verts[:, 1:] += g_delta
    return value, g_verts


def penetration_loss_batch(vertices: np.ndarray, grid: DistanceGrid) -> tuple:
    """Mean penetration loss over a strand batch via the distance grid.

    Returns (scalar mean over strands, gradient w.r.t. vertices).
    """
    n, k = vertices.shape[:2]
    flat = vertices.reshape(-1, 3)
    phi = grid.signed(flat)
    inside = phi < 0.0
    value = float(np.sum(phi[inside] ** 2) / (k * n))
    g_flat = np.zeros_like(flat)
    if np.any(inside):
        grad = grid.signed_gradient(flat[inside])
        g_flat[inside] = 2.0 * phi[inside, None] * grad / (k * n)
    return value, g_flat.reshape(n, k, 3)


def _heuristic_losses(params: np.ndarray, hat_latent: np.ndarray) -> tuple:
    """Mean L_d and L_l over a population plus their parameter gradients."""
    n = params.shape[0]
    latent = params[:, _LATENT_COLS]
    diam_raw = params[:, 128:136]
    d_anchor = np.logaddexp(0.0, diam_raw)
    d_seg = d_anchor @ _ANCHOR_M.T
    l_d = float(np.mean(np.sum(np.abs(d_seg), axis=1) / N_SEGMENTS))
    l_l = float(np.mean(np.sum(np.abs(latent - hat_latent), axis=1)))
    g = np.zeros_like(params)
    g[:, _LATENT_COLS] = np.sign(latent - hat_latent) / n
    g_anchor = np.tile(_ANCHOR_M.sum(axis=0) / (N_SEGMENTS * n), (n, 1))
    g[:, 128:136] = g_anchor * sigmoid(diam_raw)
    return l_d, l_l, g


def _body_loss(body: BodyGaussians) -> tuple:
    w = body.radii
    resid = w - body.base_radii
    value = float(np.sum(resid ** 2) / body.n_body)
    g_raw = 2.0 * resid / body.n_body * sigmoid(body.radii_raw)
    return value, g_raw


# ---------------------------------------------------------------------------
# population control


def split_strands(strands: list, model: StrandLatentModel,
                  rng: np.random.Generator, scale: float = 1.0,
                  budget: int = None) -> tuple:
    """Replace each strand by ceil(omega) jittered copies.

    omega_i = w_i / mean(w) * scale with w_i the diameter-opacity mass.
    Children are jittered uniformly within the local radius orthogonally
    to the tangent (roots stay put) and re-encoded to latents. Returns
    (children, parent index per child).

    When ``budget`` is given and the ceil allocation would exceed it, the
    child counts are re-apportioned by largest remainder so that every
    parent keeps at least one child and the total lands exactly on the
    budget (or on the parent count, whichever is larger). Deleting whole
    parents would abandon their image coverage.
    """
    if len(strands) == 0:
        raise ContractViolation("split needs at least one strand")
    n = len(strands)
    what = np.array([split_mass(cs) for cs in strands])
    omega = what / np.mean(what) * scale
    counts = np.ceil(omega).astype(int)
    if budget is not None and counts.sum() > budget:
        target = max(int(budget), n)
        quota = omega / omega.sum() * (target - n)
        counts = 1 + np.floor(quota).astype(int)
        slack = target - counts.sum()
        order = np.argsort(-(quota - np.floor(quota)), kind="stable")
        counts[order[:slack]] += 1
    offsets = decode_offsets(model, np.array([cs.latent for cs in strands]))
    children, parents = [], []
    for i, cs in enumerate(strands):
        verts = np.concatenate([cs.root[None], cs.root[None] + offsets[i]])
        d_seg = cs.anchor_diameters @ _ANCHOR_M.T
        d_vert = np.concatenate([d_seg, d_seg[-1:]])  # local diameter
        for _ in range(counts[i]):
            child_verts = _jitter_vertices(verts, d_vert, rng)
            latent = encode(model, Strand(child_verts, True))
            child = ChainedGaussianStrand(
                root=cs.root.copy(), latent=latent,
                diam_raw=cs.diam_raw.copy(), colors=cs.colors.copy(),
                opac_raw=cs.opac_raw.copy(), hat_latent=latent.copy())
            children.append(child)
            parents.append(i)
    return children, np.array(parents)


def segment_opacities(cs: ChainedGaussianStrand) -> np.ndarray:
    """Per-segment opacity under the body/tip partition."""
    return cs.opacities @ _OPACITY_M.T


def split_mass(cs: ChainedGaussianStrand) -> float:
    """Diameter-opacity mass: sum over segments of d_j * o_j."""
    d_seg = cs.anchor_diameters @ _ANCHOR_M.T
    return float(np.sum(d_seg * segment_opacities(cs)))


def _jitter_vertices(verts: np.ndarray, d_vert: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    tangent = np.gradient(verts, axis=0)
    tl = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = tangent / np.maximum(tl, 1e-30)
    ep, epp = orthonormal_completion(tangent)
    radius = 0.5 * d_vert * np.sqrt(rng.uniform(0.0, 1.0, len(verts)))
    psi = rng.uniform(0.0, 2.0 * np.pi, len(verts))
    offset = radius[:, None] * (np.cos(psi)[:, None] * ep
                                + np.sin(psi)[:, None] * epp)
    offset[0] = 0.0  # roots are never jittered
    return verts + offset


def prune_strands(strands: list, model: StrandLatentModel, background,
                  stats: dict = None, seg_colors: np.ndarray = None,
                  opacity_threshold: float = _PRUNE_OPACITY) -> list:
    """Drop faint and background-colored strands, cut invisible tails.

    A strand dies when its mean opacity falls below the threshold or its
    mean color is CIELAB-closer to the background than to the mean hair
    color. Trailing vertices failing the same tests are cut and the
    survivor is resampled back to the standard vertex count.
    """
    if len(strands) == 0:
        return []
    n = len(strands)
    opac = np.array([segment_opacities(cs) for cs in strands])
    if seg_colors is None:
        seg_colors = np.array([_ANCHOR_M @ cs.colors for cs in strands])
    mean_opac = opac.mean(axis=1)
    mean_color = seg_colors.mean(axis=1)
    hair_mean = linear_rgb_to_lab(mean_color.mean(axis=0))
    bg = linear_rgb_to_lab(np.asarray(background, dtype=np.float64))
    to_hair = np.linalg.norm(linear_rgb_to_lab(mean_color) - hair_mean,
                             axis=1)
    to_bg = np.linalg.norm(linear_rgb_to_lab(mean_color) - bg, axis=1)
    keep = (mean_opac >= opacity_threshold) & (to_hair <= to_bg)

    seg_lab = linear_rgb_to_lab(seg_colors)
    seg_vis = ((opac >= opacity_threshold)
               & (np.linalg.norm(seg_lab - hair_mean, axis=2)
                  <= np.linalg.norm(seg_lab - bg, axis=2)))
    kept, kept_idx, n_cut = [], [], 0
    for i in range(n):
        if not keep[i]:
            continue
        cs = strands[i]
        vis = seg_vis[i]
        last = int(np.max(np.nonzero(vis)[0])) if vis.any() else -1
        if last < 0:
            continue
        if last < N_SEGMENTS - 1:
            # vertex j is carried by segment j-1; keep up to last+1
            verts = np.concatenate(
                [cs.root[None],
                 cs.root[None] + decode_offsets(model, cs.latent[None])[0]])
            cut = resample_strand(Strand(verts[:last + 2], True), N_K)
            cs.latent = encode(model, cut)
            cs.hat_latent = cs.latent.copy()
            n_cut += 1
        kept.append(cs)
        kept_idx.append(i)
    if stats is not None:
        stats["removed"] = n - len(kept)
        stats["cut"] = n_cut
        stats["kept_indices"] = np.array(kept_idx, dtype=int)
    if not kept:
        warnings.warn("pruning removed every strand")
    return kept


def _subsample_indices(n: int, fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n)
    count = max(1, int(round(n * fraction)))
    return np.sort(rng.choice(n, size=count, replace=False))


def subsample_for_render(strands: list, fraction: float,
                         rng: np.random.Generator = None) -> list:
    """Seeded uniform subset (without replacement) for render steps."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation("render fraction must be in (0, 1]")
    if rng is None:
        rng = np.random.default_rng(0)
    idx = _subsample_indices(len(strands), fraction, rng)
    return [strands[i] for i in idx]


# ---------------------------------------------------------------------------
# optimization


def _as_chained(strands, model: StrandLatentModel,
                cfg: RefineConfig) -> list:
    if len(strands) == 0:
        raise ContractViolation("refinement needs at least one strand")
    if isinstance(strands[0], ChainedGaussianStrand):
        return list(strands)
    return [init_strand(model, s, diameter=cfg.init_diameter,
                        color=cfg.init_color, opacities=cfg.init_opacities)
            for s in strands]


def _scene_splats(batch, body: BodyGaussians, free_colors=None,
                  subset=None) -> tuple:
    centers, covs, colors, opac, si, sj = batch.flat()
    if free_colors is not None:
        override = free_colors[subset] if subset is not None else free_colors
        colors = override[si, sj]
    n_strand = len(centers)
    sp = Splats(
        np.concatenate([centers, body.centers]),
        np.concatenate([covs, body.covariances()]),
        np.concatenate([colors, np.tile(body.color, (body.n_body, 1))]),
        np.concatenate([opac, np.full(body.n_body, body.opacity)]))
    return sp, n_strand, si, sj


def render_strands(strands: list, model: StrandLatentModel,
                   body: BodyGaussians, cam, background=(0.0, 0.0, 0.0),
                   free_colors=None) -> np.ndarray:
    """Convenience forward render of a full population."""
    batch = expand_batch(strands, model)
    sp, _, _, _ = _scene_splats(batch, body, free_colors)
    return render(sp, cam, background=background)[0]


def _checkpoint(strands, model, out_dir):
    if out_dir is None:
        return "no checkpoint (no output directory)"
    from .strands import write_hair

    path = os.path.join(out_dir, "checkpoint.hair")
    finite = [cs for cs in strands
              if np.all(np.isfinite(cs.latent)) and np.all(np.isfinite(cs.root))]
    if len(finite) < len(strands):
        warnings.warn(f"checkpoint drops {len(strands) - len(finite)} "
                      "non-finite strands")
    write_hair(path, [decode(model, cs.latent, cs.root) for cs in finite])
    return f"checkpoint at {path}"


def optimize(strands, bundle: CaptureBundle, field, model: StrandLatentModel,
             cfg: RefineConfig = None, out_dir: str = None) -> RefineResult:
    """Run the full refinement schedule and return the refined strands.

    `strands` may be traced geometry (Strand) or chained-Gaussian strands
    to resume from. `field` may be None to disable volume guidance.
    Writes a per-step loss CSV and optional intermediate renders when
    out_dir is given. Raises DivergenceError on non-finite losses.
    """
    cfg = cfg or RefineConfig()
    rng = np.random.default_rng(cfg.seed)
    population = _as_chained(strands, model, cfg)
    body = build_body(bundle.inner, color=cfg.key_color)
    views = bundle.views()
    targets = [photometric_target(v, cfg.key_color) for v in views]
    grid = DistanceGrid(bundle.inner, resolution=48)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    lam_d = cfg.lam_diameter
    lr_cols = np.concatenate([np.full(128, cfg.lr_latent),
                              np.full(34, cfg.lr_appearance)])
    free_colors = None
    if not cfg.constrained_appearance:
        free_colors = np.array([_ANCHOR_M @ cs.colors for cs in population])

    def fresh_state(pop):
        params = np.array([cs.params for cs in pop])
        hats = np.array([cs.hat_latent for cs in pop])
        opts = [Adam(params.shape, lr_cols),
                Adam(body.radii_raw.shape, cfg.lr_body)]
        if free_colors is not None:
            opts.append(Adam(free_colors.shape, cfg.lr_appearance))
        return params, hats, opts

    params, hats, opts = fresh_state(population)
    history = []
    csv_fh = writer = None
    if out_dir is not None:
        csv_fh = open(os.path.join(out_dir, "loss_log.csv"), "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(["step", "L_i", "L_n", "L_p", "L_d", "L_l", "L_b",
                         "strands"])

    try:
        for step in range(1, cfg.steps + 1):
            if not (np.all(np.isfinite(params))
                    and np.all(np.isfinite(body.radii_raw))):
                where = _checkpoint(population, model, out_dir)
                raise DivergenceError(
                    f"parameters became non-finite at step {step} ({where})")
            n_pop = len(population)
            g_params = np.zeros_like(params)
            g_braw = np.zeros(body.n_body)
            g_free = (np.zeros_like(free_colors)
                      if free_colors is not None else None)

            # photometric term on a random subset, round-robin views
            view_id = (step - 1) % len(views)
            sub = _subsample_indices(n_pop, cfg.render_fraction, rng)
            subset = [population[i] for i in sub]
            batch = expand_batch(subset, model)
            sp, n_strand, si, sj = _scene_splats(batch, body, free_colors,
                                                 subset=sub)
            cam = views[view_id].camera
            img, cache = render(sp, cam, background=cfg.background)
            l_i, g_img = l2_image_loss(img, targets[view_id])
            if cfg.lam_image > 0:
                grads = render_backward(sp, cam, cache,
                                        cfg.lam_image * g_img)
                ns, nseg = batch.length.shape
                gc = np.zeros((ns, nseg, 3))
                gcv = np.zeros((ns, nseg, 3, 3))
                gcl = np.zeros((ns, nseg, 3))
                gop = np.zeros((ns, nseg))
                gc[si, sj] = grads["g_centers"][:n_strand]
                gcv[si, sj] = grads["g_covs"][:n_strand]
                gop[si, sj] = grads["g_opacities"][:n_strand]
                if free_colors is None:
                    gcl[si, sj] = grads["g_colors"][:n_strand]
                else:
                    gfc = np.zeros((ns, nseg, 3))
                    gfc[si, sj] = grads["g_colors"][:n_strand]
                    g_free[sub] += gfc
                g_params[sub] += backprop_batch(subset, model, batch,
                                                gc, gcv, gcl, gop)
                g_braw += body.backprop(grads["g_covs"][n_strand:])

            # geometry terms on the full population
            offsets = decode_offsets(model, params[:, _LATENT_COLS])
            roots = np.array([cs.root for cs in population])
            verts = np.concatenate([roots[:, None],
                                    roots[:, None] + offsets], axis=1)
            l_n = 0.0
            if field is not None and cfg.lam_guidance > 0:
                l_n, g_v = guidance_loss_batch(verts, field)
                g_params[:, _LATENT_COLS] += (
                    cfg.lam_guidance * _verts_to_latent_grad(model, g_v))
            l_p, g_v = penetration_loss_batch(verts, grid)
            g_params[:, _LATENT_COLS] += (
                cfg.lam_penetration * _verts_to_latent_grad(model, g_v))
            l_d, l_l, g_h = _heuristic_losses(params, hats)
            scale_h = np.concatenate([np.full(128, cfg.lam_latent),
                                      np.full(8, lam_d), np.zeros(26)])
            g_params += scale_h * g_h
            l_b, g_b = _body_loss(body)
            g_braw += cfg.lam_body * g_b

            total = (cfg.lam_image * l_i + cfg.lam_guidance * l_n
                     + cfg.lam_penetration * l_p + lam_d * l_d
                     + cfg.lam_latent * l_l + cfg.lam_body * l_b)
            if not np.isfinite(total):
                where = _checkpoint(population, model, out_dir)
                raise DivergenceError(
                    f"loss became non-finite at step {step} ({where})")

            opts[0].step(params, g_params)
            opts[1].step(body.radii_raw, g_braw)
            if free_colors is not None:
                opts[2].step(free_colors, g_free)
            for i, cs in enumerate(population):
                cs.set_params(params[i])

            row = dict(step=step, L_i=l_i, L_n=l_n, L_p=l_p, L_d=l_d,
                       L_l=l_l, L_b=l_b, strands=n_pop)
            history.append(row)
            if writer is not None:
                writer.writerow([step, f"{l_i:.8g}", f"{l_n:.8g}",
                                 f"{l_p:.8g}", f"{l_d:.8g}", f"{l_l:.8g}",
                                 f"{l_b:.8g}", n_pop])
            if (out_dir is not None and cfg.render_every
                    and step % cfg.render_every == 0):
                rdir = os.path.join(out_dir, "renders")
                os.makedirs(rdir, exist_ok=True)
                shot = render_strands(population, model, body,
                                      views[0].camera, cfg.background,
                                      free_colors)
                write_image(os.path.join(rdir, f"step_{step:04d}.png"), shot)

            # population control: prune then split, budget-capped
            if step % cfg.control_every == 0:
                scale = cfg.final_split_scale if step == cfg.steps else 1.0
                stats = {}
                population = prune_strands(
                    population, model, cfg.background, stats,
                    seg_colors=free_colors,
                    opacity_threshold=cfg.prune_opacity)
                if free_colors is not None and len(population):
                    free_colors = free_colors[stats["kept_indices"]]
                if not population:
                    break
                population, parents = split_strands(population, model, rng,
                                                    scale=scale,
                                                    budget=cfg.max_strands)
                if free_colors is not None:
                    free_colors = free_colors[parents]
                lam_d *= 2.0
                params, hats, opts = fresh_state(population)
    finally:
        if csv_fh is not None:
            csv_fh.close()

    return RefineResult(strands=population, body=body, history=history)
