"""Procedural synthetic captures: grooms, ground-truth renders, metrics.

Everything the pipeline consumes can be produced here with known ground
truth: parametric grooms rooted on a scalp mesh, multi-camera anti-aliased
polyline renders with matching label masks, an analytic orientation field
sampler, and point-set metrics for comparing reconstructions to the truth.
All outputs are deterministic functions of (spec, seed).
"""

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .bundle import CaptureBundle, save_bundle
from .errors import ContractViolation
from .field import HairField, direction_to_angles
from .geometry import Camera, HairBBox, look_at_camera, project_points
from .mesh import DistanceGrid, TriMesh, icosphere
from .strands import N_K, Strand, resample_strand, write_hair

_STYLES = ("straight", "wavy", "crossing", "parted")
_MIN_DEPTH = 1e-6


def _face_normals(tri: np.ndarray) -> np.ndarray:
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)


# ---------------------------------------------------------------------------
# groom specification and generation


def default_scalp(radius: float = 0.09, center=(0.0, 0.0, 0.0),
                  subdivisions: int = 3) -> tuple:
    """Sphere scalp mesh plus the vertex ids of its upper cap."""
    mesh = icosphere(subdivisions, radius, center)
    rel = mesh.vertices - np.asarray(center)
    cap = np.flatnonzero(rel[:, 2] > 0.25 * radius)
    return mesh, cap


@dataclass
class GroomSpec:
    """Parametric groom: scalp, strand family, styling, and seed."""

    style: str = "wavy"
    n_strands: int = 300
    length_mean: float = 0.06
    length_std: float = 0.006
    curl_amplitude: float = 0.004
    curl_frequency: float = 2.5
    gravity: float = 0.35
    wisp_count: int = 0
    wisp_spread: float = 0.004
    parting_axis: int = 0
    scalp_radius: float = 0.09
    scalp_center: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    scalp: Optional[TriMesh] = None
    scalp_vertices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.style not in _STYLES:
            raise ContractViolation(f"unknown groom style {self.style!r}")
        if self.n_strands < 1:
            raise ContractViolation("n_strands must be positive")
        if self.length_mean <= 0 or self.length_std < 0:
            raise ContractViolation("length distribution must be positive")
        if not 0 <= self.gravity <= 1:
            raise ContractViolation("gravity blend must be in [0, 1]")
        if self.parting_axis not in (0, 1):
            raise ContractViolation("parting axis must be 0 (x) or 1 (y)")
        if self.scalp is None:
            self.scalp, self.scalp_vertices = default_scalp(
                self.scalp_radius, self.scalp_center)
        elif self.scalp_vertices is None:
            raise ContractViolation(
                "a custom scalp mesh needs an explicit scalp vertex set")


def _perp_basis(d: np.ndarray) -> tuple:
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else \
        np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _strand_path(root, direction, length, amplitude, frequency, phase):
    t = np.linspace(0.0, 1.0, N_K)
    v = root[None] + np.outer(t * length, direction)
    if amplitude > 0.0:
        e1, e2 = _perp_basis(direction)
        arg = 2.0 * np.pi * frequency * t + phase
        v = v + amplitude * (np.outer(np.sin(arg) - np.sin(phase), e1)
                             + np.outer(np.cos(arg) - np.cos(phase), e2))
        # curls lengthen the path; a similarity rescale about the root
        # restores the requested arc length exactly (shape preserved)
        arc = np.linalg.norm(np.diff(v, axis=0), axis=1).sum()
        v = root[None] + (v - root[None]) * (length / arc)
    return Strand(v, True)


def generate_groom(spec: GroomSpec) -> list:
    """Generate the strand set for a groom spec (deterministic per seed)."""
    rng = np.random.default_rng(spec.seed)
    mesh, cap = spec.scalp, np.asarray(spec.scalp_vertices)
    center = np.asarray(spec.scalp_center, dtype=np.float64)
    n = spec.n_strands
    down = np.array([0.0, 0.0, -1.0])

    if spec.style == "crossing":
        wisp_count = 2
    else:
        wisp_count = spec.wisp_count

    if wisp_count > 0:
        if spec.style == "crossing":
            # two patches on opposite sides of the upper cap whose combing
            # directions cross above the head at slightly different depths
            pole = spec.scalp_radius / np.sqrt(2.0)
            anchors = np.array([
                center + [-pole, 0.0, pole],
                center + [pole, 0.01, pole],
            ])
            combs = np.array([[1.0, 0.0, 0.35], [-1.0, 0.0, 0.1]])
            combs /= np.linalg.norm(combs, axis=1, keepdims=True)
        else:
            ids = rng.choice(cap, size=wisp_count, replace=False)
            anchors = mesh.vertices[ids]
            combs = [None] * wisp_count
        wisp_of = np.arange(n) % wisp_count
        phases = rng.uniform(0.0, 2.0 * np.pi, wisp_count)
        roots = np.empty((n, 3))
        for i in range(n):
            a = anchors[wisp_of[i]]
            jitter = rng.normal(0.0, spec.wisp_spread, 3)
            p = a + jitter - center
            roots[i] = center + p / np.linalg.norm(p) * spec.scalp_radius
    else:
        ids = rng.choice(cap, size=n, replace=n > len(cap))
        roots = mesh.vertices[ids]
        wisp_of = None

    lengths = np.maximum(rng.normal(spec.length_mean, spec.length_std, n),
                         0.2 * spec.length_mean)
    strands = []
    for i in range(n):
        rel = roots[i] - center
        normal = rel / np.linalg.norm(rel)
        direction = (1.0 - spec.gravity) * normal + spec.gravity * down
        if spec.style == "parted":
            side = 1.0 if rel[spec.parting_axis] >= 0.0 else -1.0
            comb = np.zeros(3)
            comb[spec.parting_axis] = side
            direction = direction + 0.8 * comb
        if wisp_of is not None:
            if spec.style == "crossing":
                direction = combs[wisp_of[i]] + rng.normal(0.0, 0.02, 3)
            phase = phases[wisp_of[i]] + rng.normal(0.0, 0.1)
        else:
            phase = rng.uniform(0.0, 2.0 * np.pi)
        direction = direction / np.linalg.norm(direction)
        amp = 0.0 if spec.style == "crossing" else spec.curl_amplitude
        strands.append(_strand_path(roots[i], direction, lengths[i],
                                    amp, spec.curl_frequency, phase))
    return strands


def parting_polyline(spec: GroomSpec, camera: Camera,
                     band: float = 0.12) -> np.ndarray:
    """Projected pixel polyline of the scalp-top parting line."""
    mesh, cap = spec.scalp, np.asarray(spec.scalp_vertices)
    center = np.asarray(spec.scalp_center, dtype=np.float64)
    rel = mesh.vertices[cap] - center
    on_line = np.abs(rel[:, spec.parting_axis]) < band * spec.scalp_radius
    top = rel[:, 2] > 0.55 * spec.scalp_radius
    pts = mesh.vertices[cap[on_line & top]]
    if len(pts) < 2:
        raise ContractViolation("parting band selected fewer than 2 points")
    other = 1 - spec.parting_axis
    pts = pts[np.argsort(pts[:, other])]
    pix, z = project_points(camera, pts)
    keep = np.isfinite(pix).all(axis=1) & (z > _MIN_DEPTH)
    return pix[keep]


# ---------------------------------------------------------------------------
# ground-truth rendering


@dataclass
class RenderStyle:
    """Shading knobs for ground-truth renders."""

    hair_color: tuple = (0.55, 0.38, 0.22)
    color_jitter: float = 0.08
    body_color: tuple = (0.55, 0.42, 0.36)
    background: tuple = (0.0, 0.0, 0.0)
    light: tuple = (0.3, -0.5, 0.8)
    line_width: float = 1.0
    supersample: int = 3
    seed: int = 0


def _raster_mesh(mesh: TriMesh, cam: Camera, scale: int, zbuf, img, hit,
                 color, light):
    """Z-buffered flat-shaded triangle raster at `scale`x supersampling."""
    h, w = zbuf.shape
    pix, z = project_points(cam, mesh.vertices)
    pix = pix * scale
    tri = mesh.faces
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    color = np.asarray(color, dtype=np.float64)
    for f in tri:
        if np.any(z[f] <= _MIN_DEPTH) or not np.all(np.isfinite(pix[f])):
            continue
        p0, p1, p2 = pix[f]
        lo = np.floor(np.minimum(np.minimum(p0, p1), p2)).astype(int)
        hi = np.ceil(np.maximum(np.maximum(p0, p1), p2)).astype(int)
        x0, y0 = np.maximum(lo, 0)
        x1, y1 = np.minimum(hi, [w - 1, h - 1])
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(d) < 1e-12:
            continue
        w1 = ((gx - p0[0]) * (p2[1] - p0[1])
              - (p2[0] - p0[0]) * (gy - p0[1])) / d
        w2 = ((p1[0] - p0[0]) * (gy - p0[1])
              - (gx - p0[0]) * (p1[1] - p0[1])) / d
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        depth = w0 * z[f[0]] + w1 * z[f[1]] + w2 * z[f[2]]
        rows = (gy - 0.5).astype(int)[inside]
        cols = (gx - 0.5).astype(int)[inside]
        depth = depth[inside]
        closer = depth < zbuf[rows, cols]
        rows, cols, depth = rows[closer], cols[closer], depth[closer]
        v = mesh.vertices[f]
        normal = np.cross(v[1] - v[0], v[2] - v[0])
        nl = np.linalg.norm(normal)
        if nl < 1e-18:
            continue
        shade = 0.25 + 0.75 * abs(float(normal @ light)) / nl
        zbuf[rows, cols] = depth
        img[rows, cols] = shade * color
        hit[rows, cols] = True


def _raster_strand(verts, cam, scale, zbuf, img, hit, color, light, radius):
    """Paint one polyline into the supersampled buffers with depth tests."""
    h, w = zbuf.shape
    pix, z = project_points(cam, verts)
    ok = np.isfinite(pix).all(axis=1) & (z > _MIN_DEPTH)
    if ok.sum() < 2:
        return
    pix, z, verts = pix[ok] * scale, z[ok], verts[ok]
    # Kajiya-style fiber shade from the 3D tangent, computed per vertex
    tan = np.gradient(verts, axis=0)
    tan /= np.maximum(np.linalg.norm(tan, axis=1, keepdims=True), 1e-30)
    tl = np.clip(tan @ light, -1.0, 1.0)
    shade = 0.35 + 0.65 * np.sqrt(1.0 - tl * tl)
    # sample the projected polyline roughly every 0.7 subpixels
    seg = np.linalg.norm(np.diff(pix, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < 1e-9:
        return
    s = np.arange(0.0, total, 0.7)
    u = pix[:, 0]
    samples = np.stack([np.interp(s, cum, pix[:, 0]),
                        np.interp(s, cum, pix[:, 1])], axis=1)
    zs = np.interp(s, cum, z)
    cs = np.interp(s, cum, shade)[:, None] * color[None]
    # disc footprint of the requested line width
    r = int(np.ceil(radius))
    dg = np.arange(-r, r + 1)
    ox, oy = np.meshgrid(dg, dg)
    disc = (ox ** 2 + oy ** 2) <= radius ** 2
    offs = np.stack([ox[disc], oy[disc]], axis=1)
    cols = np.floor(samples[:, None, 0] + offs[None, :, 0]).astype(int)
    rows = np.floor(samples[:, None, 1] + offs[None, :, 1]).astype(int)
    zc = np.broadcast_to(zs[:, None], rows.shape)
    cc = np.broadcast_to(cs[:, None, :], rows.shape + (3,))
    keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows, cols = rows[keep], cols[keep]
    zc, cc = zc[keep], cc[keep]
    flat = rows * w + cols
    zflat = zbuf.ravel()
    closer = zc < zflat[flat]
    flat, zc, cc = flat[closer], zc[closer], cc[closer]
    np.minimum.at(zflat, flat, zc)
    won = zflat[flat] == zc
    img.reshape(-1, 3)[flat[won]] = cc[won]
    hit.ravel()[flat[won]] = True


def render_ground_truth(strands, cameras, style: RenderStyle = None,
                        scalp: TriMesh = None,
                        colors: np.ndarray = None) -> tuple:
    """Render anti-aliased ground-truth images and label masks.

    Rasterization happens on a supersampled grid with a shared z-buffer
    (nearer surface wins per subpixel); box-downsampling then provides the
    anti-aliasing. Label rule per output pixel: hair where the visible
    strand coverage exceeds 0.5, else body where the scalp render covers
    the majority, else background. `colors` overrides the per-strand base
    colors (n, 3) drawn from the style.
    """
    style = style or RenderStyle()
    s = int(style.supersample)
    if s < 1:
        raise ContractViolation("supersample factor must be >= 1")
    if colors is None:
        rng = np.random.default_rng(style.seed)
        base = np.asarray(style.hair_color, dtype=np.float64)
        jit = rng.uniform(-style.color_jitter, style.color_jitter,
                          (len(strands), 3))
        colors = np.clip(base[None] + jit, 0.0, 1.0)
    else:
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (len(strands), 3):
            raise ContractViolation("per-strand colors must be (n, 3)")
    light = np.asarray(style.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    radius = 0.5 * style.line_width * s

    images, masks = [], []
    for cam in cameras:
        hs, ws = cam.height * s, cam.width * s
        zbuf = np.full((hs, ws), np.inf)
        img = np.empty((hs, ws, 3))
        img[:] = np.asarray(style.background, dtype=np.float64)
        body_hit = np.zeros((hs, ws), dtype=bool)
        hair_hit = np.zeros((hs, ws), dtype=bool)
        if scalp is not None:
            _raster_mesh(scalp, cam, s, zbuf, img, body_hit,
                         style.body_color, light)
        for i, strand in enumerate(strands):
            _raster_strand(strand.vertices, cam, s, zbuf, img, hair_hit,
                           colors[i], light, radius)
        body_hit &= ~hair_hit  # strands in front claim the subpixel
        down = img.reshape(cam.height, s, cam.width, s, 3).mean(axis=(1, 3))
        hair_cov = hair_hit.reshape(cam.height, s, cam.width, s).mean(
            axis=(1, 3))
        body_cov = body_hit.reshape(cam.height, s, cam.width, s).mean(
            axis=(1, 3))
        label = np.zeros((cam.height, cam.width), dtype=np.uint8)
        label[body_cov > 0.5] = 2
        label[hair_cov > 0.5] = 1
        images.append(down)
        masks.append(label)
    return images, masks


# ---------------------------------------------------------------------------
# analytic orientation field


class AnalyticFieldSampler:
    """Exact groom tangents queryable at arbitrary 3D points.

    Nearest-segment lookup over the generating strands; this is the
    orientation ground truth the volumetric stage is judged against.
    """

    def __init__(self, strands):
        if len(strands) == 0:
            raise ContractViolation("sampler needs at least one strand")
        heads, tails, dirs = [], [], []
        for st in strands:
            v = st.vertices
            d = np.diff(v, axis=0)
            ln = np.linalg.norm(d, axis=1)
            live = ln > 1e-12
            heads.append(v[:-1][live])
            tails.append(v[1:][live])
            dirs.append(d[live] / ln[live, None])
        self.heads = np.concatenate(heads)
        self.tails = np.concatenate(tails)
        self.directions = np.concatenate(dirs)
        self.tree = cKDTree(0.5 * (self.heads + self.tails))

    def tangent(self, points: np.ndarray) -> tuple:
        """(unit tangents, exact distance to the nearest segment)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dist, idx = _point_to_segments(p, self.heads, self.tails,
                                       self.directions, self.tree)
        return self.directions[idx], dist

    def bake(self, box: HairBBox, resolution: int, radius: float,
             sigma_hair: float = 1.0, body: TriMesh = None) -> HairField:
        """Voxelize the exact tangents into a HairField oracle."""
        f = HairField.create(box, resolution)
        f.sigma[:] = 0.0
        f.rho_h[:] = 0.0
        f.rho_b[:] = 0.0
        centers = f.node_positions().reshape(-1, 3)
        dirs, dist = self.tangent(centers)
        inside = dist < radius
        theta, phi = direction_to_angles(dirs[inside])
        f.theta.reshape(-1)[inside] = theta
        f.phi.reshape(-1)[inside] = phi
        f.rho_h.reshape(-1)[inside] = 1.0
        f.sigma.reshape(-1)[inside] = sigma_hair
        if body is not None:
            grid = DistanceGrid(body)
            signed = grid.signed(centers)
            f.rho_b.reshape(-1)[signed < 0.0] = 1.0
        return f


# ---------------------------------------------------------------------------
# oracle metrics


def _segment_soup(strands):
    a, b = [], []
    for st in strands:
        v = st.vertices if len(st.vertices) == N_K else \
            resample_strand(st).vertices
        a.append(v[:-1])
        b.append(v[1:])
    a, b = np.concatenate(a), np.concatenate(b)
    d = b - a
    ln = np.linalg.norm(d, axis=1)
    live = ln > 1e-12
    return a[live], b[live], d[live] / ln[live, None]


def _point_to_segments(points, sa, sb, dirs, tree, k=8):
    """Exact distance from each point to its nearest polyline segment.

    The candidate set comes from a kNN query over segment midpoints; the
    winner among candidates is resolved with exact point-segment distance.
    Returns (distance, matched segment index).
    """
    k = min(k, len(sa))
    _, idx = tree.query(points, k=k)
    idx = idx.reshape(len(points), k)
    ap = points[:, None, :] - sa[idx]
    seg = sb[idx] - sa[idx]
    denom = np.einsum("pkj,pkj->pk", seg, seg)
    t = np.clip(np.einsum("pkj,pkj->pk", ap, seg)
                / np.maximum(denom, 1e-30), 0.0, 1.0)
    foot = sa[idx] + t[:, :, None] * seg
    d = np.linalg.norm(points[:, None, :] - foot, axis=2)
    best = np.argmin(d, axis=1)
    rows = np.arange(len(points))
    return d[rows, best], idx[rows, best]


def metric_strand_distance(reconstructed, gt,
                           coverage_radius: float = 1e-3) -> tuple:
    """(mean closest-point distance, coverage fraction, orientation error).

    Distances are symmetric (both directions averaged) between segment
    midpoints and exact polyline segments. Coverage is the fraction of
    ground-truth midpoints within `coverage_radius` of the reconstruction.
    Orientation error is the mean undirected angle in degrees between
    matched segment directions.
    """
    if len(reconstructed) == 0 or len(gt) == 0:
        raise ContractViolation("metric needs non-empty strand sets")
    ra, rb, rdir = _segment_soup(reconstructed)
    ga, gb, gdir = _segment_soup(gt)
    rmid, gmid = 0.5 * (ra + rb), 0.5 * (ga + gb)
    rtree, gtree = cKDTree(rmid), cKDTree(gmid)
    d_gr, match = _point_to_segments(gmid, ra, rb, rdir, rtree)
    d_rg, _ = _point_to_segments(rmid, ga, gb, gdir, gtree)
    mean_dist = 0.5 * (d_gr.mean() + d_rg.mean())
    coverage = float(np.mean(d_gr < coverage_radius))
    cosang = np.abs(np.einsum("ij,ij->i", gdir, rdir[match]))
    orient_deg = float(np.degrees(np.arccos(np.clip(cosang, 0.0, 1.0))).mean())
    return float(mean_dist), coverage, orient_deg


# ---------------------------------------------------------------------------
# full synthetic capture


def camera_sphere(n_views: int, radius: float, target,
                  focal: float, resolution: int,
                  elevations=(18.0, 42.0)) -> list:
    """Cameras on a sphere around `target`: golden-angle azimuths spread
    over a small set of elevation rings, all looking at the target."""
    if n_views < 1:
        raise ContractViolation("need at least one camera")
    target = np.asarray(target, dtype=np.float64)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n_views):
        az = i * golden
        el = np.radians(elevations[i % len(elevations)])
        eye = target + radius * np.array([
            np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(look_at_camera(eye, target, (0.0, 0.0, 1.0),
                                   focal=focal, width=resolution,
                                   height=resolution))
    return cams


def corrupt_mask(mask: np.ndarray, rng: np.random.Generator,
                 mode: int, strength: float = 0.1) -> np.ndarray:
    """One noisy segmentation source. Modes: 0 dilates hair, 1 erodes
    hair, 2 flips speckle near the hair boundary. Labels stay {0,1,2}."""
    out = mask.copy()
    hair = mask == 1
    if mode % 3 == 0:
        grown = ndimage.binary_dilation(hair, iterations=1)
        out[grown & (out == 0)] = 1
    elif mode % 3 == 1:
        kept = ndimage.binary_erosion(hair, iterations=1)
        out[hair & ~kept] = 0
    else:
        border = ndimage.binary_dilation(hair, iterations=2) & ~(
            ndimage.binary_erosion(hair, iterations=2))
        flips = border & (rng.uniform(size=mask.shape) < strength)
        out[flips & hair] = 0
        out[flips & ~hair & (mask == 0)] = 1
    return out


@dataclass
class SyntheticBundle:
    """A capture bundle plus everything its truth is measured against."""

    bundle: CaptureBundle
    strands: list
    sampler: AnalyticFieldSampler
    exact_masks: list = field(default_factory=list)
    spec: Optional[GroomSpec] = None


def make_synthetic_bundle(spec: GroomSpec, n_views: int = 12,
                          resolution: int = 256, focal: float = None,
                          camera_radius: float = 0.45,
                          style: RenderStyle = None,
                          mask_sources: int = 1,
                          mask_noise: float = 0.1) -> SyntheticBundle:
    """Generate a full synthetic capture with ground truth.

    `mask_sources` > 1 adds that many corrupted segmentation sources after
    the exact primary one is replaced by the first corruption (so every
    available source is noisy, exercising min-loss aggregation); with a
    single source the masks are exact.
    """
    strands = generate_groom(spec)
    center = np.asarray(spec.scalp_center, dtype=np.float64)
    if focal is None:
        # frame roughly 0.32 m of world extent at the camera distance
        focal = resolution * camera_radius / 0.32
    target = center + np.array([0.0, 0.0, 0.35 * spec.scalp_radius])
    cameras = camera_sphere(n_views, camera_radius, target, focal,
                            resolution)
    images, exact = render_ground_truth(strands, cameras, style,
                                        scalp=spec.scalp)

    rng = np.random.default_rng(spec.seed + 1)
    if mask_sources > 1:
        masks = [[corrupt_mask(m, rng, k, mask_noise)
                  for k in range(mask_sources)] for m in exact]
    else:
        masks = [[m.copy()] for m in exact]

    verts = np.concatenate([s.vertices for s in strands])
    rel = np.linalg.norm(verts - center, axis=1)
    outer = icosphere(2, 1.25 * rel.max(), center)
    # strands must sit strictly inside the tessellated surface, whose faces
    # chord slightly inside the nominal radius
    tri = outer.vertices[outer.faces]
    plane_d = np.einsum("fj,fj->f", _face_normals(tri), tri[:, 0] - center)
    if rel.max() >= np.abs(plane_d).min():
        raise ContractViolation("outer mesh does not contain all strands")
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    pad = 0.1 * (hi - lo).max()
    bbox = HairBBox(np.minimum(lo, center - spec.scalp_radius) - pad,
                    np.maximum(hi, center + spec.scalp_radius) + pad)

    parting = None
    if spec.style == "parted":
        parting = (0, parting_polyline(spec, cameras[0]))

    bundle = CaptureBundle(cameras=cameras, images=images, masks=masks,
                           inner=spec.scalp, outer=outer, bbox=bbox,
                           parting=parting)
    return SyntheticBundle(bundle=bundle, strands=strands,
                           sampler=AnalyticFieldSampler(strands),
                           exact_masks=exact, spec=spec)


def save_synthetic_bundle(path, sb: SyntheticBundle) -> None:
    """Write the bundle directory plus the ground-truth strand file."""
    save_bundle(path, sb.bundle)
    write_hair(os.path.join(path, "gt.hair"), sb.strands)
