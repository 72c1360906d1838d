"""Strand tracing from an optimized hair field.

Volume hairs grow bidirectionally from density-weighted seeds with an
inertial update that blends the field orientation and a surface
repulsion term. Scalp hairs grow outward from the scalp region of the
inner mesh and later serve as bridges: every floating volume hair is
walked backward onto a nearby scalp hair and down to its root, so the
final set is fully scalp-rooted.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, EmptyVolumeError, StallError
from .field import HairField, angles_to_direction, interp_angle, trilinear_setup
from .geometry import Camera, HairBBox, camera_ray
from .mesh import DistanceGrid, TriMesh, distance_to_mesh, ray_mesh_intersect
from .strands import N_K, Strand, resample_strand


@dataclass
class TraceConfig:
    step: float = 0.003            # l, meters
    inertia: float = 0.6           # gamma
    penetration: float = 0.005     # f_d, meters
    health_budget: int = 10
    sigma_floor: float = 0.05
    rho_floor: float = 0.3
    n_volume: int = 2000
    n_scalp: int = 500
    max_vertices: int = 300        # per direction
    deprioritize_radius: float = 0.003
    deprioritize_factor: float = 0.1
    connect_k: int = 5
    connect_radius: float = 0.02
    scalp_axis: int = 2            # head-local up axis for the plane heuristic
    scalp_level: float = 0.0
    parting_band: float = 0.005    # scalp distance within which crossings count

    def __post_init__(self):
        if not 0.0 < self.inertia < 1.0:
            raise ContractViolation("inertia must lie in (0, 1)")
        if self.step <= 0 or self.penetration <= 0:
            raise ContractViolation("step and penetration must be positive")


class _FieldProbe:
    """Low-overhead scalar field queries for the per-step trace loop."""

    def __init__(self, field: HairField):
        self.field = field
        self.sigma = field.sigma.reshape(-1)
        self.rho_h = field.rho_h.reshape(-1)
        self.theta = field.theta
        self.phi = field.phi

    def query(self, p):
        """(sigma, rho_h, direction) at p; zeros outside the box."""
        idx, w, inside = trilinear_setup(self.field, p[None])
        if not inside[0]:
            return 0.0, 0.0, np.zeros(3)
        sig = float(self.sigma[idx[0]] @ w[0])
        rho = float(self.rho_h[idx[0]] @ w[0])
        th = interp_angle(self.theta, idx, w)[0]
        ph = interp_angle(self.phi, idx, w)[0]
        return sig, rho, angles_to_direction(th, ph)


def _surface_probe(surface, p):
    """(signed distance, outward normal) for a TriMesh or DistanceGrid."""
    if surface is None:
        return np.inf, np.zeros(3)
    if isinstance(surface, DistanceGrid):
        d = float(surface.signed(p[None])[0])
        n = surface.gradient(p[None])[0]
        return d, n
    d, _, n = distance_to_mesh(p, surface)
    return d, n


class SeedQueue:
    """Priority queue of seed points with spatial deprioritization.

    Priorities only ever decrease, so stale heap entries are lazily
    reinserted with their current key; pop order is nonincreasing in
    the priority as of pop time.
    """

    def __init__(self, points: np.ndarray, priority: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.priority = np.asarray(priority, dtype=np.float64).copy()
        if len(self.points) != len(self.priority):
            raise ContractViolation("points and priorities must align")
        self._tree = cKDTree(self.points) if len(self.points) else None
        self._heap = [(-p, i) for i, p in enumerate(self.priority)]
        heapq.heapify(self._heap)
        self._done = np.zeros(len(self.points), dtype=bool)

    def __len__(self):
        return int((~self._done).sum())

    def pop(self):
        """Highest-priority remaining seed as (point, priority), or None."""
        while self._heap:
            key, i = heapq.heappop(self._heap)
            if self._done[i]:
                continue
            if -key > self.priority[i] + 1e-12:
                heapq.heappush(self._heap, (-self.priority[i], i))
                continue
            self._done[i] = True
            return self.points[i], float(self.priority[i])
        return None

    def deprioritize(self, points: np.ndarray, radius: float, factor: float):
        """Scale down priorities of seeds within radius of any point."""
        if self._tree is None or len(points) == 0:
            return
        hits = self._tree.query_ball_point(np.asarray(points), r=radius)
        idx = sorted({i for sub in hits for i in sub})
        if idx:
            self.priority[np.asarray(idx)] *= factor


def sample_seeds(field: HairField, inner: Optional[TriMesh],
                 outer: Optional[TriMesh], box: HairBBox, n: int,
                 rng: np.random.Generator = None,
                 max_batches: int = 40) -> SeedQueue:
    """Uniform seeds in the admissible shell, weighted by sigma*rho_h."""
    from .mesh import contains

    rng = rng or np.random.default_rng(0)
    accepted = []
    for _ in range(max_batches):
        cand = rng.uniform(box.lo, box.hi, size=(max(4 * n, 1024), 3))
        keep = np.ones(len(cand), dtype=bool)
        if inner is not None:
            keep &= ~contains(inner, cand)
        if outer is not None:
            keep &= contains(outer, cand)
        accepted.append(cand[keep])
        if sum(len(a) for a in accepted) >= n:
            break
    pts = np.concatenate(accepted) if accepted else np.zeros((0, 3))
    if len(pts) == 0:
        raise EmptyVolumeError("no admissible seed volume between the meshes")
    pts = pts[:n]
    idx, w, inside = trilinear_setup(field, pts)
    sig = field.sigma.reshape(-1)[idx]
    rho = field.rho_h.reshape(-1)[idx]
    prio = np.einsum("nc,nc->n", sig, w) * np.einsum("nc,nc->n", rho, w)
    prio = np.where(inside, prio, 0.0)
    return SeedQueue(pts, prio)


def grow_step(v_prev: np.ndarray, m_prev: np.ndarray, field,
              inner, cfg: TraceConfig):
    """One inertial growth step; returns (v_next, m_next unit).

    The orientation term is sign-disambiguated against the current
    direction; the repulsion term activates only inside the inner
    surface and only against inward motion.
    """
    probe = field if isinstance(field, _FieldProbe) else _FieldProbe(field)
    _, _, g = probe.query(v_prev)
    sign = 1.0 if float(g @ m_prev) >= 0.0 else -1.0
    term = sign * g
    if inner is not None:
        d, nrm = _surface_probe(inner, v_prev)
        if d < 0.0:
            lam = min(-d, cfg.penetration) / cfg.penetration
            term = term - lam * min(float(nrm @ m_prev), 0.0) * nrm
    m = cfg.inertia * m_prev + (1.0 - cfg.inertia) * term
    norm = float(np.linalg.norm(m))
    if norm < 1e-9:
        raise StallError("growth direction collapsed")
    m = m / norm
    return v_prev + cfg.step * m, m


def _march(seed, direction, probe, inner, outer, box, cfg):
    """Vertices grown from seed along one direction, with health
    bookkeeping; the unhealthy tail is trimmed off."""
    verts = [np.asarray(seed, dtype=np.float64)]
    healthy_len = 1
    health = cfg.health_budget
    m = np.asarray(direction, dtype=np.float64)
    v = verts[0]
    while health > 0 and len(verts) < cfg.max_vertices:
        try:
            v, m = grow_step(v, m, probe, inner, cfg)
        except StallError:
            break
        if not box.contains(v[None])[0]:
            break
        if outer is not None:
            d, _ = _surface_probe(outer, v)
            if d > 0.0:
                break
        verts.append(v)
        sig, rho, _ = probe.query(v)
        if sig < cfg.sigma_floor or rho < cfg.rho_floor:
            health -= 1
        else:
            healthy_len = len(verts)
    return verts[:healthy_len]


def trace_strand(seed, init_dir, field: HairField, inner, outer,
                 cfg: TraceConfig, bidirectional: bool = True):
    """Trace one strand; returns a Strand or None if it never grew.

    Volume hairs trace both ways from the seed (the field orientation
    is sign-free); scalp hairs pass bidirectional=False to grow only
    along the given direction.
    """
    probe = _FieldProbe(field)
    seed = np.asarray(seed, dtype=np.float64)
    d0 = np.asarray(init_dir, dtype=np.float64)
    n0 = np.linalg.norm(d0)
    if n0 < 1e-9:
        return None
    d0 = d0 / n0
    fwd = _march(seed, d0, probe, inner, outer, field.box, cfg)
    if bidirectional:
        bwd = _march(seed, -d0, probe, inner, outer, field.box, cfg)
        verts = bwd[::-1] + fwd[1:]
    else:
        verts = fwd
    if len(verts) < 2:
        return None
    return Strand(np.asarray(verts), root_on_scalp=False)


def _scalp_faces(mesh: TriMesh, scalp_vertices: np.ndarray) -> np.ndarray:
    on = np.zeros(len(mesh.vertices), dtype=bool)
    on[scalp_vertices] = True
    return np.flatnonzero(on[mesh.faces].all(axis=1))


def scalp_vertex_set(mesh: TriMesh, axis: int, level: float) -> np.ndarray:
    """Plane heuristic: scalp = vertices above `level` along `axis`."""
    return np.flatnonzero(mesh.vertices[:, axis] > level)


def trace_all(field: HairField, inner: Optional[TriMesh],
              outer: Optional[TriMesh], cfg: TraceConfig = None,
              rng: np.random.Generator = None,
              scalp_vertices: Optional[np.ndarray] = None):
    """Trace the volume-hair and scalp-hair sets.

    Returns (volume hairs, scalp hairs). Seeds are consumed from a
    priority queue and deprioritized near freshly traced strands;
    scalp hairs start at area-weighted random points of the scalp
    region with the outward surface normal as initial direction.
    """
    cfg = cfg or TraceConfig()
    rng = rng or np.random.default_rng(0)
    inner_fast = DistanceGrid(inner, resolution=48) if inner is not None else None
    outer_fast = DistanceGrid(outer, resolution=48) if outer is not None else None

    queue = sample_seeds(field, inner, outer, field.box,
                         max(cfg.n_volume * 3, 64), rng)
    volume = []
    while len(volume) < cfg.n_volume:
        item = queue.pop()
        if item is None:
            break
        seed, prio = item
        if prio <= 0.0:
            break
        probe = _FieldProbe(field)
        sig, rho, g = probe.query(seed)
        if sig < cfg.sigma_floor or rho < cfg.rho_floor:
            continue
        s = trace_strand(seed, g, field, inner_fast, outer_fast, cfg)
        if s is None or s.n_vertices < 4:
            continue
        volume.append(s)
        queue.deprioritize(s.vertices, cfg.deprioritize_radius,
                           cfg.deprioritize_factor)

    scalp = []
    if inner is not None and cfg.n_scalp > 0:
        if scalp_vertices is None:
            scalp_vertices = scalp_vertex_set(inner, cfg.scalp_axis,
                                              cfg.scalp_level)
        faces = _scalp_faces(inner, scalp_vertices)
        if len(faces):
            tri = inner.vertices[inner.faces[faces]]
            area = 0.5 * np.linalg.norm(
                np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            pf = area / area.sum()
            picks = rng.choice(len(faces), size=cfg.n_scalp, p=pf)
            r1 = np.sqrt(rng.uniform(0, 1, cfg.n_scalp))
            r2 = rng.uniform(0, 1, cfg.n_scalp)
            b = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
            roots = np.einsum("nk,nkj->nj", b, tri[picks])
            vn = inner.normals[inner.faces[faces[picks]]]
            normals = np.einsum("nk,nkj->nj", b, vn)
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            for root, nrm in zip(roots, normals):
                s = trace_strand(root, nrm, field, inner_fast, outer_fast,
                                 cfg, bidirectional=False)
                if s is None:
                    # keep a stub so the root still offers a bridge target
                    s = Strand(np.stack([root, root + cfg.step * nrm]),
                               root_on_scalp=True)
                else:
                    s = Strand(s.vertices, root_on_scalp=True)
                scalp.append(s)
    return volume, scalp


def connect_to_scalp(volume: Sequence[Strand], scalp: Sequence[Strand],
                     inner: TriMesh, cfg: TraceConfig = None,
                     rng: np.random.Generator = None):
    """Bridge volume hairs to the scalp through nearby scalp hairs.

    Each volume hair walks its root end toward a randomly chosen scalp
    hair among the k nearest, then follows that hair down to its root.
    Returns (connected strands resampled to N_K, stats dict).
    """
    cfg = cfg or TraceConfig()
    rng = rng or np.random.default_rng(0)
    if len(volume) == 0:
        return [], {"connected": 0, "discarded": 0, "rate": 1.0}
    if len(scalp) == 0:
        raise ContractViolation("connect_to_scalp needs scalp hairs")

    # vertex-level index over all scalp hairs
    sv = np.concatenate([s.vertices for s in scalp])
    owner = np.concatenate([np.full(s.n_vertices, j)
                            for j, s in enumerate(scalp)])
    vidx = np.concatenate([np.arange(s.n_vertices) for s in scalp])
    tree = cKDTree(sv)

    out = []
    discarded = 0
    for s in volume:
        # orient the strand so the end closer to the scalp is the root
        d_first, _, _ = distance_to_mesh(s.vertices[0], inner)
        d_last, _, _ = distance_to_mesh(s.vertices[-1], inner)
        if abs(d_last) < abs(d_first):
            s = s.reversed()
            d_first = d_last
        root = s.vertices[0]
        if abs(d_first) <= 1e-3:
            out.append(resample_strand(Strand(s.vertices, True), N_K))
            continue
        k = min(cfg.connect_k * 8, len(sv))
        dists, nbr = tree.query(root, k=k)
        dists = np.atleast_1d(dists)
        nbr = np.atleast_1d(nbr)
        cand = []
        seen = set()
        for dd, ii in zip(dists, nbr):
            if dd > cfg.connect_radius:
                break
            oj = int(owner[ii])
            if oj in seen:
                continue
            seen.add(oj)
            cand.append((oj, int(vidx[ii])))
            if len(cand) == cfg.connect_k:
                break
        if not cand:
            discarded += 1
            continue
        oj, join = cand[rng.integers(0, len(cand))]
        target = scalp[oj].vertices[join]
        # walk from the volume root toward the junction in fixed steps
        walk = []
        p = root.copy()
        gap = target - p
        dist = np.linalg.norm(gap)
        while dist > cfg.step:
            p = p + cfg.step * gap / dist
            walk.append(p.copy())
            gap = target - p
            dist = np.linalg.norm(gap)
        # then follow the scalp hair down to its root
        tail = scalp[oj].vertices[join::-1]
        merged = np.concatenate([tail[::-1], np.asarray(walk)[::-1].reshape(-1, 3),
                                 s.vertices])
        out.append(resample_strand(Strand(merged, True), N_K))
    rate = len(out) / max(len(volume), 1)
    return out, {"connected": len(out), "discarded": discarded, "rate": rate}


def lift_parting_line(polyline_2d: np.ndarray, camera: Camera,
                      inner: TriMesh, samples_per_segment: int = 8):
    """Project an image-space polyline onto the inner mesh.

    Returns the lifted 3D points (may be empty when every ray misses).
    """
    pts2 = np.asarray(polyline_2d, dtype=np.float64)
    if len(pts2) == 0:
        return np.zeros((0, 3))
    dense = [pts2[0]]
    for a, b in zip(pts2[:-1], pts2[1:]):
        for s in range(1, samples_per_segment + 1):
            dense.append(a + (b - a) * s / samples_per_segment)
    lifted = []
    for p in dense:
        origin, direction = camera_ray(camera, p[0], p[1])
        hit = ray_mesh_intersect(inner, origin, direction)
        if hit is not None:
            lifted.append(origin + hit[0] * direction)
    return np.asarray(lifted).reshape(-1, 3)


def apply_parting_line(strands: Sequence[Strand], polyline_2d,
                       camera: Camera, inner: TriMesh,
                       cfg: TraceConfig = None):
    """Drop strands that cross the lifted parting curve near the scalp.

    A strand crosses when two consecutive vertices, both within the
    scalp-distance band, sit on opposite sides of the curve near one of
    its points. Returns (kept strands, removed count).
    """
    import warnings

    cfg = cfg or TraceConfig()
    pts2 = np.asarray(polyline_2d, dtype=np.float64).reshape(-1, 2)
    if len(pts2) == 0:
        return list(strands), 0
    curve = lift_parting_line(pts2, camera, inner)
    if len(curve) < 2:
        warnings.warn("parting line misses the scalp mesh; keeping all strands")
        return list(strands), 0
    tangents = np.gradient(curve, axis=0)
    tangents /= np.maximum(np.linalg.norm(tangents, axis=1, keepdims=True), 1e-12)
    tree = cKDTree(curve)
    lateral = max(4.0 * np.linalg.norm(np.diff(curve, axis=0), axis=1).max(),
                  cfg.parting_band)

    kept = []
    removed = 0
    for s in strands:
        d, _, nrm = distance_to_mesh(s.vertices, inner)
        near = np.abs(d) <= cfg.parting_band
        crossed = False
        if near.sum() >= 2:
            dist_c, j = tree.query(s.vertices)
            side_n = np.einsum("nj,nj->n", np.cross(tangents[j], nrm),
                               s.vertices - curve[j])
            cand = near & (dist_c <= lateral)
            for a in range(s.n_vertices - 1):
                if cand[a] and cand[a + 1] and side_n[a] * side_n[a + 1] < 0:
                    crossed = True
                    break
        if crossed:
            removed += 1
        else:
            kept.append(s)
    return kept, removed


def trace_report(volume, scalp, connected, stats) -> dict:
    """Summary statistics of a tracing run."""
    lengths = [s.length() for s in connected] or [0.0]
    return {
        "volume_hairs": len(volume),
        "scalp_hairs": len(scalp),
        "connected": stats.get("connected", 0),
        "discarded": stats.get("discarded", 0),
        "connection_rate": stats.get("rate", 0.0),
        "mean_length_m": float(np.mean(lengths)),
        "vertices_per_strand": N_K,
    }
