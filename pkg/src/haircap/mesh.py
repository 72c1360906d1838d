"""Triangle meshes: OBJ IO, exact distance queries, inside tests.

Distance queries are exact: a centroid k-d tree proposes candidate
triangles, the candidate set is grown until a conservative radius bound
proves no closer triangle exists, and the true minimum is taken over
exact point-triangle distances. Signs come from the generalized
winding number, which is +-4*pi inside a watertight mesh and 0 outside.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation, SpecParseError

NORMAL_TOL = 1e-6


def _face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - a
    e2 = vertices[faces[:, 2]] - a
    n = np.cross(e1, e2)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lens, 1e-30)


def _vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized cross products sum)."""
    a = vertices[faces[:, 0]]
    cr = np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], cr)
    lens = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.maximum(lens, 1e-30)


@dataclass
class TriMesh:
    """Immutable triangle mesh with per-vertex unit normals."""

    vertices: np.ndarray   # (V, 3) meters
    faces: np.ndarray      # (F, 3) int indices
    normals: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractViolation("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ContractViolation("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractViolation("face indices out of range")
        if self.normals is None:
            self.normals = _vertex_normals(self.vertices, self.faces)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.vertices.shape:
                raise ContractViolation("normals must match vertices")
            lens = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-3):
                raise ContractViolation("vertex normals must be unit length")
            # tighten to spec tolerance
            self.normals = self.normals / lens[:, None]
        self._cache = {}

    # -- cached derived data -------------------------------------------------

    @property
    def face_normals(self) -> np.ndarray:
        if "fn" not in self._cache:
            self._cache["fn"] = _face_normals(self.vertices, self.faces)
        return self._cache["fn"]

    @property
    def centroids(self) -> np.ndarray:
        if "cen" not in self._cache:
            self._cache["cen"] = self.vertices[self.faces].mean(axis=1)
        return self._cache["cen"]

    @property
    def centroid_tree(self) -> cKDTree:
        if "tree" not in self._cache:
            self._cache["tree"] = cKDTree(self.centroids)
        return self._cache["tree"]

    @property
    def circumradius(self) -> float:
        """Max distance from any centroid to its triangle's vertices."""
        if "rad" not in self._cache:
            d = np.linalg.norm(self.vertices[self.faces] - self.centroids[:, None, :], axis=2)
            self._cache["rad"] = float(d.max()) if d.size else 0.0
        return self._cache["rad"]

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two opposed triangles."""
        if "wt" not in self._cache:
            f = self.faces
            edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
            und = np.sort(edges, axis=1)
            _, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
            ok = bool(np.all(counts == 2))
            if ok:
                # opposed orientation: the two directed copies must differ
                order = np.lexsort((edges[:, 1], edges[:, 0]))
                dire, dcount = np.unique(edges[order], axis=0, return_counts=True)
                ok = bool(np.all(dcount == 1))
            self._cache["wt"] = ok
        return self._cache["wt"]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def point_triangle_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray,
                            c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact closest point on triangle (a, b, c) for each row of points.

    Vectorized Voronoi-region walk; returns (distance, closest point,
    barycentric coordinates), each (n, ...).
    """
    p = np.asarray(points, dtype=np.float64)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    eps = 1e-30
    # edge parameters with guarded denominators
    t_ab = d1 / np.where(np.abs(d1 - d3) < eps, eps, d1 - d3)
    t_ac = d2 / np.where(np.abs(d2 - d6) < eps, eps, d2 - d6)
    denom_bc = (d4 - d3) + (d5 - d6)
    t_bc = (d4 - d3) / np.where(np.abs(denom_bc) < eps, eps, denom_bc)
    denom_in = va + vb + vc
    inv = 1.0 / np.where(np.abs(denom_in) < eps, eps, denom_in)
    v_in = vb * inv
    w_in = vc * inv

    n = p.shape[0]
    bary = np.empty((n, 3))
    # assemble in reverse priority so earlier regions overwrite later ones
    bary[:, 0] = 1.0 - v_in - w_in
    bary[:, 1] = v_in
    bary[:, 2] = w_in

    reg_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    bary[reg_bc] = np.stack([np.zeros(n), 1.0 - t_bc, t_bc], axis=1)[reg_bc]
    reg_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    bary[reg_ac] = np.stack([1.0 - t_ac, np.zeros(n), t_ac], axis=1)[reg_ac]
    reg_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    bary[reg_ab] = np.stack([1.0 - t_ab, t_ab, np.zeros(n)], axis=1)[reg_ab]
    reg_c = (d6 >= 0) & (d5 <= d6)
    bary[reg_c] = [0.0, 0.0, 1.0]
    reg_b = (d3 >= 0) & (d4 <= d3)
    bary[reg_b] = [0.0, 1.0, 0.0]
    reg_a = (d1 <= 0) & (d2 <= 0)
    bary[reg_a] = [1.0, 0.0, 0.0]

    closest = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    dist = np.linalg.norm(p - closest, axis=1)
    return dist, closest, bary


def _nearest_on_mesh(mesh: TriMesh, points: np.ndarray, k: int = 8):
    """Exact nearest surface point per query via centroid-tree candidates.

    Candidate sets grow until the k-th centroid distance exceeds the
    best exact distance plus the mesh circumradius, which certifies no
    closer triangle exists outside the set.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = pts.shape[0]
    nf = len(mesh.faces)
    tree = mesh.centroid_tree
    rad = mesh.circumradius
    tri = mesh.vertices[mesh.faces]

    best_d = np.full(n, np.inf)
    best_pt = np.zeros((n, 3))
    best_face = np.zeros(n, dtype=np.int64)
    best_bary = np.zeros((n, 3))
    pending = np.arange(n)
    kk = min(k, nf)
    while pending.size:
        cd, ci = tree.query(pts[pending], k=kk)
        if kk == 1:
            cd, ci = cd[:, None], ci[:, None]
        flat_pts = np.repeat(pts[pending], kk, axis=0)
        flat_tri = tri[ci.ravel()]
        d, cp, bc = point_triangle_distance(flat_pts, flat_tri[:, 0], flat_tri[:, 1], flat_tri[:, 2])
        d = d.reshape(-1, kk)
        idx = np.argmin(d, axis=1)
        rows = np.arange(pending.size)
        best_d[pending] = d[rows, idx]
        sel = rows * kk + idx
        best_pt[pending] = cp[sel]
        best_bary[pending] = bc[sel]
        best_face[pending] = ci[rows, idx]
        # certified iff the farthest candidate centroid is beyond any
        # centroid whose triangle could still undercut the current best
        certified = (cd[:, -1] >= best_d[pending] + rad) | (kk == nf)
        pending = pending[~certified]
        kk = min(kk * 4, nf)
    return best_d, best_pt, best_face, best_bary


def winding_number(mesh: TriMesh, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Generalized winding number (in units of 4*pi) at each point."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        p = pts[s:s + chunk]
        a = tri[None, :, 0, :] - p[:, None, :]
        b = tri[None, :, 1, :] - p[:, None, :]
        c = tri[None, :, 2, :] - p[:, None, :]
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        det = np.einsum("ptj,ptj->pt", a, np.cross(b, c))
        denom = (la * lb * lc + np.einsum("ptj,ptj->pt", a, b) * lc
                 + np.einsum("ptj,ptj->pt", b, c) * la
                 + np.einsum("ptj,ptj->pt", c, a) * lb)
        omega = 2.0 * np.arctan2(det, denom)
        out[s:s + chunk] = omega.sum(axis=1)
    return out / (4.0 * np.pi)


def contains(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Inside test for a watertight mesh via winding number."""
    return np.abs(winding_number(mesh, points)) > 0.5


def distance_to_mesh(p, mesh: TriMesh, signed: bool = True):
    """Signed distance, nearest surface point, and surface normal at p.

    Negative inside. The normal is the barycentric interpolation of the
    vertex normals at the nearest point (renormalized), which stays
    continuous across edges. Signed queries require a watertight mesh.
    """
    single = np.asarray(p).ndim == 1
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if signed and not mesh.is_watertight():
        raise ContractViolation("signed distance requires a watertight mesh")
    d, cp, face, bary = _nearest_on_mesh(mesh, pts)
    vn = mesh.normals[mesh.faces[face]]          # (n, 3 verts, 3)
    nrm = np.einsum("nk,nkj->nj", bary, vn)
    lens = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(lens > 1e-12, nrm / np.maximum(lens, 1e-30),
                   mesh.face_normals[face])
    if signed:
        inside = contains(mesh, pts)
        d = np.where(inside, -d, d)
    if single:
        return float(d[0]), cp[0], nrm[0]
    return d, cp, nrm


# -- OBJ IO -------------------------------------------------------------------

def read_obj(path) -> TriMesh:
    """Read the v/vn/f subset of Wavefront OBJ. Polygons are fan-split."""
    verts, norms, faces = [], [], []
    nidx = {}
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                ids = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    if vi < 0:
                        vi = len(verts) + 1 + vi
                    ids.append(vi - 1)
                    if len(fields) == 3 and fields[2]:
                        ni = int(fields[2])
                        nidx[vi - 1] = (len(norms) + ni if ni < 0 else ni - 1)
                for k in range(1, len(ids) - 1):
                    faces.append([ids[0], ids[k], ids[k + 1]])
    if not verts or not faces:
        raise SpecParseError(f"OBJ file {path} has no triangles")
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int64)
    n = None
    if norms and len(nidx) == len(verts):
        nn = np.array(norms, dtype=np.float64)
        n = np.zeros_like(v)
        for vi, ni in nidx.items():
            n[vi] = nn[ni]
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.maximum(lens, 1e-30)
    return TriMesh(v, f, n)


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for n in mesh.normals:
            fh.write(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}\n")


# -- Icosphere ---------------------------------------------------------------

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)

_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0),
              scale=None) -> TriMesh:
    """Watertight geodesic sphere (optionally anisotropically scaled).

    `scale` is an optional per-axis multiplier applied before `radius`,
    turning the sphere into an ellipsoid; normals are recomputed.
    """
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    v = verts * radius
    if scale is not None:
        v = v * np.asarray(scale, dtype=np.float64)
    v = v + np.asarray(center, dtype=np.float64)
    return TriMesh(v, faces)


def _subdivide(verts: np.ndarray, faces: np.ndarray):
    cache = {}
    verts = [v for v in verts]

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    out = []
    for (a, b, c) in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(out, dtype=np.int64)


# -- Distance grid accelerator -------------------------------------------------

class DistanceGrid:
    """Trilinearly interpolated signed-distance samples on a lattice.

    An approximate accelerator for the tracing inner/outer mesh queries;
    exact queries go through distance_to_mesh. Lattice nodes sit at the
    corners of an (n-1)^3 cell grid spanning the padded mesh bounds.
    """

    def __init__(self, mesh: TriMesh, resolution: int = 48, padding: float = None):
        lo, hi = mesh.bounds()
        if padding is None:
            padding = 0.1 * float((hi - lo).max())
        self.lo = lo - padding
        self.hi = hi + padding
        self.res = int(resolution)
        axes = [np.linspace(self.lo[k], self.hi[k], self.res) for k in range(3)]
        self.spacing = (self.hi - self.lo) / (self.res - 1)
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        d, _, _, _ = _nearest_on_mesh(mesh, nodes)
        signs = self._flood_signs(mesh, nodes, d)
        self.values = (d * signs).reshape(self.res, self.res, self.res)

    def _flood_signs(self, mesh: TriMesh, nodes: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Winding number on a thin shell, sign-flooded elsewhere.

        Safe propagation: an edge between lattice neighbors cannot cross
        the surface when either endpoint is farther from the surface
        than one cell diagonal, so signs spread freely there.
        """
        h = float(np.linalg.norm(self.spacing))
        res = self.res
        d3 = d.reshape(res, res, res)
        shell = d3 <= 1.5 * h
        signs = np.zeros((res, res, res))
        if np.any(shell):
            w = winding_number(mesh, nodes[shell.ravel()])
            signs[shell] = np.where(np.abs(w) > 0.5, -1.0, 1.0)
        else:
            # grid entirely far from surface: single winding probe decides all
            w = winding_number(mesh, nodes[:1])
            return np.full(d.shape, -1.0 if abs(w[0]) > 0.5 else 1.0)
        while np.any(signs == 0.0):
            prev = signs.copy()
            for axis in range(3):
                for shift in (1, -1):
                    neighbor = np.roll(prev, shift, axis=axis)
                    # rolled wrap-around rows are invalidated
                    idx = [slice(None)] * 3
                    idx[axis] = 0 if shift == 1 else -1
                    neighbor[tuple(idx)] = 0.0
                    take = (signs == 0.0) & (neighbor != 0.0)
                    signs[take] = neighbor[take]
            if np.array_equal(prev, signs) and np.any(signs == 0.0):
                # isolated pocket: resolve by direct winding probes
                rem = signs == 0.0
                w = winding_number(mesh, nodes[rem.ravel()])
                signs[rem] = np.where(np.abs(w) > 0.5, -1.0, 1.0)
        return signs.ravel()

    def _locate(self, points: np.ndarray):
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        u = (p - self.lo) / self.spacing
        u = np.clip(u, 0.0, self.res - 1.000001)
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        return i0, f

    def signed(self, points) -> np.ndarray:
        """Trilinearly interpolated signed distance (negative inside)."""
        i0, f = self._locate(points)
        V = self.values
        out = np.zeros(i0.shape[0])
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    out += wx * wy * wz * V[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out

    def signed_gradient(self, points) -> np.ndarray:
        """Exact gradient of the trilinear interpolation (unnormalized)."""
        i0, f = self._locate(points)
        V = self.values
        g = np.zeros((i0.shape[0], 3))
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            sx = (1.0 if dx else -1.0) / self.spacing[0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                sy = (1.0 if dy else -1.0) / self.spacing[1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    sz = (1.0 if dz else -1.0) / self.spacing[2]
                    v = V[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                    g[:, 0] += sx * wy * wz * v
                    g[:, 1] += wx * sy * wz * v
                    g[:, 2] += wx * wy * sz * v
        return g

    def gradient(self, points) -> np.ndarray:
        """Unit outward normal estimate via central differences."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = np.zeros_like(p)
        for k in range(3):
            h = self.spacing[k]
            dp = np.zeros(3)
            dp[k] = 0.5 * h
            g[:, k] = (self.signed(p + dp) - self.signed(p - dp)) / h
        lens = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.maximum(lens, 1e-30)


def ray_mesh_intersect(mesh: TriMesh, origin, direction):
    """First hit of a ray against the mesh (Moller-Trumbore over all
    triangles). Returns (t, face index) or None when the ray misses."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = np.einsum("fj,fj->f", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - tri[:, 0]
    u = np.einsum("fj,fj->f", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = d @ qvec.T * inv
    t = np.einsum("fj,fj->f", e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
    if not hit.any():
        return None
    idx = np.flatnonzero(hit)
    best = idx[np.argmin(t[idx])]
    return float(t[best]), int(best)
