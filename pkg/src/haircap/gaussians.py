"""Chained hair Gaussians and their parameter chain rule.

Each strand is optimized through exactly 162 numbers: a 128-d latent
for geometry, 8 anchor diameters, 8 anchor colors, and 2 opacities.
The latent decodes to 100 vertices; every segment becomes an
anisotropic Gaussian whose long axis follows the segment, with
diameter and color piecewise-linearly interpolated from the anchors
and the opacity split between a shaft value and a tip value for the
last segments. Body Gaussians are flat discs anchored to inner-mesh
vertices with only their radius optimizable.

Diameters and body radii live behind a softplus and opacities behind a
logistic, so gradient steps can never leave the valid range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .mesh import TriMesh
from .strands import N_K, Strand
from .strandlatent import StrandLatentModel, decode_offsets, encode

N_ANCHORS = 8
N_TIP = 8                       # tip segments sharing the second opacity
N_SEGMENTS = N_K - 1
PARAM_COUNT = 128 + N_ANCHORS + 3 * N_ANCHORS + 2  # = 162

BODY_THICKNESS = 1e-6           # meters; body discs are effectively flat
BODY_OPACITY = 0.95

_MIN_SEGMENT = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ContractViolation("softplus inverse needs positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ContractViolation("logit needs input in (0, 1)")
    return np.log(p) - np.log1p(-p)


def anchor_matrix(n_segments: int = N_SEGMENTS,
                  n_anchors: int = N_ANCHORS) -> np.ndarray:
    """(n_segments, n_anchors) piecewise-linear interpolation weights."""
    a = np.linspace(0.0, n_anchors - 1.0, n_segments)
    j0 = np.minimum(a.astype(np.int64), n_anchors - 2)
    w = a - j0
    m = np.zeros((n_segments, n_anchors))
    rows = np.arange(n_segments)
    m[rows, j0] = 1.0 - w
    m[rows, j0 + 1] += w
    return m


def opacity_matrix(n_segments: int = N_SEGMENTS,
                   n_tip: int = N_TIP) -> np.ndarray:
    """(n_segments, 2) selector: shaft opacity first, tip opacity last."""
    m = np.zeros((n_segments, 2))
    m[:n_segments - n_tip, 0] = 1.0
    m[n_segments - n_tip:, 1] = 1.0
    return m


_ANCHOR_M = anchor_matrix()
_OPACITY_M = opacity_matrix()


@dataclass
class ChainedGaussianStrand:
    """One strand's full optimizable state plus its fixed root."""

    root: np.ndarray            # (3,) fixed on the scalp
    latent: np.ndarray          # (latent_dim,)
    diam_raw: np.ndarray        # (N_ANCHORS,) softplus domain
    colors: np.ndarray          # (N_ANCHORS, 3) linear rgb
    opac_raw: np.ndarray        # (2,) logistic domain
    hat_latent: np.ndarray = None  # regularization target

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=np.float64).reshape(3)
        self.latent = np.asarray(self.latent, dtype=np.float64).reshape(-1)
        self.diam_raw = np.asarray(self.diam_raw, dtype=np.float64).reshape(N_ANCHORS)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(N_ANCHORS, 3)
        self.opac_raw = np.asarray(self.opac_raw, dtype=np.float64).reshape(2)
        if self.hat_latent is None:
            self.hat_latent = self.latent.copy()
        self.hat_latent = np.asarray(self.hat_latent, dtype=np.float64).reshape(-1)

    @property
    def n_params(self) -> int:
        return self.latent.size + self.diam_raw.size + self.colors.size + 2

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.latent, self.diam_raw,
                               self.colors.ravel(), self.opac_raw])

    def set_params(self, p: np.ndarray) -> None:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.n_params,):
            raise ContractViolation("parameter vector has the wrong length")
        n = self.latent.size
        self.latent = p[:n].copy()
        self.diam_raw = p[n:n + N_ANCHORS].copy()
        self.colors = p[n + N_ANCHORS:n + 4 * N_ANCHORS].reshape(N_ANCHORS, 3).copy()
        self.opac_raw = p[n + 4 * N_ANCHORS:].copy()

    @property
    def anchor_diameters(self) -> np.ndarray:
        return softplus(self.diam_raw)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opac_raw)


def init_strand(model: StrandLatentModel, strand: Strand,
                diameter: float = 2e-4, color=(0.35, 0.25, 0.18),
                opacities=(0.7, 0.4)) -> ChainedGaussianStrand:
    """Chained-Gaussian state encoding a traced strand."""
    lat = encode(model, strand)
    return ChainedGaussianStrand(
        root=strand.vertices[0],
        latent=lat,
        diam_raw=softplus_inv(np.full(N_ANCHORS, diameter)),
        colors=np.tile(np.asarray(color, dtype=np.float64), (N_ANCHORS, 1)),
        opac_raw=logit(np.asarray(opacities, dtype=np.float64)),
        hat_latent=lat.copy())


@dataclass
class GaussianPrimitive:
    """A single anisotropic Gaussian as seen by the renderer."""

    center: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray


def segment_covariances(e: np.ndarray, tau_l: np.ndarray,
                        tau_d: np.ndarray) -> np.ndarray:
    """C = tau_d^2 I + (tau_l^2 - tau_d^2) e e^T, batched over leading dims."""
    eye = np.eye(3)
    outer = e[..., :, None] * e[..., None, :]
    return (tau_d[..., None, None] ** 2 * eye
            + (tau_l[..., None, None] ** 2 - tau_d[..., None, None] ** 2) * outer)


def orthonormal_completion(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (e', e'') completing e to a right-handed frame."""
    e = np.asarray(e, dtype=np.float64)
    axis = np.zeros_like(e)
    least = np.argmin(np.abs(e), axis=-1)
    np.put_along_axis(axis, least[..., None], 1.0, axis=-1)
    ep = np.cross(axis, e)
    ep /= np.linalg.norm(ep, axis=-1, keepdims=True)
    return ep, np.cross(e, ep)


@dataclass
class StrandGaussianBatch:
    """Expanded per-segment Gaussian data for a strand set, with the
    intermediates the backward chain needs."""

    vertices: np.ndarray    # (N, N_K, 3)
    delta: np.ndarray       # (N, S, 3)
    length: np.ndarray      # (N, S)
    e: np.ndarray           # (N, S, 3) unit segment directions
    seg_diam: np.ndarray    # (N, S)
    centers: np.ndarray     # (N, S, 3)
    covs: np.ndarray        # (N, S, 3, 3)
    colors: np.ndarray      # (N, S, 3)
    opacities: np.ndarray   # (N, S)
    alive: np.ndarray       # (N, S) False where a segment degenerated

    @property
    def n_strands(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_segments(self) -> int:
        return self.delta.shape[1]

    def flat(self):
        """(centers, covs, colors, opacities) of live Gaussians plus the
        (strand, segment) index of each row."""
        idx = np.argwhere(self.alive)
        i, j = idx[:, 0], idx[:, 1]
        return (self.centers[i, j], self.covs[i, j], self.colors[i, j],
                self.opacities[i, j], i, j)


def expand_batch(strands: list[ChainedGaussianStrand],
                 model: StrandLatentModel) -> StrandGaussianBatch:
    """Decode and expand every strand into its chained Gaussians."""
    if len(strands) == 0:
        raise ContractViolation("expand_batch needs at least one strand")
    lat = np.stack([cs.latent for cs in strands])
    roots = np.stack([cs.root for cs in strands])
    off = decode_offsets(model, lat)
    verts = np.concatenate([roots[:, None], roots[:, None] + off], axis=1)

    delta = np.diff(verts, axis=1)
    length = np.linalg.norm(delta, axis=2)
    alive = length > _MIN_SEGMENT
    safe_len = np.maximum(length, _MIN_SEGMENT)
    e = delta / safe_len[..., None]

    diam_anchor = np.stack([cs.anchor_diameters for cs in strands])
    seg_diam = diam_anchor @ _ANCHOR_M.T
    col_anchor = np.stack([cs.colors for cs in strands])
    colors = np.einsum("sa,nac->nsc", _ANCHOR_M, col_anchor)
    opac = np.stack([cs.opacities for cs in strands])
    opacities = opac @ _OPACITY_M.T

    centers = 0.5 * (verts[:, :-1] + verts[:, 1:])
    covs = segment_covariances(e, length / 2.0, seg_diam / 2.0)
    return StrandGaussianBatch(verts, delta, length, e, seg_diam, centers,
                               covs, colors, opacities, alive)


def expand_strand(cs: ChainedGaussianStrand,
                  model: StrandLatentModel) -> list[GaussianPrimitive]:
    """Single-strand expansion as a list of primitives; degenerate
    (zero-length) segments are skipped."""
    batch = expand_batch([cs], model)
    out = []
    for j in range(batch.n_segments):
        if not batch.alive[0, j]:
            continue
        out.append(GaussianPrimitive(batch.centers[0, j], batch.covs[0, j],
                                     float(batch.opacities[0, j]),
                                     batch.colors[0, j]))
    return out


def backprop_batch(strands: list[ChainedGaussianStrand],
                   model: StrandLatentModel, batch: StrandGaussianBatch,
                   g_centers: np.ndarray, g_covs: np.ndarray,
                   g_colors: np.ndarray, g_opac: np.ndarray) -> np.ndarray:
    """Chain per-Gaussian gradients back to the (N, 162) parameter
    gradient. Inputs are dense (N, S, ...) arrays; rows where
    batch.alive is False are ignored."""
    n, s = batch.length.shape
    live = batch.alive[..., None]
    g_centers = np.where(live, g_centers, 0.0)
    g_colors = np.where(live, g_colors, 0.0)
    g_opac = np.where(batch.alive, g_opac, 0.0)
    g_covs = np.where(batch.alive[..., None, None], g_covs, 0.0)
    # symmetrize: C is symmetric, so only the symmetric part of the
    # incoming gradient is meaningful
    g_covs = 0.5 * (g_covs + np.swapaxes(g_covs, -1, -2))

    e = batch.e
    tau_l = batch.length / 2.0
    tau_d = batch.seg_diam / 2.0
    ce = np.einsum("nsab,nsb->nsa", g_covs, e)
    ece = np.einsum("nsa,nsa->ns", e, ce)
    tr = np.trace(g_covs, axis1=-2, axis2=-1)
    g_tau_l = 2.0 * tau_l * ece
    g_tau_d = 2.0 * tau_d * (tr - ece)
    g_e = 2.0 * (tau_l ** 2 - tau_d ** 2)[..., None] * ce

    # through e = delta/len and tau_l = len/2
    safe_len = np.maximum(batch.length, _MIN_SEGMENT)
    g_delta = (0.5 * g_tau_l[..., None] * e
               + (g_e - e * np.einsum("nsa,nsa->ns", e, g_e)[..., None])
               / safe_len[..., None])

    g_verts = np.zeros((n, s + 1, 3))
    g_verts[:, :-1] += 0.5 * g_centers - g_delta
    g_verts[:, 1:] += 0.5 * g_centers + g_delta

    # vertex 0 is the fixed root; offsets are vertices 1..N_K-1
    g_off = g_verts[:, 1:].reshape(n, -1)
    g_latent = g_off @ model.jacobian

    g_seg_diam = 0.5 * g_tau_d
    diam_raw = np.stack([cs.diam_raw for cs in strands])
    g_diam_raw = (g_seg_diam @ _ANCHOR_M) * sigmoid(diam_raw)

    g_col_anchor = np.einsum("sa,nsc->nac", _ANCHOR_M, g_colors)

    opac = np.stack([cs.opacities for cs in strands])
    g_opac2 = g_opac @ _OPACITY_M
    g_opac_raw = g_opac2 * opac * (1.0 - opac)

    return np.concatenate([g_latent, g_diam_raw,
                           g_col_anchor.reshape(n, -1), g_opac_raw], axis=1)


@dataclass
class BodyGaussians:
    """Flat key-colored discs anchored at inner-mesh vertices."""

    centers: np.ndarray     # (B, 3) mesh vertices, fixed
    normals: np.ndarray     # (B, 3) unit, fixed
    radii_raw: np.ndarray   # (B,) softplus domain, optimizable
    base_radii: np.ndarray  # (B,) regularization targets w-hat
    color: np.ndarray       # (3,) key color
    opacity: float = BODY_OPACITY

    @property
    def radii(self) -> np.ndarray:
        return softplus(self.radii_raw)

    @property
    def n_body(self) -> int:
        return len(self.centers)

    def covariances(self) -> np.ndarray:
        w = self.radii
        nn = self.normals[:, :, None] * self.normals[:, None, :]
        return (w[:, None, None] ** 2 * (np.eye(3) - nn)
                + BODY_THICKNESS ** 2 * nn)

    def backprop(self, g_covs: np.ndarray) -> np.ndarray:
        """Gradient on radii_raw from per-disc covariance gradients."""
        g_covs = 0.5 * (g_covs + np.swapaxes(g_covs, -1, -2))
        ncn = np.einsum("ba,bac,bc->b", self.normals, g_covs, self.normals)
        tr = np.trace(g_covs, axis1=-2, axis2=-1)
        g_w = 2.0 * self.radii * (tr - ncn)
        return g_w * sigmoid(self.radii_raw)


def build_body(mesh: TriMesh, color=(0.0, 0.85, 0.1)) -> BodyGaussians:
    """Body discs with initial radius = mean incident edge length."""
    v = mesh.vertices
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]])
    elen = np.linalg.norm(v[edges[:, 0]] - v[edges[:, 1]], axis=1)
    acc = np.zeros(len(v))
    cnt = np.zeros(len(v))
    for k in (0, 1):
        np.add.at(acc, edges[:, k], elen)
        np.add.at(cnt, edges[:, k], 1.0)
    base = acc / np.maximum(cnt, 1.0)
    base = np.maximum(base, 1e-6)
    return BodyGaussians(centers=v.copy(), normals=mesh.normals.copy(),
                         radii_raw=softplus_inv(base), base_radii=base.copy(),
                         color=np.asarray(color, dtype=np.float64))
