"""Per-subject linear strand latent space.

Strand geometry is expressed as root-relative vertex offsets and
compressed with a principal-component basis fit to the traced strands
of the same subject. Latents are whitened (divided by per-component
standard deviations) so an L1 penalty on them weighs all modes in
comparable units. The map is linear, so the Jacobian of vertices with
respect to the latent is a constant matrix available in closed form.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation, SpecParseError
from .strands import N_K, Strand

LATENT_DIM = 128

SLAT_MAGIC = b"SLAT"

ORTHO_TOL = 1e-6

# floor for zero-variance components; keeps whitening well defined when
# the training set has fewer independent strands than latent dimensions
_SCALE_FLOOR = 1e-8


@dataclass
class StrandLatentModel:
    """Linear latent space over root-relative strand offsets."""

    mean: np.ndarray    # (n_vertices - 1, 3)
    basis: np.ndarray   # (latent_dim, 3 * (n_vertices - 1)), orthonormal rows
    scales: np.ndarray  # (latent_dim,) per-component standard deviations

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.mean.ndim != 2 or self.mean.shape[1] != 3:
            raise ContractViolation("mean must be (n_vertices - 1, 3)")
        d = 3 * self.mean.shape[0]
        if self.basis.ndim != 2 or self.basis.shape[1] != d:
            raise ContractViolation("basis must be (latent_dim, 3*(n_vertices-1))")
        if self.scales.shape != (self.basis.shape[0],):
            raise ContractViolation("scales must match the latent dimension")
        if np.any(self.scales <= 0):
            raise ContractViolation("component scales must be positive")
        gram = self.basis @ self.basis.T
        if not np.allclose(gram, np.eye(len(gram)), atol=ORTHO_TOL):
            raise ContractViolation("basis rows must be orthonormal")

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0] + 1

    @property
    def jacobian(self) -> np.ndarray:
        """d(offset vector)/d(latent): (3*(n_vertices-1), latent_dim)."""
        return (self.basis * self.scales[:, None]).T


def _offsets(strands: Sequence[Strand], n_vertices: int) -> np.ndarray:
    rows = []
    for s in strands:
        if s.n_vertices != n_vertices:
            raise ContractViolation(
                f"strand has {s.n_vertices} vertices, model expects {n_vertices}")
        rows.append((s.vertices[1:] - s.vertices[0]).ravel())
    return np.asarray(rows)


def fit(strands: Sequence[Strand], latent_dim: int = LATENT_DIM) -> StrandLatentModel:
    """Fit the latent space to a strand set by principal components.

    With fewer independent strands than `latent_dim` the trailing basis
    rows span the data's null space and carry floor-valued scales; a
    warning records the reduced rank.
    """
    if len(strands) == 0:
        raise ContractViolation("cannot fit a latent model to zero strands")
    n_vertices = strands[0].n_vertices
    if n_vertices < 2:
        raise ContractViolation("strands must have at least 2 vertices")
    x = _offsets(strands, n_vertices)
    dim = x.shape[1]
    if latent_dim > dim:
        raise ContractViolation("latent dimension exceeds offset dimension")
    mean = x.mean(axis=0)
    xc = x - mean
    _, svals, vt = np.linalg.svd(xc, full_matrices=True)
    rank = int((svals > 1e-12 * max(svals[0], 1e-30)).sum()) if len(svals) else 0
    if rank < latent_dim:
        warnings.warn(
            f"latent model is rank {rank} < {latent_dim}; "
            "trailing components span the null space")
    basis = vt[:latent_dim]
    var = np.zeros(latent_dim)
    var[:min(latent_dim, len(svals))] = (svals[:latent_dim] ** 2) / len(x)
    scales = np.maximum(np.sqrt(var), _SCALE_FLOOR)
    return StrandLatentModel(mean.reshape(-1, 3), basis, scales)


def encode(model: StrandLatentModel, strand: Strand) -> np.ndarray:
    """Whitened latent of one strand."""
    off = _offsets([strand], model.n_vertices)[0]
    return (model.basis @ (off - model.mean.ravel())) / model.scales


def encode_batch(model: StrandLatentModel, strands: Sequence[Strand]) -> np.ndarray:
    off = _offsets(strands, model.n_vertices)
    return (off - model.mean.ravel()) @ model.basis.T / model.scales


def decode_offsets(model: StrandLatentModel, latents: np.ndarray) -> np.ndarray:
    """Root-relative offsets for latents (..., latent_dim) -> (..., n-1, 3)."""
    l = np.asarray(latents, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise ContractViolation("latent must be finite")
    off = model.mean.ravel() + (l * model.scales) @ model.basis
    return off.reshape(l.shape[:-1] + (model.n_vertices - 1, 3))


def decode(model: StrandLatentModel, latent: np.ndarray, root) -> Strand:
    """Strand with the given root whose offsets realize the latent."""
    root = np.asarray(root, dtype=np.float64).reshape(3)
    off = decode_offsets(model, np.asarray(latent).reshape(-1))
    return Strand(np.vstack([root, root + off]), root_on_scalp=True)


def save_model(path, model: StrandLatentModel) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", SLAT_MAGIC, model.n_vertices - 1,
                             model.latent_dim))
        fh.write(model.mean.astype("<f4").tobytes())
        fh.write(model.basis.astype("<f4").tobytes())
        fh.write(model.scales.astype("<f4").tobytes())


def load_model(path) -> StrandLatentModel:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise SpecParseError("truncated latent model header")
        magic, n_off, dim = struct.unpack("<4sII", head)
        if magic != SLAT_MAGIC:
            raise SpecParseError("not a strand latent model file")
        want = 3 * n_off + dim * 3 * n_off + dim
        payload = fh.read(4 * want)
        if len(payload) != 4 * want:
            raise SpecParseError("truncated latent model payload")
        raw = np.frombuffer(payload, dtype="<f4")
    mean = raw[:3 * n_off].astype(np.float64).reshape(n_off, 3)
    basis = raw[3 * n_off:3 * n_off + dim * 3 * n_off].astype(np.float64)
    basis = basis.reshape(dim, 3 * n_off)
    scales = raw[3 * n_off + dim * 3 * n_off:].astype(np.float64)
    # float32 storage loosens row orthonormality; restore it exactly so
    # the loaded model satisfies the same invariants as a fresh fit
    u, _, vt = np.linalg.svd(basis, full_matrices=False)
    basis = u @ vt
    return StrandLatentModel(mean, basis, scales)
