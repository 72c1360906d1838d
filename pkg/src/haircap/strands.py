"""Strand polylines: resampling and file formats.

A strand is an ordered polyline from root to tip. The pipeline's
canonical strand has exactly N_K = 100 vertices with uniform
consecutive spacing after resampling.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateStrandError, SpecParseError

N_K = 100

HAIR_MAGIC = b"HAIR"
HAIR_VERSION = 1

# chord spacing already uniform within this relative spread counts as
# resampled; re-resampling such a strand is an exact no-op
UNIFORM_TOL = 0.01

# internal redistribution passes target this much tighter spread
_ITER_TOL = 1e-3
_MAX_PASSES = 60


@dataclass
class Strand:
    """Ordered 3D polyline; vertices[0] is the root end."""

    vertices: np.ndarray
    root_on_scalp: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractViolation("strand vertices must be (n, 3)")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def length(self) -> float:
        if self.n_vertices < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())

    def reversed(self) -> "Strand":
        return Strand(self.vertices[::-1].copy(), self.root_on_scalp)


def _chord_spread(v: np.ndarray) -> float:
    """Relative spread (max-min)/mean of consecutive vertex spacings."""
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    m = seg.mean()
    if m == 0:
        return 0.0
    return float((seg.max() - seg.min()) / m)


def _eval_polyline(v: np.ndarray, cum: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Points at arc positions s along polyline v with cumulative lengths cum."""
    out = np.empty((len(s), 3))
    for k in range(3):
        out[:, k] = np.interp(s, cum, v[:, k])
    return out


def resample_strand(s: Strand, n: int = N_K) -> Strand:
    """Resample to n vertices with uniform consecutive spacing.

    Samples stay on the input polyline; their arc-length positions are
    redistributed iteratively until consecutive chords agree tightly
    (one pass is exact for straight runs, smooth strands need two or
    three). Endpoints are preserved exactly, and a strand that already
    has n uniformly spaced vertices is returned unchanged, so
    resampling is exactly idempotent.
    """
    if s.n_vertices < 2:
        raise ContractViolation("resampling needs at least 2 vertices")
    if n < 2:
        raise ContractViolation("resampling needs n >= 2")
    v = s.vertices
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    keep = seg > 0
    if not np.any(keep):
        raise DegenerateStrandError("zero-length strand")
    if s.n_vertices == n and np.all(keep) and _chord_spread(v) <= UNIFORM_TOL:
        return Strand(v.copy(), s.root_on_scalp)
    # drop zero-length segments (repeated vertices)
    v = np.concatenate([v[:1], v[1:][keep]], axis=0)
    cum = np.concatenate([[0.0], np.cumsum(seg[keep])])
    total = cum[-1]
    pos = np.linspace(0.0, total, n)
    out = _eval_polyline(v, cum, pos)
    for _ in range(_MAX_PASSES):
        if _chord_spread(out) <= _ITER_TOL:
            break
        # remap arc positions so current chord lengths even out
        chords = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(out, axis=0), axis=1))])
        pos = np.interp(np.linspace(0.0, chords[-1], n), chords, pos)
        out = _eval_polyline(v, cum, pos)
    out[0] = v[0]
    out[-1] = v[-1]
    return Strand(out, s.root_on_scalp)


def write_hair(path, strands: list[Strand]) -> None:
    """Strand binary: magic "HAIR", u32 version=1, u32 count, then per
    strand a u32 vertex count and float32 little-endian xyz triples."""
    with open(path, "wb") as fh:
        fh.write(HAIR_MAGIC)
        fh.write(struct.pack("<II", HAIR_VERSION, len(strands)))
        for s in strands:
            fh.write(struct.pack("<I", s.n_vertices))
            fh.write(s.vertices.astype("<f4").tobytes())


def read_hair(path, root_on_scalp: bool = True) -> list[Strand]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HAIR_MAGIC:
        raise SpecParseError(f"{path}: bad magic, not a strand binary")
    version, count = struct.unpack_from("<II", data, 4)
    if version != HAIR_VERSION:
        raise SpecParseError(f"{path}: unsupported strand binary version {version}")
    off = 12
    strands = []
    for _ in range(count):
        if off + 4 > len(data):
            raise SpecParseError(f"{path}: truncated strand binary")
        (nv,) = struct.unpack_from("<I", data, off)
        off += 4
        nbytes = nv * 12
        if off + nbytes > len(data):
            raise SpecParseError(f"{path}: truncated strand binary")
        pts = np.frombuffer(data, dtype="<f4", count=nv * 3, offset=off).reshape(nv, 3)
        off += nbytes
        strands.append(Strand(pts.astype(np.float64), root_on_scalp))
    return strands


def write_obj_polylines(path, strands: list[Strand]) -> None:
    """OBJ export with v records and one l (polyline) record per strand."""
    with open(path, "w") as fh:
        base = 1
        chunks = []
        for s in strands:
            for p in s.vertices:
                chunks.append(
                    f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        fh.write("".join(chunks))
        for s in strands:
            ids = " ".join(str(base + k) for k in range(s.n_vertices))
            fh.write(f"l {ids}\n")
            base += s.n_vertices
