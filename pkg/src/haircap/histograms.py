"""Discretized orientation distributions over (0, pi].

Both the 64-bin 2D histogram (image-plane line angles eta) and the
64x64 3D histogram (polar angle pairs (theta, phi)) share the same
binning: bin k (0-based) covers ((k) * pi/B, (k+1) * pi/B] with its
center at (k + 0.5) * pi/B.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

DEFAULT_BINS = 64

NORM_TOL = 1e-6


def bin_centers(n_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Angle at the center of each bin, shape (n_bins,)."""
    return (np.arange(n_bins) + 0.5) * (np.pi / n_bins)


def bin_index(angle, n_bins: int = DEFAULT_BINS):
    """Bin index for angles in (0, pi]. Upper edges are inclusive."""
    idx = np.ceil(np.asarray(angle) * (n_bins / np.pi)) - 1
    return np.clip(idx.astype(np.int64), 0, n_bins - 1)


def fold_angle(angle):
    """Fold an arbitrary angle into (0, pi] (undirectional line angle)."""
    a = np.mod(angle, np.pi)
    return np.where(a == 0.0, np.pi, a)


@dataclass
class OrientationHistogram2D:
    """Distribution over image-plane line angles eta in (0, pi]."""

    bins: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.bins.ndim != 1:
            raise ContractViolation("2D histogram bins must be a 1-d array")
        if np.any(self.bins < 0):
            raise ContractViolation("histogram bins must be nonnegative")
        if self.normalized and abs(self.bins.sum() - 1.0) > NORM_TOL:
            raise ContractViolation("histogram flagged normalized but does not sum to 1")

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    def total(self) -> float:
        return float(self.bins.sum())

    def normalize(self) -> "OrientationHistogram2D":
        s = self.bins.sum()
        if s <= 0:
            raise ContractViolation("cannot normalize an all-zero histogram")
        return OrientationHistogram2D(self.bins / s, normalized=True)


@dataclass
class OrientationHistogram3D:
    """Distribution over polar angle pairs (theta, phi) in (0, pi]^2.

    bins[i, j] holds mass for theta bin i, phi bin j.
    """

    bins: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        if self.bins.ndim != 2 or self.bins.shape[0] != self.bins.shape[1]:
            raise ContractViolation("3D histogram bins must be a square 2-d array")
        if np.any(self.bins < 0):
            raise ContractViolation("histogram bins must be nonnegative")
        if self.normalized and abs(self.bins.sum() - 1.0) > NORM_TOL:
            raise ContractViolation("histogram flagged normalized but does not sum to 1")

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]

    def total(self) -> float:
        return float(self.bins.sum())

    def normalize(self) -> "OrientationHistogram3D":
        s = self.bins.sum()
        if s <= 0:
            raise ContractViolation("cannot normalize an all-zero histogram")
        return OrientationHistogram3D(self.bins / s, normalized=True)

    def peak(self) -> tuple[int, int]:
        """(theta_bin, phi_bin) of the global maximum."""
        flat = int(np.argmax(self.bins))
        return flat // self.n_bins, flat % self.n_bins


def find_peaks_circular(values: np.ndarray, min_fraction: float = 0.3,
                        neighborhood: int = 2) -> list[int]:
    """Indices of local maxima of a circular 1-d histogram.

    A bin is a peak if it is the strict maximum of its +-neighborhood
    (circularly) and reaches at least min_fraction of the global max.
    Plateaus keep only their first bin.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if n == 0 or v.max() <= 0:
        return []
    floor = min_fraction * v.max()
    peaks = []
    for i in range(n):
        if v[i] < floor:
            continue
        window = v[(i + np.arange(-neighborhood, neighborhood + 1)) % n]
        if v[i] < window.max():
            continue
        # plateau: keep the first index of a run of equal maxima
        if v[(i - 1) % n] == v[i]:
            continue
        peaks.append(i)
    return peaks
