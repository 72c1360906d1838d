"""Per-pixel 2D orientation distributions from a bank of 64 Gabor filters.

Each pixel of a grayscale image gets a 64-bin histogram over line
angles eta in (0, pi]: the absolute responses of 64 oriented filters,
floored at the per-pixel median response and normalized. The median
floor matters — raw Gabor magnitudes never vanish, so without it flat
regions would produce misleadingly sharp distributions.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ContractViolation
from .histograms import DEFAULT_BINS, bin_centers
from .pngio import hsv_to_rgb

# filter defaults at working resolution (pixels)
DEFAULT_RADIUS = 8
DEFAULT_WAVELENGTH = 4.0
DEFAULT_SIGMA = 2.0
DEFAULT_ASPECT = 0.25


def gabor_kernel(angle: float, radius: int = DEFAULT_RADIUS,
                 wavelength: float = DEFAULT_WAVELENGTH,
                 sigma: float = DEFAULT_SIGMA,
                 aspect: float = DEFAULT_ASPECT) -> np.ndarray:
    """Even-symmetric Gabor tuned to lines at `angle`, zero-mean, unit L2.

    The carrier wave runs perpendicular to the line direction and the
    Gaussian envelope is elongated along it (aspect < 1 stretches the
    envelope by 1/aspect along the line). Pixel y points down, matching
    image-array indexing.
    """
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    # across-line coordinate (carrier direction) and along-line coordinate
    across = -x * np.sin(angle) + y * np.cos(angle)
    along = x * np.cos(angle) + y * np.sin(angle)
    envelope = np.exp(-(across ** 2 + (aspect * along) ** 2) / (2.0 * sigma ** 2))
    kern = envelope * np.cos(2.0 * np.pi * across / wavelength)
    kern -= kern.mean()
    return kern / np.linalg.norm(kern)


@dataclass
class FilterBank:
    """64 oriented kernels at angles k*pi/64, k = 1..64."""

    kernels: np.ndarray      # (64, 2r+1, 2r+1)
    angles: np.ndarray       # (64,) kernel line angles
    radius: int
    wavelength: float
    sigma: float
    aspect: float

    def __post_init__(self):
        means = np.abs(self.kernels.mean(axis=(1, 2)))
        if np.any(means > 1e-6):
            raise ContractViolation("filter kernels must be zero-mean")

    @property
    def n_filters(self) -> int:
        return self.kernels.shape[0]


def build_filter_bank(radius: int = DEFAULT_RADIUS,
                      wavelength: float = DEFAULT_WAVELENGTH,
                      aspect: float = DEFAULT_ASPECT,
                      sigma: float = DEFAULT_SIGMA,
                      n_filters: int = DEFAULT_BINS) -> FilterBank:
    if radius < 2:
        raise ContractViolation("filter radius must be >= 2")
    if wavelength <= 0:
        raise ContractViolation("wavelength must be positive")
    angles = (np.arange(1, n_filters + 1)) * (np.pi / n_filters)
    kernels = np.stack([gabor_kernel(a, radius, wavelength, sigma, aspect)
                        for a in angles])
    return FilterBank(kernels, angles, int(radius), float(wavelength),
                      float(sigma), float(aspect))


@dataclass
class OrientationMap:
    """Per-pixel normalized orientation histograms plus confidence.

    histograms: (h, w, 64) float; every pixel sums to 1.
    confidence: (h, w) max raw filter response magnitude (0 off-mask).
    mask: (h, w) bool hair mask the estimate ran on.
    """

    histograms: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.histograms.shape[2]

    def argmax_angle(self) -> np.ndarray:
        """Per-pixel angle of the strongest bin (bin centers)."""
        centers = bin_centers(self.n_bins)
        return centers[np.argmax(self.histograms, axis=2)]


def estimate_orientation_map(image: np.ndarray, bank: FilterBank,
                             mask: np.ndarray) -> OrientationMap:
    """Estimate the per-pixel orientation distribution on hair pixels.

    Off-mask pixels carry a uniform distribution with zero confidence.
    An empty mask warns and returns the all-uniform map.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractViolation("estimate_orientation_map expects grayscale input")
    hair = np.asarray(mask, dtype=bool)
    if hair.shape != img.shape:
        raise ContractViolation("image and mask sizes differ")
    h, w = img.shape
    nb = bank.n_filters
    if not np.any(hair):
        warnings.warn("empty hair mask: orientation map is uniform everywhere")
        return OrientationMap(np.full((h, w, nb), 1.0 / nb), np.zeros((h, w)), hair)

    # reflect padding keeps constant regions response-free at the borders
    padded = np.pad(img, bank.radius, mode="reflect")
    responses = np.empty((h, w, nb))
    for k in range(nb):
        responses[:, :, k] = np.abs(fftconvolve(padded, bank.kernels[k], mode="valid"))
    confidence = responses.max(axis=2)
    floored = responses - np.median(responses, axis=2, keepdims=True)
    np.maximum(floored, 0.0, out=floored)
    sums = floored.sum(axis=2, keepdims=True)
    # pixels with no real signal (relative to image contrast) stay uniform;
    # the relative threshold keeps the result contrast-invariant
    scale = float(img.max() - img.min())
    if scale == 0.0:
        flat = np.ones((h, w), dtype=bool)
    else:
        flat = sums[:, :, 0] <= 1e-9 * scale
    hist = np.where(flat[:, :, None], 1.0 / nb, floored / np.where(sums > 0, sums, 1.0))
    uniform = np.full(nb, 1.0 / nb)
    hist[~hair] = uniform
    confidence = np.where(hair, confidence, 0.0)
    return OrientationMap(hist, confidence, hair)


def save_orientation_map(prefix, omap: OrientationMap) -> None:
    """Write the map as three raw .npy files sharing a path prefix."""
    np.save(f"{prefix}_hist.npy", omap.histograms.astype(np.float32))
    np.save(f"{prefix}_conf.npy", omap.confidence.astype(np.float32))
    np.save(f"{prefix}_mask.npy", omap.mask)


def load_orientation_map(prefix) -> OrientationMap:
    hist = np.load(f"{prefix}_hist.npy").astype(np.float64)
    # renormalize away float32 quantization
    hist /= hist.sum(axis=2, keepdims=True)
    conf = np.load(f"{prefix}_conf.npy").astype(np.float64)
    mask = np.load(f"{prefix}_mask.npy")
    return OrientationMap(hist, conf, mask)


def orientation_debug_image(omap: OrientationMap) -> np.ndarray:
    """Hue-coded argmax-angle visualization (angle -> hue, confidence -> value)."""
    angle = omap.argmax_angle()
    hue = angle / np.pi
    cmax = omap.confidence.max()
    value = omap.confidence / cmax if cmax > 0 else np.zeros_like(omap.confidence)
    value = np.where(omap.mask, value, 0.0)
    sat = np.ones_like(hue)
    return hsv_to_rgb(hue, sat, value)
