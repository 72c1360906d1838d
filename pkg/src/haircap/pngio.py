"""PNG image and label-mask IO (8- and 16-bit) via Pillow."""

import numpy as np
from PIL import Image

from .errors import SpecParseError


def read_image(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]; RGB images return (h, w, 3)."""
    img = Image.open(path)
    if img.mode in ("I", "I;16", "I;16B"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    elif img.mode in ("L", "RGB"):
        arr = np.asarray(img, dtype=np.float64) / 255.0
    elif img.mode in ("RGBA", "LA"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    else:
        raise SpecParseError(f"{path}: unsupported PNG mode {img.mode}")
    return arr


def write_image(path, arr: np.ndarray, bitdepth: int = 8) -> None:
    """Save a float array in [0, 1] (grayscale or RGB) as PNG."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if bitdepth == 16:
        if a.ndim == 3:
            raise SpecParseError("16-bit PNG export supports grayscale only")
        img = Image.fromarray((a * 65535.0 + 0.5).astype(np.uint16), mode="I;16")
    else:
        img = Image.fromarray((a * 255.0 + 0.5).astype(np.uint8))
    img.save(path)


def read_mask(path) -> np.ndarray:
    """Load a label mask PNG with values {0 background, 1 hair, 2 body}."""
    img = Image.open(path)
    arr = np.asarray(img.convert("L") if img.mode not in ("L", "P") else img)
    if img.mode == "P":
        arr = np.asarray(img.convert("L"))
    labels = np.unique(arr)
    if labels.max() > 2:
        raise SpecParseError(f"{path}: mask labels must be in {{0,1,2}}, got up to {labels.max()}")
    return arr.astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.min() < 0 or m.max() > 2:
        raise SpecParseError("mask labels must be in {0,1,2}")
    Image.fromarray(m.astype(np.uint8), mode="L").save(path)


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    """ITU-R BT.709 luma for an RGB array; grayscale passes through."""
    if arr.ndim == 2:
        return arr
    return arr[..., 0] * 0.2126 + arr[..., 1] * 0.7152 + arr[..., 2] * 0.0722


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, all components in [0, 1]."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    out = np.zeros(h.shape + (3,))
    combos = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for k, (r, g, b) in enumerate(combos):
        sel = i == k
        out[sel, 0] = np.broadcast_to(r, h.shape)[sel]
        out[sel, 1] = np.broadcast_to(g, h.shape)[sel]
        out[sel, 2] = np.broadcast_to(b, h.shape)[sel]
    return out
