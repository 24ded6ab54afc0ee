"""Image writers and flow visualisation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image


def to_uint8(img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """(C,H,W) or (H,W) float image in [lo, hi] -> (H,W,3) uint8."""
    a = np.asarray(img, dtype=float)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = np.repeat(a, 3, axis=2)
    else:
        a = np.repeat(a[..., None], 3, axis=2)
    a = (np.clip(a, lo, hi) - lo) / (hi - lo)
    return np.round(a * 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6) writer for an (H,W,3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def save_image(path, img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> Path:
    """Save a float image; the suffix picks the format (.ppm or anything PIL knows)."""
    path = Path(path)
    rgb = img if np.asarray(img).dtype == np.uint8 else to_uint8(img, lo, hi)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, rgb)
    else:
        Image.fromarray(rgb).save(path)
    return path


def flow_to_rgb(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel encoding: hue is direction, saturation is magnitude / max magnitude."""
    u, v = np.asarray(flow, dtype=float)
    mag = np.hypot(u, v)
    top = mag.max() if max_mag is None else max_mag
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / top, 0, 1) if top > 0 else np.zeros_like(mag)
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    """Heat map of a [0,1] mask using the inferno colormap."""
    from matplotlib import colormaps

    m = np.clip(np.asarray(mask, dtype=float).reshape(mask.shape[-2:]), 0, 1)
    return np.round(colormaps["inferno"](m)[..., :3] * 255).astype(np.uint8)
