"""Procedural target imagery and target loading.

Standard test photographs are not bundled; these generators provide
deterministic stand-ins (checker, gradient, noise texture) so experiments
run hermetically. Arbitrary image paths are accepted as well.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def checker(shape: tuple[int, int], block: int = 16, low: float = 0.0,
            high: float = 255.0) -> np.ndarray:
    h, w = shape
    yy, xx = np.meshgrid(np.arange(h) // block, np.arange(w) // block,
                         indexing="ij")
    return np.where((yy + xx) % 2 == 0, high, low).astype(float)


def gradient(shape: tuple[int, int], axis: str = "x") -> np.ndarray:
    h, w = shape
    if axis == "x":
        ramp = np.linspace(0.0, 255.0, w)
        return np.tile(ramp, (h, 1))
    ramp = np.linspace(0.0, 255.0, h)
    return np.tile(ramp[:, None], (1, w))


def stripes(shape: tuple[int, int], period: int = 24, axis: str = "x",
            low: float = 0.0, high: float = 255.0) -> np.ndarray:
    h, w = shape
    coord = np.arange(w) if axis == "x" else np.arange(h)
    line = np.where((coord // (period // 2)) % 2 == 0, high, low).astype(float)
    return np.tile(line, (h, 1)) if axis == "x" else np.tile(line[:, None], (1, w))


def noise_texture(shape: tuple[int, int], seed: int = 0, octaves: int = 4
                  ) -> np.ndarray:
    """Multi-octave smoothed noise stretched to the full [0, 255] range."""
    rng = np.random.default_rng(seed)
    h, w = shape
    img = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        gh = max(2, h >> (octaves - 1 - o))
        gw = max(2, w >> (octaves - 1 - o))
        coarse = rng.standard_normal((gh, gw))
        img += amp * np.asarray(
            Image.fromarray(coarse).resize((w, h), Image.BILINEAR)
        )
        amp *= 0.55
    lo, hi = img.min(), img.max()
    return (img - lo) * (255.0 / (hi - lo))


_GENERATORS = {
    "checker": checker,
    "gradient": gradient,
    "stripes": stripes,
    "noise": noise_texture,
}


def procedural_target(kind: str, shape: tuple[int, int], **params) -> np.ndarray:
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown procedural target kind {kind!r}") from None
    return gen(shape, **params)


def load_target_image(path, shape: tuple[int, int]) -> np.ndarray:
    """Load an image file and resize it to the camera raster (float [0,255])."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    h, w = shape
    img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=float)


def resolve_target(spec, shape: tuple[int, int]) -> np.ndarray:
    """Turn a target binding (array, file path, or procedural dict) into a raster."""
    if isinstance(spec, np.ndarray):
        return np.asarray(spec, dtype=float)
    if isinstance(spec, dict):
        params = {k: v for k, v in spec.items() if k != "procedural"}
        return procedural_target(spec["procedural"], shape, **params)
    if isinstance(spec, (str, Path)):
        return load_target_image(spec, shape)
    raise TypeError(f"cannot resolve target spec of type {type(spec)!r}")


def save_image_8bit(array: np.ndarray, path) -> None:
    """Export a float raster as an 8-bit PNG (clamped and rounded)."""
    arr = np.clip(np.asarray(array, dtype=float), 0.0, 255.0)
    arr = np.rint(arr).astype(np.uint8)
    Image.fromarray(arr).save(path)
