"""Forward simulation of solved patterns and image-quality metrics.

Rendering shares its physics with the assembled sparse system: per camera
pixel the projector contributions are summed with the same normalized
attenuation weights, so rendering a solution equals the row-wise
matrix-vector product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import SceneDescription
from .system import InverseProjectionMap, PatternImage, TargetImage, _raw_weights


@dataclass
class RecombinedImage:
    """Simulated superposition of all projectors on one surface."""

    surface: int
    image: np.ndarray  # camera raster, float
    mask: np.ndarray  # (h, w) bool: on the surface and lit by >= 1 projector


@dataclass
class QualityReport:
    surface: int
    psnr: float
    ssim: float
    value_span: float  # range of the drive values that produced the image


def _render_weights(qmap: InverseProjectionMap, convention: str):
    """Per (pixel, projector) normalized weights matching system assembly."""
    dist = np.moveaxis(qmap.geometry.dist, 0, -1)
    cos = np.moveaxis(qmap.geometry.cosine, 0, -1)
    valid = (qmap.q > 0) & (cos > 0) & (dist > 0)
    w = np.zeros_like(dist)
    w[valid] = _raw_weights(dist[valid], cos[valid], convention)
    scale = float(w[valid].mean()) if valid.any() else 1.0
    return w / scale, valid, scale


def render_patterns(
    scene: SceneDescription,
    qmap: InverseProjectionMap,
    patterns: list[PatternImage],
    convention: Optional[str] = None,
    weight_scale: Optional[float] = None,
) -> list[RecombinedImage]:
    """Project solved patterns onto the scene as seen by the camera.

    Negative drive values clamp to 0 here (light cannot be subtracted).
    ``weight_scale`` overrides the weight normalization constant; by default
    it is recomputed and matches what :func:`multiproj.system.assemble` used.
    """
    if len(patterns) != len(scene.projectors):
        raise ValueError("need one pattern per projector")
    convention = convention or scene.convention
    w, valid, scale = _render_weights(qmap, convention)
    if weight_scale is not None:
        w = w * (scale / weight_scale)

    geometry = qmap.geometry
    h, wd = geometry.camera_shape
    nch = max(
        1 if p.values.ndim == 2 else p.values.shape[2] for p in patterns
    )
    shape = (h, wd) if nch == 1 else (h, wd, nch)
    accum = np.zeros(shape)
    albedo = np.array([s.albedo for s in scene.surfaces])

    for j, pat in enumerate(patterns):
        vals = np.clip(pat.values, 0.0, None)
        flat = vals.reshape(-1) if vals.ndim == 2 else vals.reshape(-1, vals.shape[2])
        vj = valid[..., j]
        idx = qmap.q[..., j][vj] - 1
        contrib = flat[idx] * (
            w[..., j][vj] if nch == 1 else w[..., j][vj][:, None]
        )
        accum[vj] += contrib

    lit_any = valid.any(axis=-1)
    alb = albedo[geometry.surface.clip(min=0)]
    accum *= alb[..., None] if nch > 1 else alb

    out = []
    for si in range(len(scene.surfaces)):
        smask = lit_any & (geometry.surface == si)
        img = np.zeros_like(accum)
        img[smask] = accum[smask]
        out.append(RecombinedImage(surface=si, image=img, mask=smask))
    return out


def psnr(reference: np.ndarray, test: np.ndarray, mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over the masked pixels (peak 255)."""
    reference = np.asarray(reference, dtype=float)
    test = np.asarray(test, dtype=float)
    if reference.shape != test.shape:
        raise ValueError("image shapes must match")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    diff = (reference - test)[mask]
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _window_sums(img: np.ndarray, win: int) -> np.ndarray:
    """Sums over all win x win windows via an integral image."""
    ii = np.cumsum(np.cumsum(img, axis=0), axis=1)
    ii = np.pad(ii, ((1, 0), (1, 0)))
    return (
        ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win]
    )


def _ssim_channel(ref, test, mask, win, c1, c2) -> float:
    n = win * win
    counts = _window_sums(mask.astype(float), win)
    full = counts >= n - 0.5
    if not full.any():
        # masked region smaller than a window: treat it as a single window
        x = ref[mask]
        y = test[mask]
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return float(
            ((2 * mx * my + c1) * (2 * cov + c2))
            / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        )
    rm = np.where(mask, ref, 0.0)
    tm = np.where(mask, test, 0.0)
    sx = _window_sums(rm, win)[full] / n
    sy = _window_sums(tm, win)[full] / n
    sxx = _window_sums(rm**2, win)[full] / n - sx**2
    syy = _window_sums(tm**2, win)[full] / n - sy**2
    sxy = _window_sums(rm * tm, win)[full] / n - sx * sy
    num = (2 * sx * sy + c1) * (2 * sxy + c2)
    den = (sx**2 + sy**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(
    reference: np.ndarray,
    test: np.ndarray,
    mask: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 255.0,
) -> float:
    """Mean local SSIM over fully mask-covered 8x8 windows."""
    reference = np.asarray(reference, dtype=float)
    test = np.asarray(test, dtype=float)
    if reference.shape != test.shape:
        raise ValueError("image shapes must match")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    if reference.ndim == 2:
        return _ssim_channel(reference, test, mask, window, c1, c2)
    vals = [
        _ssim_channel(reference[..., ch], test[..., ch], mask, window, c1, c2)
        for ch in range(reference.shape[2])
    ]
    return float(np.mean(vals))


def evaluate_patterns(
    scene: SceneDescription,
    qmap: InverseProjectionMap,
    patterns: list[PatternImage],
    per_channel_targets: list[list[TargetImage]],
    convention: Optional[str] = None,
    weight_scale: Optional[float] = None,
) -> list[QualityReport]:
    """Render the patterns and score each surface against its target."""
    rendered = render_patterns(
        scene, qmap, patterns, convention=convention, weight_scale=weight_scale
    )
    nch = len(per_channel_targets)
    drive = np.concatenate([np.ravel(p.values) for p in patterns])
    span = float(drive.max() - drive.min()) if drive.size else 0.0

    reports = []
    for si, rec in enumerate(rendered):
        if not rec.mask.any():
            reports.append(
                QualityReport(surface=si, psnr=math.nan, ssim=math.nan,
                              value_span=span)
            )
            continue
        chans = []
        for tl in per_channel_targets:
            t = next(t for t in tl if t.surface == si)
            chans.append(t.image)
        target = chans[0] if nch == 1 else np.stack(chans, axis=-1)
        reports.append(
            QualityReport(
                surface=si,
                psnr=psnr(target, rec.image, rec.mask),
                ssim=ssim(target, rec.image, rec.mask),
                value_span=span,
            )
        )
    return reports
