"""Geometric and photometric calibration against the simulated camera.

Gray-code sequences are projected through the capture simulator, decoded into
per-projector correspondence maps, holes are filled, and the projector
intensity response is fitted to a gain/exponent/offset model and inverted for
pattern compensation.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .scene import CaptureGeometry, SceneDescription, trace_capture_geometry

UNDEFINED = -1
_SENTINEL16 = 0xFFFF
_MAGIC = b"MPCM"


class CalibrationError(RuntimeError):
    """Calibration failed (degenerate scene or broken measurement)."""


# ---------------------------------------------------------------------------
# Gray code


def gray_encode(value: int) -> int:
    """Reflected binary code of a nonnegative integer."""
    if value < 0:
        raise ValueError("value must be >= 0")
    return value ^ (value >> 1)


def gray_decode(code: int) -> int:
    """Inverse of :func:`gray_encode`."""
    if code < 0:
        raise ValueError("code must be >= 0")
    value = code
    shifted = code >> 1
    while shifted > 0:
        value ^= shifted
        shifted >>= 1
    return value


def _gray_encode_array(values: np.ndarray) -> np.ndarray:
    return values ^ (values >> 1)


def _gray_decode_array(codes: np.ndarray) -> np.ndarray:
    values = codes.copy()
    shifted = codes >> 1
    while shifted.any():
        values ^= shifted
        shifted >>= 1
    return values


@dataclass
class GrayCodeSequence:
    """Bit-plane patterns encoding one projector axis.

    Frame b holds bit b (LSB first) of the Gray code of the pixel coordinate
    along ``axis``.
    """

    axis: str  # "x" or "y"
    bit_count: int
    frames: list[np.ndarray]  # each (h, w) float in {0, 255}


def make_gray_sequence(resolution: tuple[int, int], axis: str) -> GrayCodeSequence:
    w, h = resolution
    extent = w if axis == "x" else h
    bit_count = max(1, int(np.ceil(np.log2(extent))))
    coords = np.arange(w) if axis == "x" else np.arange(h)
    codes = _gray_encode_array(coords)
    frames = []
    for b in range(bit_count):
        line = (((codes >> b) & 1) * 255).astype(float)
        frame = np.tile(line, (h, 1)) if axis == "x" else np.tile(line[:, None], (1, w))
        frames.append(frame)
    return GrayCodeSequence(axis=axis, bit_count=bit_count, frames=frames)


# ---------------------------------------------------------------------------
# Capture simulation and decoding


def simulate_capture(
    scene: SceneDescription,
    projector: int,
    pattern: np.ndarray,
    geometry: Optional[CaptureGeometry] = None,
) -> np.ndarray:
    """Linear-response camera image of one projected pattern.

    Each camera pixel receives the pattern value at the projector pixel
    illuminating its surface point, scaled by albedo * (L.N) / d^2; unlit
    pixels are 0.
    """
    proj = scene.projectors[projector]
    pattern = np.asarray(pattern, dtype=float)
    if pattern.shape != (proj.height, proj.width):
        raise ValueError(
            f"pattern shape {pattern.shape} does not match projector "
            f"resolution {(proj.height, proj.width)}"
        )
    if geometry is None:
        geometry = trace_capture_geometry(scene)
    lit = geometry.lit[projector]
    out = np.zeros(geometry.camera_shape)
    if not lit.any():
        return out
    pu = geometry.pu[projector][lit]
    pv = geometry.pv[projector][lit]
    d = geometry.dist[projector][lit]
    cos = geometry.cosine[projector][lit]
    albedo = np.array([s.albedo for s in scene.surfaces])
    alb = albedo[geometry.surface[lit]]
    out[lit] = pattern[pv, pu] * alb * cos / d**2
    return out


@dataclass
class CorrespondenceMap:
    """Per-projector mapping between camera pixels and projector pixels.

    Forward arrays are camera-shaped and give the projector pixel (u, v)
    illuminating each camera pixel; inverse arrays are projector-shaped and
    give a camera pixel per projector pixel. Undefined entries are -1.
    """

    projector: int
    forward_u: np.ndarray  # (ch, cw) int32
    forward_v: np.ndarray
    inverse_u: np.ndarray  # (ph, pw) int32
    inverse_v: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.forward_u >= 0

    def copy(self) -> "CorrespondenceMap":
        return CorrespondenceMap(
            self.projector,
            self.forward_u.copy(),
            self.forward_v.copy(),
            self.inverse_u.copy(),
            self.inverse_v.copy(),
        )


def _build_inverse(
    forward_u: np.ndarray, forward_v: np.ndarray, proj_shape: tuple[int, int]
):
    """Scatter camera pixels into the projector raster, first-in-scan-order wins."""
    ph, pw = proj_shape
    inv_u = np.full((ph, pw), UNDEFINED, dtype=np.int32)
    inv_v = np.full((ph, pw), UNDEFINED, dtype=np.int32)
    ch, cw = forward_u.shape
    defined = forward_u >= 0
    cam_flat = np.flatnonzero(defined.ravel())
    if cam_flat.size == 0:
        return inv_u, inv_v
    pidx = forward_v.ravel()[cam_flat] * pw + forward_u.ravel()[cam_flat]
    uniq, first = np.unique(pidx, return_index=True)
    chosen = cam_flat[first]
    inv_u.ravel()[uniq] = (chosen % cw).astype(np.int32)
    inv_v.ravel()[uniq] = (chosen // cw).astype(np.int32)
    return inv_u, inv_v


def decode_correspondences(
    scene: SceneDescription,
    projector: int,
    geometry: Optional[CaptureGeometry] = None,
    contrast_floor: float = 0.02,
) -> CorrespondenceMap:
    """Run Gray-code capture over both axes and decode camera->projector.

    Bits are thresholded at the per-pixel midpoint of all-white/all-black
    reference captures; pixels whose contrast falls below ``contrast_floor``
    times the white level are left undefined.
    """
    proj = scene.projectors[projector]
    if geometry is None:
        geometry = trace_capture_geometry(scene)

    shape = (proj.height, proj.width)
    white = simulate_capture(scene, projector, np.full(shape, 255.0), geometry)
    black = simulate_capture(scene, projector, np.zeros(shape), geometry)
    contrast = white - black
    defined = contrast > np.maximum(contrast_floor * white, 1e-12)
    if not defined.any():
        raise CalibrationError(
            f"projector {projector}: no surface visible, cannot calibrate"
        )
    mid = (white + black) / 2.0

    coords = {}
    for axis, extent in (("x", proj.width), ("y", proj.height)):
        seq = make_gray_sequence(proj.resolution, axis)
        code = np.zeros(geometry.camera_shape, dtype=np.int64)
        for b, frame in enumerate(seq.frames):
            cap = simulate_capture(scene, projector, frame, geometry)
            code |= (cap > mid).astype(np.int64) << b
        decoded = _gray_decode_array(code)
        defined &= decoded < extent
        coords[axis] = decoded

    forward_u = np.where(defined, coords["x"], UNDEFINED).astype(np.int32)
    forward_v = np.where(defined, coords["y"], UNDEFINED).astype(np.int32)
    inv_u, inv_v = _build_inverse(forward_u, forward_v, shape)
    return CorrespondenceMap(projector, forward_u, forward_v, inv_u, inv_v)


def fill_holes(cmap: CorrespondenceMap, max_iterations: int = 10, quorum: int = 5
               ) -> CorrespondenceMap:
    """Fill undefined forward entries from their 8-neighborhoods.

    A hole is filled with the component-wise median of its defined neighbors
    when at least ``quorum`` of the 8 are defined; repeats until fixpoint or
    ``max_iterations``. Defined entries are never overwritten. The inverse
    map is rebuilt from the filled forward map.
    """
    fu = cmap.forward_u.astype(float)
    fv = cmap.forward_v.astype(float)
    fu[cmap.forward_u < 0] = np.nan
    fv[cmap.forward_v < 0] = np.nan

    shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for _ in range(max_iterations):
        holes = np.isnan(fu)
        if not holes.any():
            break
        pad_u = np.pad(fu, 1, constant_values=np.nan)
        pad_v = np.pad(fv, 1, constant_values=np.nan)
        h, w = fu.shape
        neigh_u = np.stack([pad_u[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
                            for dy, dx in shifts])
        neigh_v = np.stack([pad_v[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
                            for dy, dx in shifts])
        counts = np.sum(~np.isnan(neigh_u), axis=0)
        fillable = holes & (counts >= quorum)
        if not fillable.any():
            break
        with np.errstate(all="ignore"), warnings.catch_warnings():
            # all-NaN neighborhoods are expected around large holes
            warnings.simplefilter("ignore", RuntimeWarning)
            med_u = np.nanmedian(neigh_u, axis=0)
            med_v = np.nanmedian(neigh_v, axis=0)
        fu[fillable] = np.rint(med_u[fillable])
        fv[fillable] = np.rint(med_v[fillable])

    forward_u = np.where(np.isnan(fu), UNDEFINED, fu).astype(np.int32)
    forward_v = np.where(np.isnan(fv), UNDEFINED, fv).astype(np.int32)
    inv_u, inv_v = _build_inverse(forward_u, forward_v, cmap.inverse_u.shape)
    return CorrespondenceMap(cmap.projector, forward_u, forward_v, inv_u, inv_v)


# ---------------------------------------------------------------------------
# Correspondence map serialization


def save_correspondence(cmap: CorrespondenceMap, path) -> None:
    """Binary raster dump: magic, dims, two uint16 coords per pixel (0xFFFF =
    undefined), forward then inverse."""
    def encode(a_u, a_v):
        u = a_u.astype(np.int64).copy()
        v = a_v.astype(np.int64).copy()
        u[u < 0] = _SENTINEL16
        v[v < 0] = _SENTINEL16
        packed = np.stack([u, v], axis=-1).astype("<u2")
        return packed.tobytes()

    with open(path, "wb") as f:
        ch, cw = cmap.forward_u.shape
        ph, pw = cmap.inverse_u.shape
        f.write(_MAGIC)
        f.write(struct.pack("<5I", cmap.projector, cw, ch, pw, ph))
        f.write(encode(cmap.forward_u, cmap.forward_v))
        f.write(encode(cmap.inverse_u, cmap.inverse_v))


def load_correspondence(path) -> CorrespondenceMap:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a correspondence map file")
        projector, cw, ch, pw, ph = struct.unpack("<5I", f.read(20))

        def decode(w, h):
            raw = np.frombuffer(f.read(w * h * 4), dtype="<u2").reshape(h, w, 2)
            a = raw.astype(np.int32)
            a[a == _SENTINEL16] = UNDEFINED
            return a[..., 0], a[..., 1]

        fu, fv = decode(cw, ch)
        iu, iv = decode(pw, ph)
    return CorrespondenceMap(projector, fu, fv, iu, iv)


def dump_correspondence_text(cmap: CorrespondenceMap, path) -> None:
    """Human-readable dump of the forward map for debugging."""
    with open(path, "w") as f:
        f.write(f"# projector {cmap.projector}, forward map (cam_u cam_v -> proj_u proj_v)\n")
        ys, xs = np.nonzero(cmap.defined)
        for y, x in zip(ys, xs):
            f.write(f"{x} {y} -> {cmap.forward_u[y, x]} {cmap.forward_v[y, x]}\n")


# ---------------------------------------------------------------------------
# Photometric calibration


@dataclass
class GammaModel:
    """Projector intensity response f(x) = a * x^b + c."""

    a: float
    b: float
    c: float = 0.0
    residual_rms: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("gamma model requires a > 0 and b > 0")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return self.a * np.clip(x, 0.0, None) ** self.b + self.c


def fit_gamma(samples, noise_floor: float = 2.0) -> GammaModel:
    """Least-squares fit of (a, b, c) to (nominal, measured) pairs.

    Initialization takes c from the darkest sample and a/b from linear
    regression of log(y - c) against log(x); a damped Gauss-Newton refinement
    follows. Raises :class:`CalibrationError` on too few samples, poor
    coverage, or non-monotone measurements beyond ``noise_floor``.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 8:
        raise CalibrationError("need at least 8 (nominal, measured) samples")
    order = np.argsort(pts[:, 0])
    x, y = pts[order, 0], pts[order, 1]
    if x.max() - x.min() < 0.5 * 255:
        raise CalibrationError("samples must span at least 50% of [0, 255]")
    if np.any(np.diff(y) < -noise_floor):
        raise CalibrationError("measured intensities are not monotone")

    c = y[0] - 1e-9
    pos = x > 0
    lx = np.log(x[pos])
    ly = np.log(np.maximum(y[pos] - c, 1e-12))
    b, loga = np.polyfit(lx, ly, 1)
    a = float(np.exp(loga))
    b = float(max(b, 1e-3))
    theta = np.array([a, b, float(c)])

    lam = 1e-3
    prev = None
    for _ in range(200):
        a, b, c = theta
        xb = np.clip(x, 0.0, None) ** b
        r = a * xb + c - y
        sse = float(r @ r)
        with np.errstate(divide="ignore"):
            dlogx = np.where(x > 0, np.log(np.maximum(x, 1e-300)), 0.0)
        J = np.column_stack([xb, a * xb * dlogx, np.ones_like(x)])
        g = J.T @ r
        H = J.T @ J
        step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
        cand = theta + step
        cand[0] = max(cand[0], 1e-9)
        cand[1] = max(cand[1], 1e-6)
        ca, cb, cc = cand
        rc = ca * np.clip(x, 0.0, None) ** cb + cc - y
        if float(rc @ rc) < sse:
            theta = cand
            lam = max(lam / 3, 1e-12)
        else:
            lam *= 10
        if prev is not None and abs(prev - sse) <= 1e-15 * max(1.0, sse):
            break
        prev = sse

    a, b, c = theta
    resid = a * np.clip(x, 0.0, None) ** b + c - y
    return GammaModel(a=float(a), b=float(b), c=float(c),
                      residual_rms=float(np.sqrt(np.mean(resid**2))))


def invert_gamma(model: GammaModel, desired):
    """Drive value whose response equals ``desired``, clamped to [0, 255]."""
    desired = np.asarray(desired, dtype=float)
    base = np.clip((desired - model.c) / model.a, 0.0, None)
    x = base ** (1.0 / model.b)
    result = np.clip(x, 0.0, 255.0)
    if result.ndim == 0:
        return float(result)
    return result
