"""Scene geometry: projectors, target surfaces, virtual camera and ray casting.

All coordinates are metric world units. Devices (projectors and the camera)
are pinhole models looking along their local +z axis; pixel (u, v) denotes
column u, row v, with integer coordinates at pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .calib import GammaModel

_ORTHO_TOL = 1e-9
_RAY_EPS = 1e-9


class SceneError(ValueError):
    """Invalid scene description or degenerate geometry."""


def look_at_rotation(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation matrix of a device at ``position`` looking toward ``target``.

    Columns are the device x/y/z axes in world coordinates; the device z axis
    points from position to target.
    """
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise SceneError("look_at target coincides with position")
    z = fwd / n
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # up parallel to the viewing direction; pick another helper
        x = np.cross((1.0, 0.0, 0.0), z)
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _check_rotation(rotation: np.ndarray, what: str) -> None:
    err = np.abs(rotation @ rotation.T - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise SceneError(f"{what}: rotation is not orthonormal (max error {err:.3g})")


@dataclass
class PinholeDevice:
    """Shared pinhole geometry for projectors and the virtual camera."""

    resolution: tuple[int, int]  # (width, height) in pixels
    focal: tuple[float, float]  # (fx, fy) in pixels
    rotation: np.ndarray  # (3, 3), device-to-world
    translation: np.ndarray  # (3,), device origin in world
    principal_point: Optional[tuple[float, float]] = None

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise SceneError(f"resolution must be positive, got {self.resolution}")
        fx, fy = self.focal
        if fx <= 0 or fy <= 0:
            raise SceneError(f"focal lengths must be positive, got {self.focal}")
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise SceneError("pose must be a 3x3 rotation and a 3-vector translation")
        _check_rotation(self.rotation, type(self).__name__)
        if self.principal_point is None:
            self.principal_point = ((w - 1) / 2.0, (h - 1) / 2.0)

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def pixel_directions(self, u, v) -> np.ndarray:
        """World-space unit ray directions through pixel centers (u, v)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        cx, cy = self.principal_point
        fx, fy = self.focal
        d = np.stack(
            [(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1
        )
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def all_pixel_directions(self) -> np.ndarray:
        """Unit directions for every pixel, shape (height, width, 3)."""
        w, h = self.resolution
        uu, vv = np.meshgrid(np.arange(w), np.arange(h))
        return self.pixel_directions(uu, vv)

    def project(self, points: np.ndarray):
        """Project world points; returns (u, v, valid) with float pixel coords.

        ``valid`` is False for points behind the device or outside the raster
        (beyond half a pixel from the border centers).
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        local = (points - self.translation) @ self.rotation
        z = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal[0] * local[..., 0] / z + self.principal_point[0]
            v = self.focal[1] * local[..., 1] / z + self.principal_point[1]
        w, h = self.resolution
        valid = (
            (z > _RAY_EPS)
            & (u >= -0.5)
            & (u <= w - 0.5)
            & (v >= -0.5)
            & (v <= h - 0.5)
        )
        return u, v, valid


@dataclass
class ProjectorModel(PinholeDevice):
    id: int = 0
    gamma: Optional["GammaModel"] = None


@dataclass
class VirtualCamera(PinholeDevice):
    pass


class SurfaceModel:
    """Base class for projection target surfaces."""

    id: int
    albedo: float
    kind: str

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Ray intersection; returns (t, normal) with t=inf for misses."""
        raise NotImplementedError

    def compute_normals(self) -> np.ndarray:
        raise NotImplementedError


@dataclass
class PlaneSurface(SurfaceModel):
    """Planar patch (optionally finite) given by a point and unit normal."""

    id: int
    point: np.ndarray
    normal: np.ndarray
    size: Optional[tuple[float, float]] = None  # full extents along in-plane axes
    albedo: float = 1.0
    kind: str = field(default="plane", init=False)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(self.normal) - 1.0) > _ORTHO_TOL:
            raise SceneError(f"surface {self.id}: plane normal must be unit length")
        if not (0.0 < self.albedo <= 1.0):
            raise SceneError(f"surface {self.id}: albedo must be in (0, 1]")

    def in_plane_axes(self):
        """Deterministic in-plane orthonormal axes (u, v)."""
        n = self.normal
        helper = np.array([0.0, 1.0, 0.0])
        if abs(n @ helper) > 0.9:
            helper = np.array([1.0, 0.0, 0.0])
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        num = (self.point - origins) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) > _RAY_EPS, t, np.inf)
        t = np.where(t > _RAY_EPS, t, np.inf)
        if self.size is not None:
            u_ax, v_ax = self.in_plane_axes()
            pts = origins + t[..., None] * dirs
            rel = pts - self.point
            su, sv = self.size
            inside = (np.abs(rel @ u_ax) <= su / 2) & (np.abs(rel @ v_ax) <= sv / 2)
            t = np.where(inside, t, np.inf)
        normal = np.broadcast_to(self.normal, origins.shape)
        return t, normal

    def compute_normals(self) -> np.ndarray:
        return self.normal.copy()


@dataclass
class HeightfieldSurface(SurfaceModel):
    """Regular-grid height field, triangulated two triangles per cell.

    Sample (i, j) sits at ``origin + j*spacing*axis_u + i*spacing*axis_v +
    heights[i, j]*w`` where w = axis_u x axis_v.
    """

    id: int
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    spacing: float
    heights: np.ndarray  # (ny, nx)
    albedo: float = 1.0
    kind: str = field(default="heightfield", init=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.axis_u = np.asarray(self.axis_u, dtype=float)
        self.axis_v = np.asarray(self.axis_v, dtype=float)
        self.heights = np.asarray(self.heights, dtype=float)
        for name in ("axis_u", "axis_v"):
            ax = getattr(self, name)
            if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
                raise SceneError(f"surface {self.id}: {name} must be unit length")
        if abs(self.axis_u @ self.axis_v) > 1e-9:
            raise SceneError(f"surface {self.id}: grid axes must be orthogonal")
        if self.spacing <= 0:
            raise SceneError(f"surface {self.id}: spacing must be positive")
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise SceneError(f"surface {self.id}: heights must be at least 2x2")
        if not np.all(np.isfinite(self.heights)):
            raise SceneError(f"surface {self.id}: heights must be finite")
        if not (0.0 < self.albedo <= 1.0):
            raise SceneError(f"surface {self.id}: albedo must be in (0, 1]")
        self._tris = None

    @property
    def axis_w(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def grid_points(self) -> np.ndarray:
        """World positions of all samples, shape (ny, nx, 3)."""
        ny, nx = self.heights.shape
        jj, ii = np.meshgrid(np.arange(nx), np.arange(ny))
        return (
            self.origin
            + (jj * self.spacing)[..., None] * self.axis_u
            + (ii * self.spacing)[..., None] * self.axis_v
            + self.heights[..., None] * self.axis_w
        )

    def _triangles(self):
        if self._tris is None:
            p = self.grid_points()
            p00 = p[:-1, :-1].reshape(-1, 3)
            p10 = p[:-1, 1:].reshape(-1, 3)
            p01 = p[1:, :-1].reshape(-1, 3)
            p11 = p[1:, 1:].reshape(-1, 3)
            v0 = np.concatenate([p00, p00])
            e1 = np.concatenate([p10 - p00, p11 - p00])
            e2 = np.concatenate([p11 - p00, p01 - p00])
            n = np.cross(e1, e2)
            norms = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norms > 0, norms, 1.0)
            self._tris = (v0, e1, e2, n)
        return self._tris

    def intersect(self, origins, dirs):
        v0, e1, e2, tri_n = self._triangles()
        nr = origins.shape[0]
        nt = v0.shape[0]
        best_t = np.full(nr, np.inf)
        best_tri = np.full(nr, -1, dtype=np.int64)
        chunk = max(1, int(2_000_000 // max(nt, 1)))
        for s in range(0, nr, chunk):
            o = origins[s : s + chunk, None, :]
            d = dirs[s : s + chunk, None, :]
            pvec = np.cross(d, e2[None])
            det = np.einsum("ijk,jk->ij", pvec, e1)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv_det = 1.0 / det
            tvec = o - v0[None]
            u = np.einsum("ijk,ijk->ij", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1[None])
            v = np.einsum("ijk,ijk->ij", qvec, d) * inv_det
            t = np.einsum("ijk,jk->ij", qvec, e2) * inv_det
            ok = (
                (np.abs(det) > 1e-14)
                & (u >= -1e-12)
                & (v >= -1e-12)
                & (u + v <= 1 + 1e-12)
                & (t > _RAY_EPS)
            )
            t = np.where(ok, t, np.inf)
            idx = np.argmin(t, axis=1)
            tmin = t[np.arange(t.shape[0]), idx]
            sel = tmin < best_t[s : s + chunk]
            best_t[s : s + chunk][sel] = tmin[sel]
            best_tri[s : s + chunk][sel] = idx[sel]
        normal = np.zeros((nr, 3))
        hit = best_tri >= 0
        normal[hit] = tri_n[best_tri[hit]]
        return best_t, normal

    def compute_normals(self) -> np.ndarray:
        """Per-sample unit normals via central differences on the height grid.

        One-sided differences at borders; degenerate cells inherit the nearest
        valid normal.
        """
        h = self.heights
        dj = np.gradient(h, self.spacing, axis=1)
        di = np.gradient(h, self.spacing, axis=0)
        tu = self.axis_u[None, None, :] + dj[..., None] * self.axis_w
        tv = self.axis_v[None, None, :] + di[..., None] * self.axis_w
        n = np.cross(tu, tv)
        norms = np.linalg.norm(n, axis=-1)
        valid = norms > 1e-12
        if not valid.all():
            # propagate nearest valid normal
            from scipy.ndimage import distance_transform_edt

            _, idx = distance_transform_edt(~valid, return_indices=True)
            n = n[idx[0], idx[1]]
            norms = np.linalg.norm(n, axis=-1)
        return n / norms[..., None]


@dataclass
class SolverBounds:
    """Allowed drive-value range [lower, upper] during pattern generation."""

    lower: float = 0.0
    upper: float = 255.0

    def __post_init__(self):
        if not self.lower < self.upper:
            raise SceneError(f"bounds require lower < upper, got {self}")


@dataclass
class TargetBinding:
    """Associates a surface with its desired image (path or procedural spec)."""

    surface: int
    image: object  # path string, procedural-spec dict, or ndarray


@dataclass
class SceneDescription:
    projectors: list[ProjectorModel]
    surfaces: list[SurfaceModel]
    camera: VirtualCamera
    targets: list[TargetBinding]
    bounds: SolverBounds = field(default_factory=SolverBounds)
    convention: str = "paper"

    def __post_init__(self):
        if self.convention not in ("paper", "physical"):
            raise SceneError(f"unknown convention {self.convention!r}")
        surf_ids = [s.id for s in self.surfaces]
        if len(set(surf_ids)) != len(surf_ids):
            raise SceneError("duplicate surface ids")
        bound = {t.surface for t in self.targets}
        if len(self.targets) != len(self.surfaces) or bound != set(surf_ids):
            raise SceneError("exactly one target binding per surface is required")
        proj_ids = [p.id for p in self.projectors]
        if len(set(proj_ids)) != len(proj_ids):
            raise SceneError("duplicate projector ids")

    def surface_by_id(self, sid: int) -> SurfaceModel:
        for s in self.surfaces:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def target_for(self, sid: int) -> TargetBinding:
        for t in self.targets:
            if t.surface == sid:
                return t
        raise KeyError(sid)


@dataclass
class SurfaceHit:
    surface: int
    point: np.ndarray
    normal: np.ndarray
    distance: float
    incident: np.ndarray  # unit vector from surface point toward the device


def intersect_rays(scene: SceneDescription, origins: np.ndarray, dirs: np.ndarray):
    """Nearest front-facing surface hit per ray.

    Back-facing hits (ray direction not opposing the stored surface normal)
    are treated as misses. On exact distance ties the lower surface index
    wins. Returns (t, surface_index, normal); surface_index is -1 and t=inf
    where every surface is missed.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_sid = np.full(n, -1, dtype=np.int32)
    best_n = np.zeros((n, 3))
    for si, surf in enumerate(scene.surfaces):
        t, nrm = surf.intersect(origins, dirs)
        cosine = -np.einsum("ij,ij->i", dirs, nrm)
        t = np.where(cosine > 0, t, np.inf)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_sid[closer] = si
        best_n[closer] = nrm[closer]
    return best_t, best_sid, best_n


def cast_projector_ray(
    scene: SceneDescription, projector: int, pixel: tuple[float, float]
) -> Optional[SurfaceHit]:
    """Nearest surface intersection of a single projector pixel ray."""
    proj = scene.projectors[projector]
    u, v = pixel
    if not (-0.5 <= u <= proj.width - 0.5 and -0.5 <= v <= proj.height - 0.5):
        raise SceneError(f"pixel {pixel} outside projector raster")
    d = proj.pixel_directions(np.array([u]), np.array([v]))
    o = np.broadcast_to(proj.center, (1, 3))
    t, sid, nrm = intersect_rays(scene, o, d)
    if sid[0] < 0:
        return None
    point = proj.center + t[0] * d[0]
    return SurfaceHit(
        surface=int(sid[0]),
        point=point,
        normal=nrm[0],
        distance=float(t[0]),
        incident=-d[0],
    )


def project_to_camera(scene: SceneDescription, point) -> Optional[tuple[float, float]]:
    """Pinhole projection of a world point into the camera raster."""
    point = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(point)):
        raise SceneError("point must be finite")
    u, v, valid = scene.camera.project(point[None, :])
    if not valid[0]:
        return None
    return float(u[0]), float(v[0])


def compute_normals(surface: SurfaceModel) -> np.ndarray:
    """Unit normal field of a surface (constant for planes)."""
    return surface.compute_normals()


@dataclass
class CaptureGeometry:
    """Per-camera-pixel geometry shared by capture simulation and assembly.

    ``surface`` holds the nearest-hit surface index (-1 where no surface is
    seen); per projector, ``pu``/``pv`` give the illuminating projector pixel,
    ``lit`` whether the point is actually reachable (inside raster, front
    facing and unoccluded), ``dist``/``cosine`` the attenuation geometry.
    """

    camera_shape: tuple[int, int]  # (height, width)
    mask: np.ndarray  # (h, w) bool, camera pixel sees a surface
    surface: np.ndarray  # (h, w) int32
    point: np.ndarray  # (h, w, 3)
    normal: np.ndarray  # (h, w, 3)
    pu: np.ndarray  # (J, h, w) int32, -1 invalid
    pv: np.ndarray  # (J, h, w) int32
    lit: np.ndarray  # (J, h, w) bool
    dist: np.ndarray  # (J, h, w)
    cosine: np.ndarray  # (J, h, w)


def trace_capture_geometry(scene: SceneDescription) -> CaptureGeometry:
    """Trace all camera rays and resolve projector visibility per pixel."""
    cam = scene.camera
    h, w = cam.height, cam.width
    dirs = cam.all_pixel_directions().reshape(-1, 3)
    origins = np.broadcast_to(cam.center, dirs.shape)
    t, sid, nrm = intersect_rays(scene, origins, dirs)
    mask = sid >= 0
    pts = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs

    nj = len(scene.projectors)
    pu = np.full((nj, h * w), -1, dtype=np.int32)
    pv = np.full((nj, h * w), -1, dtype=np.int32)
    lit = np.zeros((nj, h * w), dtype=bool)
    dist = np.zeros((nj, h * w))
    cosine = np.zeros((nj, h * w))

    idx = np.flatnonzero(mask)
    for j, proj in enumerate(scene.projectors):
        if idx.size == 0:
            continue
        p = pts[idx]
        u, v, valid = proj.project(p)
        to_p = proj.center - p
        d = np.linalg.norm(to_p, axis=1)
        cos = np.einsum("ij,ij->i", nrm[idx], to_p) / np.where(d > 0, d, 1.0)
        # occlusion: re-cast from the projector toward the point
        o = np.broadcast_to(proj.center, p.shape)
        rd = -to_p / np.where(d > 0, d, 1.0)[:, None]
        t2, sid2, _ = intersect_rays(scene, o, rd)
        unoccluded = (sid2 == sid[idx]) & (np.abs(t2 - d) <= 1e-6 + 1e-6 * d)
        ok = valid & (cos > 0) & unoccluded
        # border centers sit at +-0.5; rounding may land one past the raster
        pu[j, idx[ok]] = np.clip(np.rint(u[ok]), 0, proj.width - 1).astype(np.int32)
        pv[j, idx[ok]] = np.clip(np.rint(v[ok]), 0, proj.height - 1).astype(np.int32)
        lit[j, idx[ok]] = True
        dist[j, idx] = d
        cosine[j, idx] = cos

    return CaptureGeometry(
        camera_shape=(h, w),
        mask=mask.reshape(h, w),
        surface=sid.reshape(h, w),
        point=pts.reshape(h, w, 3),
        normal=nrm.reshape(h, w, 3),
        pu=pu.reshape(nj, h, w),
        pv=pv.reshape(nj, h, w),
        lit=lit.reshape(nj, h, w),
        dist=dist.reshape(nj, h, w),
        cosine=cosine.reshape(nj, h, w),
    )
