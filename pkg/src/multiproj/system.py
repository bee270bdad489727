"""Inverse projection mapping and sparse linear system assembly.

Each illuminated camera pixel yields one equation coupling the target
intensity to the pattern pixels that light it, weighted by distance falloff
and Lambertian foreshortening.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .calib import CorrespondenceMap
from .scene import CaptureGeometry, SceneDescription, trace_capture_geometry


class AssemblyError(RuntimeError):
    """System assembly failed (no solvable rows)."""


@dataclass
class TargetImage:
    """Desired intensity raster for one surface, in camera coordinates."""

    surface: int
    image: np.ndarray  # (ch, cw) float in [0, 255]

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.min() < 0 or self.image.max() > 255:
            raise ValueError("target intensities must lie in [0, 255]")


@dataclass
class PatternImage:
    """Solved drive values for one projector."""

    projector: int
    values: np.ndarray  # (ph, pw) float


@dataclass
class InverseProjectionMap:
    """Lookup q: (camera pixel, projector) -> pattern pixel index.

    ``q[v, u, j]`` is the 1-based flat pattern pixel index of projector j
    lighting camera pixel (u, v), or 0 (the imaginary always-dark pixel) when
    the pixel is not illuminated by that projector.
    """

    q: np.ndarray  # (ch, cw, J) int64
    proj_shapes: list[tuple[int, int]]  # (ph, pw) per projector
    geometry: CaptureGeometry


def build_inverse_projection(
    scene: SceneDescription,
    maps: list[CorrespondenceMap],
    geometry: Optional[CaptureGeometry] = None,
) -> InverseProjectionMap:
    """Combine per-projector forward maps into the q lookup.

    ``maps`` must hold one correspondence map per projector, in projector
    order, all decoded over the same camera.
    """
    if len(maps) != len(scene.projectors):
        raise ValueError("need exactly one correspondence map per projector")
    if geometry is None:
        geometry = trace_capture_geometry(scene)
    h, w = geometry.camera_shape
    nj = len(scene.projectors)
    q = np.zeros((h, w, nj), dtype=np.int64)
    for j, cmap in enumerate(maps):
        proj = scene.projectors[j]
        if cmap.forward_u.shape != (h, w):
            raise ValueError(f"map {j} does not match the camera raster")
        lit = (cmap.forward_u >= 0) & geometry.mask
        q[..., j][lit] = (
            cmap.forward_v[lit].astype(np.int64) * proj.width
            + cmap.forward_u[lit]
            + 1
        )
    shapes = [(p.height, p.width) for p in scene.projectors]
    return InverseProjectionMap(q=q, proj_shapes=shapes, geometry=geometry)


def attenuation_weight(distance: float, cosine: float) -> float:
    """Coupling coefficient d^2 / (L.N) between a pattern and image pixel.

    The d=0 convention for unlit pixels yields weight 0 so the term
    vanishes. Non-positive cosines indicate a back-face hit that should have
    been culled upstream.
    """
    if distance == 0.0:
        return 0.0
    if cosine <= 0.0:
        raise ValueError("back-facing geometry reached attenuation_weight")
    if distance < 0.0:
        raise ValueError("distance must be positive")
    return distance**2 / cosine


@dataclass
class SparseSystem:
    """The assembled system A p = i for one intensity channel.

    Rows cover feasible illuminated target pixels only; camera pixels on a
    surface that no projector reaches are listed in ``infeasible_pixels``.
    Weights are globally rescaled by ``weight_scale`` (the mean raw weight)
    so a fronto-parallel constant-distance scene has unit weights.
    """

    A: sp.csr_matrix  # (n_rows, n_cols)
    rhs: np.ndarray  # (n_rows,)
    row_surface: np.ndarray  # (n_rows,) surface index per row
    row_pixel: np.ndarray  # (n_rows, 2) camera (v, u) per row
    infeasible_pixels: np.ndarray  # (n_inf, 3): surface, v, u
    proj_shapes: list[tuple[int, int]]
    col_offsets: np.ndarray  # (J + 1,) column ranges per projector
    camera_shape: tuple[int, int]
    weight_scale: float
    convention: str

    @property
    def n_projectors(self) -> int:
        return len(self.proj_shapes)

    def split_columns(self, p: np.ndarray) -> list[PatternImage]:
        """Scatter a stacked column vector into per-projector rasters."""
        out = []
        for j, (ph, pw) in enumerate(self.proj_shapes):
            block = p[self.col_offsets[j] : self.col_offsets[j + 1]]
            out.append(PatternImage(projector=j, values=block.reshape(ph, pw)))
        return out

    def stack_patterns(self, patterns: list[PatternImage]) -> np.ndarray:
        return np.concatenate([pat.values.ravel() for pat in patterns])


def _raw_weights(dist, cos, convention: str):
    if convention == "paper":
        return dist**2 / cos
    if convention == "physical":
        return cos / dist**2
    raise ValueError(f"unknown convention {convention!r}")


def assemble(
    scene: SceneDescription,
    qmap: InverseProjectionMap,
    targets: list[TargetImage],
    convention: Optional[str] = None,
) -> SparseSystem:
    """Build the sparse system from the q lookup and the target rasters.

    One row per illuminated target pixel; at most one entry per projector per
    row. Deterministic: rows follow camera scan order, entries projector
    order. Surface albedo divides the right-hand side.
    """
    geometry = qmap.geometry
    h, w = geometry.camera_shape
    nj = len(scene.projectors)
    convention = convention or scene.convention

    target_by_surface = {}
    for t in targets:
        if t.image.shape != (h, w):
            raise ValueError("target raster must match the camera resolution")
        target_by_surface[t.surface] = t.image
    for si, s in enumerate(scene.surfaces):
        if si not in target_by_surface and s.id in target_by_surface:
            target_by_surface[si] = target_by_surface[s.id]
    missing = [si for si in range(len(scene.surfaces)) if si not in target_by_surface]
    if missing:
        raise ValueError(f"missing targets for surfaces {missing}")

    q = qmap.q  # (h, w, nj)
    dist = np.moveaxis(qmap.geometry.dist, 0, -1)  # (h, w, nj)
    cos = np.moveaxis(qmap.geometry.cosine, 0, -1)
    valid = (q > 0) & (cos > 0) & (dist > 0)

    pixel_mask = geometry.mask
    feasible = pixel_mask & valid.any(axis=-1)
    infeasible = pixel_mask & ~valid.any(axis=-1)

    inf_v, inf_u = np.nonzero(infeasible)
    infeasible_pixels = np.column_stack(
        [geometry.surface[infeasible], inf_v, inf_u]
    ).astype(np.int64)

    n_rows = int(feasible.sum())
    if n_rows == 0:
        raise AssemblyError("every target pixel is unreachable by all projectors")

    row_of_pixel = np.full((h, w), -1, dtype=np.int64)
    row_of_pixel[feasible] = np.arange(n_rows)
    rv, ru = np.nonzero(feasible)
    row_surface = geometry.surface[feasible].astype(np.int64)
    row_pixel = np.column_stack([rv, ru]).astype(np.int64)

    sizes = [ph * pw for ph, pw in qmap.proj_shapes]
    col_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    rows_list, cols_list, w_list = [], [], []
    for j in range(nj):
        vj = valid[..., j] & feasible
        rows_list.append(row_of_pixel[vj])
        cols_list.append(col_offsets[j] + q[..., j][vj] - 1)
        w_list.append(_raw_weights(dist[..., j][vj], cos[..., j][vj], convention))
    rows = np.concatenate(rows_list)
    cols = np.concatenate(cols_list)
    weights = np.concatenate(w_list)

    scale = float(weights.mean())
    weights = weights / scale

    albedo = np.array([s.albedo for s in scene.surfaces])
    target_stack = np.stack([target_by_surface[si] for si in range(len(scene.surfaces))])
    rhs = target_stack[row_surface, rv, ru] / albedo[row_surface]

    A = sp.csr_matrix(
        (weights, (rows, cols)), shape=(n_rows, int(col_offsets[-1]))
    )
    A.sort_indices()
    return SparseSystem(
        A=A,
        rhs=rhs,
        row_surface=row_surface,
        row_pixel=row_pixel,
        infeasible_pixels=infeasible_pixels,
        proj_shapes=qmap.proj_shapes,
        col_offsets=col_offsets,
        camera_shape=(h, w),
        weight_scale=scale,
        convention=convention,
    )


def replace_targets(
    scene: SceneDescription, system: SparseSystem, targets: list[TargetImage]
) -> SparseSystem:
    """New system sharing A but with a right-hand side from other targets."""
    target_by_surface = {t.surface: t.image for t in targets}
    albedo = np.array([s.albedo for s in scene.surfaces])
    target_stack = np.stack(
        [target_by_surface[si] for si in range(len(scene.surfaces))]
    )
    rv, ru = system.row_pixel[:, 0], system.row_pixel[:, 1]
    rhs = target_stack[system.row_surface, rv, ru] / albedo[system.row_surface]
    return SparseSystem(
        A=system.A,
        rhs=rhs,
        row_surface=system.row_surface,
        row_pixel=system.row_pixel,
        infeasible_pixels=system.infeasible_pixels,
        proj_shapes=system.proj_shapes,
        col_offsets=system.col_offsets,
        camera_shape=system.camera_shape,
        weight_scale=system.weight_scale,
        convention=system.convention,
    )


def dump_system(system: SparseSystem, path) -> None:
    """Coordinate-list text dump: header line, then 'row col weight' triplets,
    then 'rhs row value' lines."""
    coo = system.A.tocoo()
    with open(path, "w") as f:
        f.write(f"# rows {system.A.shape[0]} cols {system.A.shape[1]} "
                f"nnz {coo.nnz} scale {system.weight_scale!r}\n")
        for r, c, w in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {float(w)!r}\n")
        for r, v in enumerate(system.rhs):
            f.write(f"rhs {r} {float(v)!r}\n")
