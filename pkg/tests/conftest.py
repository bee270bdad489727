"""Shared fixtures: small calibrated scenes reused across the test modules."""

from __future__ import annotations

import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo one line per acceptance criterion at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)

from multiproj import calib, system
from multiproj.pipeline import make_demo_scene
from multiproj.scene import trace_capture_geometry
from multiproj.targets import resolve_target


SMALL_CAM = (320, 240)
SMALL_PROJ = (128, 96)


@pytest.fixture(scope="session")
def two_planes():
    """Reduced-resolution two-planes demo scene with decoded calibration."""
    scene = make_demo_scene(
        "two-planes", cam_resolution=SMALL_CAM, proj_resolution=SMALL_PROJ, seed=0
    )
    geometry = trace_capture_geometry(scene)
    maps = [
        calib.fill_holes(calib.decode_correspondences(scene, j, geometry))
        for j in range(len(scene.projectors))
    ]
    qmap = system.build_inverse_projection(scene, maps, geometry)
    return scene, geometry, maps, qmap


@pytest.fixture(scope="session")
def two_planes_system(two_planes):
    """Assembled system for the scene's default noise targets."""
    scene, geometry, _, qmap = two_planes
    h, w = geometry.camera_shape
    targets = [
        system.TargetImage(t.surface, resolve_target(t.image, (h, w)))
        for t in scene.targets
    ]
    return system.assemble(scene, qmap, targets), targets


def make_fronto_scene(cam_resolution=(64, 48), proj_resolution=(32, 24),
                      depth=1.0, n_projectors=2, colocated=True,
                      plane_size=None, albedo=1.0):
    """Single fronto-parallel plane with devices at/near the origin.

    With ``colocated`` projectors the camera-projector mapping is a pure
    pixel rescale, convenient for analytic checks.
    """
    from multiproj.scene import (
        PlaneSurface,
        ProjectorModel,
        SceneDescription,
        TargetBinding,
        VirtualCamera,
    )

    cw, chh = cam_resolution
    cam = VirtualCamera(
        resolution=cam_resolution,
        focal=(1.5 * cw, 1.5 * cw),
        rotation=np.eye(3),
        translation=np.zeros(3),
    )
    pw = proj_resolution[0]
    projectors = []
    for j in range(n_projectors):
        off = 0.0 if colocated else (j - (n_projectors - 1) / 2) * 0.1
        projectors.append(
            ProjectorModel(
                id=j,
                resolution=proj_resolution,
                focal=(1.2 * pw, 1.2 * pw),
                rotation=np.eye(3),
                translation=np.array([0.0, off, 0.0]),
            )
        )
    plane = PlaneSurface(
        id=0,
        point=np.array([0.0, 0.0, depth]),
        normal=np.array([0.0, 0.0, -1.0]),
        size=plane_size,
        albedo=albedo,
    )
    return SceneDescription(
        projectors=projectors,
        surfaces=[plane],
        camera=cam,
        targets=[TargetBinding(surface=0, image=None)],
    )


def make_toy_system(rows, n_cols, rhs, proj_shapes=None):
    """SparseSystem straight from a row list of (col, weight) pairs."""
    import scipy.sparse as sp

    from multiproj.system import SparseSystem

    r_idx, c_idx, w = [], [], []
    for r, entries in enumerate(rows):
        for c, wt in entries:
            r_idx.append(r)
            c_idx.append(c)
            w.append(wt)
    A = sp.csr_matrix(
        (np.asarray(w, dtype=float), (r_idx, c_idx)), shape=(len(rows), n_cols)
    )
    A.sort_indices()
    if proj_shapes is None:
        proj_shapes = [(1, n_cols)]
    col_offsets = np.concatenate(
        [[0], np.cumsum([ph * pw for ph, pw in proj_shapes])]
    ).astype(np.int64)
    n = len(rows)
    return SparseSystem(
        A=A,
        rhs=np.asarray(rhs, dtype=float),
        row_surface=np.zeros(n, dtype=np.int64),
        row_pixel=np.zeros((n, 2), dtype=np.int64),
        infeasible_pixels=np.zeros((0, 3), dtype=np.int64),
        proj_shapes=proj_shapes,
        col_offsets=col_offsets,
        camera_shape=(1, max(1, n)),
        weight_scale=1.0,
        convention="paper",
    )
