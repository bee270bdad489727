"""Scene geometry: ray casting, pinhole projection, surface normals."""

import numpy as np
import pytest

from multiproj.scene import (
    HeightfieldSurface,
    PlaneSurface,
    ProjectorModel,
    SceneDescription,
    SceneError,
    SolverBounds,
    TargetBinding,
    VirtualCamera,
    cast_projector_ray,
    compute_normals,
    intersect_rays,
    look_at_rotation,
    project_to_camera,
    trace_capture_geometry,
)

from conftest import make_fronto_scene


def _single_plane_scene(normal, depth=1.0):
    scene = make_fronto_scene(n_projectors=1)
    scene.surfaces[0] = PlaneSurface(
        id=0, point=np.array([0.0, 0.0, depth]), normal=np.asarray(normal, float)
    )
    return scene


class TestRayCasting:
    def test_fronto_parallel_center_pixel(self):
        scene = _single_plane_scene([0.0, 0.0, -1.0], depth=1.0)
        proj = scene.projectors[0]
        hit = cast_projector_ray(scene, 0, proj.principal_point)
        assert hit is not None
        assert hit.distance == pytest.approx(1.0, abs=1e-12)
        assert float(hit.incident @ hit.normal) == pytest.approx(1.0, abs=1e-12)

    def test_tilted_plane_cosine_is_half(self):
        # plane tilted 60 degrees about the vertical axis: L.N = cos(60) = 0.5
        a = np.deg2rad(60.0)
        normal = np.array([np.sin(a), 0.0, -np.cos(a)])
        scene = _single_plane_scene(normal)
        proj = scene.projectors[0]
        hit = cast_projector_ray(scene, 0, proj.principal_point)
        assert float(hit.incident @ hit.normal) == pytest.approx(0.5, abs=1e-9)

    def test_two_stacked_planes_nearer_wins(self):
        scene = _single_plane_scene([0.0, 0.0, -1.0], depth=1.0)
        near = PlaneSurface(id=1, point=np.array([0.0, 0.0, 0.6]),
                            normal=np.array([0.0, 0.0, -1.0]))
        scene.surfaces.append(near)
        scene.targets.append(TargetBinding(surface=1, image=None))
        hit = cast_projector_ray(scene, 0, scene.projectors[0].principal_point)
        assert hit.surface == 1
        assert hit.distance == pytest.approx(0.6, abs=1e-12)

    def test_equal_distance_tie_lower_id_wins(self):
        scene = _single_plane_scene([0.0, 0.0, -1.0], depth=1.0)
        twin = PlaneSurface(id=1, point=np.array([0.0, 0.0, 1.0]),
                            normal=np.array([0.0, 0.0, -1.0]))
        scene.surfaces.append(twin)
        scene.targets.append(TargetBinding(surface=1, image=None))
        hit = cast_projector_ray(scene, 0, scene.projectors[0].principal_point)
        assert hit.surface == 0

    def test_back_face_is_missed(self):
        scene = _single_plane_scene([0.0, 0.0, 1.0], depth=1.0)  # faces away
        hit = cast_projector_ray(scene, 0, scene.projectors[0].principal_point)
        assert hit is None

    def test_cosine_in_unit_interval_after_culling(self):
        a = np.deg2rad(40.0)
        normal = np.array([np.sin(a), 0.0, -np.cos(a)])
        scene = _single_plane_scene(normal)
        proj = scene.projectors[0]
        dirs = proj.all_pixel_directions().reshape(-1, 3)
        origins = np.broadcast_to(proj.center, dirs.shape)
        t, sid, nrm = intersect_rays(scene, origins, dirs)
        hits = sid >= 0
        cos = -np.einsum("ij,ij->i", dirs[hits], nrm[hits])
        assert np.all(cos > 0) and np.all(cos <= 1.0 + 1e-12)

    def test_rigid_transform_invariance(self):
        rng = np.random.default_rng(3)
        ang = rng.uniform(0, 2 * np.pi, 3)

        def rot(ax, a):
            c, s = np.cos(a), np.sin(a)
            m = np.eye(3)
            i, j = [(1, 2), (0, 2), (0, 1)][ax]
            m[i, i] = c
            m[j, j] = c
            m[i, j] = -s
            m[j, i] = s
            return m

        R = rot(0, ang[0]) @ rot(1, ang[1]) @ rot(2, ang[2])
        shift = rng.uniform(-2, 2, 3)

        a = np.deg2rad(30.0)
        normal = np.array([np.sin(a), 0.0, -np.cos(a)])
        scene = _single_plane_scene(normal)
        proj = scene.projectors[0]
        hit = cast_projector_ray(scene, 0, (3.0, 4.0))

        moved = _single_plane_scene(normal)
        moved.projectors[0] = ProjectorModel(
            id=0,
            resolution=proj.resolution,
            focal=proj.focal,
            rotation=R @ proj.rotation,
            translation=R @ proj.translation + shift,
        )
        moved.surfaces[0] = PlaneSurface(
            id=0, point=R @ np.array([0.0, 0.0, 1.0]) + shift, normal=R @ normal
        )
        hit2 = cast_projector_ray(moved, 0, (3.0, 4.0))
        assert hit2.distance == pytest.approx(hit.distance, rel=1e-6)
        assert float(hit2.incident @ hit2.normal) == pytest.approx(
            float(hit.incident @ hit.normal), rel=1e-6
        )


class TestPinholeProjection:
    def test_optical_axis_point_maps_to_principal_point(self):
        scene = make_fronto_scene()
        uv = project_to_camera(scene, [0.0, 0.0, 1.0])
        assert uv == pytest.approx(scene.camera.principal_point)

    def test_point_behind_camera_is_rejected(self):
        scene = make_fronto_scene()
        assert project_to_camera(scene, [0.0, 0.0, -1.0]) is None

    def test_offset_point_follows_pinhole_formula(self):
        scene = make_fronto_scene(cam_resolution=(64, 48))
        cam = scene.camera
        x, y, z = 0.05, -0.02, 1.3
        uv = project_to_camera(scene, [x, y, z])
        fx, fy = cam.focal
        cx, cy = cam.principal_point
        assert uv[0] == pytest.approx(fx * x / z + cx, abs=1e-12)
        assert uv[1] == pytest.approx(fy * y / z + cy, abs=1e-12)

    def test_projection_casts_back_to_hit_point(self):
        scene = make_fronto_scene()
        geometry = trace_capture_geometry(scene)
        cam = scene.camera
        ys, xs = np.nonzero(geometry.mask)
        pick = slice(0, len(ys), max(1, len(ys) // 50))
        pts = geometry.point[ys[pick], xs[pick]]
        u, v, valid = cam.project(pts)
        assert valid.all()
        # re-cast the exact (u, v) ray to the plane and compare world points
        dirs = cam.pixel_directions(u, v)
        t, _, _ = intersect_rays(
            scene, np.broadcast_to(cam.center, dirs.shape), dirs
        )
        recast = cam.center + t[:, None] * dirs
        assert np.abs(recast - pts).max() < 1e-4


class TestNormals:
    def test_plane_constant_normal(self):
        p = PlaneSurface(id=0, point=np.zeros(3), normal=np.array([0.0, 0.0, 1.0]))
        assert np.allclose(compute_normals(p), [0.0, 0.0, 1.0])

    def test_heightfield_ramp_normals(self):
        # z = x ramp: normals proportional to (-1, 0, 1)/sqrt(2)
        n = 8
        spacing = 0.1
        heights = np.tile(np.arange(n) * spacing, (n, 1))
        hf = HeightfieldSurface(
            id=0,
            origin=np.zeros(3),
            axis_u=np.array([1.0, 0.0, 0.0]),
            axis_v=np.array([0.0, 1.0, 0.0]),
            spacing=spacing,
            heights=heights,
        )
        normals = compute_normals(hf)
        expect = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2)
        assert np.abs(normals - expect).max() < 1e-9

    def test_constant_heightfield_normals_equal_axis_w(self):
        hf = HeightfieldSurface(
            id=0,
            origin=np.zeros(3),
            axis_u=np.array([1.0, 0.0, 0.0]),
            axis_v=np.array([0.0, 1.0, 0.0]),
            spacing=0.05,
            heights=np.full((6, 6), 0.3),
        )
        assert np.allclose(compute_normals(hf), hf.axis_w)

    def test_heightfield_intersection_matches_plane(self):
        # a flat height field must intersect exactly like the equivalent plane
        hf = HeightfieldSurface(
            id=0,
            origin=np.array([-0.5, -0.5, 1.0]),
            axis_u=np.array([1.0, 0.0, 0.0]),
            axis_v=np.array([0.0, 1.0, 0.0]),
            spacing=0.1,
            heights=np.zeros((11, 11)),
        )
        origins = np.zeros((5, 3))
        dirs = np.array(
            [[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.0, 0.2, 1.0],
             [-0.1, -0.1, 1.0], [0.3, 0.3, 1.0]]
        )
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        t, _ = hf.intersect(origins, dirs)
        expect = 1.0 / dirs[:, 2]
        assert np.allclose(t, expect, atol=1e-9)


class TestValidation:
    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(SceneError):
            VirtualCamera(
                resolution=(8, 8),
                focal=(8.0, 8.0),
                rotation=np.eye(3) * 1.01,
                translation=np.zeros(3),
            )

    def test_non_unit_plane_normal_rejected(self):
        with pytest.raises(SceneError):
            PlaneSurface(id=0, point=np.zeros(3), normal=np.array([0.0, 0.0, 2.0]))

    def test_bounds_require_lower_below_upper(self):
        with pytest.raises(SceneError):
            SolverBounds(10.0, 10.0)

    def test_target_binding_per_surface_enforced(self):
        scene = make_fronto_scene()
        with pytest.raises(SceneError):
            SceneDescription(
                projectors=scene.projectors,
                surfaces=scene.surfaces,
                camera=scene.camera,
                targets=[],
            )

    def test_look_at_rotation_is_orthonormal_and_aims_forward(self):
        R = look_at_rotation((1.0, 2.0, 3.0), (0.0, 0.0, 0.9))
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        fwd = np.array([0.0, 0.0, 0.9]) - np.array([1.0, 2.0, 3.0])
        assert np.allclose(R[:, 2], fwd / np.linalg.norm(fwd))


class TestCaptureGeometry:
    def test_occluded_point_is_unlit(self):
        # a small near plane shadows part of the far plane from the projector
        scene = make_fronto_scene(n_projectors=1, cam_resolution=(64, 48))
        far = scene.surfaces[0]
        blocker = PlaneSurface(
            id=1,
            point=np.array([0.0, 0.05, 0.5]),
            normal=np.array([0.0, 0.0, -1.0]),
            size=(0.05, 0.02),
        )
        # move the projector so its view of the far plane passes the blocker
        scene.projectors[0] = ProjectorModel(
            id=0,
            resolution=scene.projectors[0].resolution,
            focal=scene.projectors[0].focal,
            rotation=look_at_rotation((0.0, 0.3, 0.0), (0.0, 0.0, 1.0)),
            translation=np.array([0.0, 0.3, 0.0]),
        )
        scene.surfaces = [far, blocker]
        scene.targets = [TargetBinding(0, None), TargetBinding(1, None)]
        geometry = trace_capture_geometry(scene)
        far_pixels = geometry.surface == 0
        assert far_pixels.any()
        # some far-plane pixels visible to the camera are shadowed
        assert (~geometry.lit[0] & far_pixels).any()
        # unshadowed pixels still carry valid projector coordinates
        lit = geometry.lit[0] & far_pixels
        assert lit.any()
        assert (geometry.pu[0][lit] >= 0).all()

    def test_distances_and_cosines_match_direct_computation(self, two_planes):
        scene, geometry, _, _ = two_planes
        j = 1
        lit = geometry.lit[j]
        pts = geometry.point[lit]
        to_p = scene.projectors[j].center - pts
        d = np.linalg.norm(to_p, axis=1)
        assert np.allclose(geometry.dist[j][lit], d, atol=1e-9)
        cos = np.einsum("ij,ij->i", geometry.normal[lit], to_p / d[:, None])
        assert np.allclose(geometry.cosine[j][lit], cos, atol=1e-9)
