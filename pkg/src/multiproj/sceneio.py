"""Scene file loading and saving (YAML key/value tree).

A scene file lists projectors, surfaces, the camera, target image bindings
and the solver bounds. Depth maps may come from 16-bit grayscale images with
a scale factor or from plain-text float grids.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .calib import GammaModel
from .scene import (
    HeightfieldSurface,
    PlaneSurface,
    ProjectorModel,
    SceneDescription,
    SceneError,
    SolverBounds,
    TargetBinding,
    VirtualCamera,
    look_at_rotation,
)


def _pose_from_dict(d: dict):
    if "rotation" in d:
        return np.asarray(d["rotation"], dtype=float), np.asarray(
            d["translation"], dtype=float
        )
    position = np.asarray(d["position"], dtype=float)
    rot = look_at_rotation(position, d["look_at"], d.get("up", (0.0, 1.0, 0.0)))
    return rot, position


def _pose_to_dict(rotation: np.ndarray, translation: np.ndarray) -> dict:
    return {
        "rotation": np.asarray(rotation).tolist(),
        "translation": np.asarray(translation).tolist(),
    }


def _gamma_from_dict(d: dict | None):
    if d is None:
        return None
    return GammaModel(a=float(d["a"]), b=float(d["b"]), c=float(d.get("c", 0.0)))


def _load_heights(spec: dict, base: Path) -> np.ndarray:
    if "grid" in spec:
        return np.asarray(spec["grid"], dtype=float)
    path = base / spec["path"]
    if path.suffix.lower() in (".txt", ".dat", ".csv"):
        return np.loadtxt(path)
    img = np.asarray(Image.open(path))
    scale = float(spec.get("scale", 1.0))
    return img.astype(float) * scale


def _surface_from_dict(i: int, d: dict, base: Path):
    kind = d.get("kind", "plane")
    sid = int(d.get("id", i))
    albedo = float(d.get("albedo", 1.0))
    if kind == "plane":
        size = d.get("size")
        return PlaneSurface(
            id=sid,
            point=np.asarray(d["point"], dtype=float),
            normal=np.asarray(d["normal"], dtype=float),
            size=tuple(size) if size is not None else None,
            albedo=albedo,
        )
    if kind == "heightfield":
        return HeightfieldSurface(
            id=sid,
            origin=np.asarray(d["origin"], dtype=float),
            axis_u=np.asarray(d["axis_u"], dtype=float),
            axis_v=np.asarray(d["axis_v"], dtype=float),
            spacing=float(d["spacing"]),
            heights=_load_heights(d["heights"], base),
            albedo=albedo,
        )
    raise SceneError(f"unknown surface kind {kind!r}")


def scene_from_dict(data: dict, base: Path | None = None) -> SceneDescription:
    base = Path(base) if base is not None else Path(".")
    cam_d = data["camera"]
    rot, trans = _pose_from_dict(cam_d["pose"])
    camera = VirtualCamera(
        resolution=tuple(cam_d["resolution"]),
        focal=tuple(cam_d["focal"]),
        rotation=rot,
        translation=trans,
        principal_point=tuple(cam_d["principal_point"])
        if "principal_point" in cam_d
        else None,
    )
    projectors = []
    for i, pd in enumerate(data["projectors"]):
        rot, trans = _pose_from_dict(pd["pose"])
        projectors.append(
            ProjectorModel(
                id=int(pd.get("id", i)),
                resolution=tuple(pd["resolution"]),
                focal=tuple(pd["focal"]),
                rotation=rot,
                translation=trans,
                principal_point=tuple(pd["principal_point"])
                if "principal_point" in pd
                else None,
                gamma=_gamma_from_dict(pd.get("gamma")),
            )
        )
    surfaces = [
        _surface_from_dict(i, sd, base) for i, sd in enumerate(data["surfaces"])
    ]
    targets = []
    for td in data.get("targets", []):
        image = td["image"]
        if isinstance(image, str):
            image = str(base / image)
        targets.append(TargetBinding(surface=int(td["surface"]), image=image))
    bd = data.get("bounds", {})
    bounds = SolverBounds(
        lower=float(bd.get("lower", 0.0)), upper=float(bd.get("upper", 255.0))
    )
    return SceneDescription(
        projectors=projectors,
        surfaces=surfaces,
        camera=camera,
        targets=targets,
        bounds=bounds,
        convention=data.get("convention", "paper"),
    )


def scene_to_dict(scene: SceneDescription) -> dict:
    cam = scene.camera
    data = {
        "camera": {
            "resolution": list(cam.resolution),
            "focal": list(cam.focal),
            "principal_point": list(cam.principal_point),
            "pose": _pose_to_dict(cam.rotation, cam.translation),
        },
        "projectors": [],
        "surfaces": [],
        "targets": [],
        "bounds": {"lower": scene.bounds.lower, "upper": scene.bounds.upper},
        "convention": scene.convention,
    }
    for p in scene.projectors:
        pd = {
            "id": p.id,
            "resolution": list(p.resolution),
            "focal": list(p.focal),
            "principal_point": list(p.principal_point),
            "pose": _pose_to_dict(p.rotation, p.translation),
        }
        if p.gamma is not None:
            pd["gamma"] = {"a": p.gamma.a, "b": p.gamma.b, "c": p.gamma.c}
        data["projectors"].append(pd)
    for s in scene.surfaces:
        if s.kind == "plane":
            sd = {
                "kind": "plane",
                "id": s.id,
                "point": s.point.tolist(),
                "normal": s.normal.tolist(),
                "albedo": s.albedo,
            }
            if s.size is not None:
                sd["size"] = list(s.size)
        else:
            sd = {
                "kind": "heightfield",
                "id": s.id,
                "origin": s.origin.tolist(),
                "axis_u": s.axis_u.tolist(),
                "axis_v": s.axis_v.tolist(),
                "spacing": s.spacing,
                "heights": {"grid": s.heights.tolist()},
                "albedo": s.albedo,
            }
        data["surfaces"].append(sd)
    for t in scene.targets:
        image = t.image
        if isinstance(image, np.ndarray):
            raise SceneError("cannot serialize in-memory target images")
        data["targets"].append({"surface": t.surface, "image": image})
    return data


def load_scene(path) -> SceneDescription:
    path = Path(path)
    with open(path) as f:
        data = yaml.safe_load(f)
    return scene_from_dict(data, base=path.parent)


def save_scene(scene: SceneDescription, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(scene_to_dict(scene), f, sort_keys=False)
