"""Depth-dependent multi-projector display simulation.

Generates per-projector patterns whose superposition on several 3D surfaces
recombines into independent target images, and evaluates the result against a
global linear-factorization baseline.
"""

from .scene import (
    ProjectorModel,
    SurfaceModel,
    VirtualCamera,
    SceneDescription,
    SolverBounds,
)
from .sceneio import load_scene, save_scene
from .calib import GammaModel, CorrespondenceMap, decode_correspondences
from .system import SparseSystem, build_inverse_projection, assemble
from .solver import (
    EpipolarPatternSolver,
    LinearFactorizationSolver,
    solve_eo,
    solve_lf,
)
from .render import render_patterns, psnr, ssim

__all__ = [
    "ProjectorModel",
    "SurfaceModel",
    "VirtualCamera",
    "SceneDescription",
    "SolverBounds",
    "load_scene",
    "save_scene",
    "GammaModel",
    "CorrespondenceMap",
    "decode_correspondences",
    "SparseSystem",
    "build_inverse_projection",
    "assemble",
    "EpipolarPatternSolver",
    "LinearFactorizationSolver",
    "solve_eo",
    "solve_lf",
    "render_patterns",
    "psnr",
    "ssim",
]

__version__ = "0.1.0"
