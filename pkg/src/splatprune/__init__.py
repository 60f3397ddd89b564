"""Prune-and-refine toolkit for 3D Gaussian splatting models."""

from .gaussians import GaussianCloud, read_ply, write_ply
from .pruner import PruneConfig, prune
from .rasterizer import Camera, rasterize

__all__ = ["Camera", "GaussianCloud", "PruneConfig", "prune", "rasterize", "read_ply", "write_ply"]
__version__ = "0.1.0"
