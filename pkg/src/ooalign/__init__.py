"""Text- and geometry-guided alignment of a source mesh onto a target mesh."""

from .estimator import MeshAligner
from .guidance import GuidanceTarget
from .losses import IcpConfig, LossBreakdown, LossWeights, PenetrationConfig
from .mesh import TriMesh, compute_stats, compute_vertex_normals, load_obj, remesh_subdivide, save_obj
from .optim import AlignConfig, run_alignment
from .pose import PoseParams, apply_pose, backprop_pose, compose_scene

__version__ = "0.1.0"

__all__ = [
    "MeshAligner",
    "AlignConfig",
    "GuidanceTarget",
    "TriMesh",
    "PoseParams",
    "IcpConfig",
    "PenetrationConfig",
    "LossWeights",
    "LossBreakdown",
    "load_obj",
    "save_obj",
    "compute_stats",
    "compute_vertex_normals",
    "remesh_subdivide",
    "apply_pose",
    "backprop_pose",
    "compose_scene",
    "run_alignment",
    "__version__",
]
