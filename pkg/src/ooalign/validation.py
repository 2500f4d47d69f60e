"""Input validation helpers used at public API boundaries.

Kept separate so the estimator facade, CLI, and library functions can share
one set of checks without importing each other.
"""

from __future__ import annotations

import numpy as np

from .errors import MeshValidationError, PoseError

DEGENERATE_AREA_EPS = 1e-12
UNIT_NORMAL_TOL = 1e-6


def as_float_array(x, name: str, shape=None) -> np.ndarray:
    """Coerce to a float64 C-contiguous array, optionally enforcing a shape."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr


def as_points_array(x, name: str) -> np.ndarray:
    """Coerce to an (N, 3) float64 array of 3D points."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def require_finite(arr: np.ndarray, name: str, error=PoseError) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise error(f"{name} contains non-finite entries")
    return arr


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def check_mesh(mesh, require_normals: bool = False):
    """Validate TriMesh invariants; returns the mesh unchanged on success.

    Checks: face indices in range, three distinct indices per face, no
    degenerate (near-zero-area) face, and unit-length normals when present.
    """
    verts = mesh.vertices
    faces = mesh.faces
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise MeshValidationError(f"vertices must be (V, 3), got {verts.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshValidationError(f"faces must be (F, 3), got {faces.shape}")
    if not np.all(np.isfinite(verts)):
        raise MeshValidationError("vertices contain non-finite coordinates")
    if faces.size:
        if faces.min() < 0 or faces.max() >= len(verts):
            raise MeshValidationError(
                f"face index out of range [0, {len(verts)}) in mesh '{mesh.name}'"
            )
        distinct = (
            (faces[:, 0] != faces[:, 1])
            & (faces[:, 1] != faces[:, 2])
            & (faces[:, 0] != faces[:, 2])
        )
        if not distinct.all():
            raise MeshValidationError("face with repeated vertex indices")
        areas = triangle_areas(verts, faces)
        if (areas <= DEGENERATE_AREA_EPS).any():
            bad = int(np.argmax(areas <= DEGENERATE_AREA_EPS))
            raise MeshValidationError(f"degenerate face {bad} (area <= {DEGENERATE_AREA_EPS})")
    if mesh.vertex_normals is not None:
        norms = np.linalg.norm(mesh.vertex_normals, axis=1)
        zero = norms < 1e-12
        off = np.abs(norms[~zero] - 1.0)
        if off.size and off.max() > UNIT_NORMAL_TOL:
            raise MeshValidationError("vertex normals are not unit length")
    elif require_normals:
        raise MeshValidationError(f"mesh '{mesh.name}' has no vertex normals")
    return mesh


def check_pose(pose):
    """Validate that pose components are finite and the quaternion nonzero."""
    require_finite(pose.tau, "pose.tau")
    require_finite(pose.quat, "pose.quat")
    if not np.isfinite(pose.log_scale):
        raise PoseError("pose.log_scale is non-finite")
    if np.linalg.norm(pose.quat) < 1e-12:
        raise PoseError("pose quaternion has near-zero norm")
    return pose
