"""Similarity-transform parameterization and its analytic Jacobians.

A pose maps source vertices v to s * R(q / |q|) * v + tau. Scale is carried in
log space so any real-valued optimizer step keeps s positive; the quaternion
is stored unnormalized and normalized on application, with the normalization
Jacobian included in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import PoseError
from .mesh import TriMesh
from .validation import as_float_array, check_mesh, check_pose, require_finite

NUM_POSE_PARAMS = 8  # tau (3) + quat (4) + log_scale (1)


@dataclass(frozen=True)
class PoseParams:
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tau", as_float_array(self.tau, "tau", (3,)))
        object.__setattr__(self, "quat", as_float_array(self.quat, "quat", (4,)))
        object.__setattr__(self, "log_scale", float(self.log_scale))

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    def unit_quat(self) -> np.ndarray:
        n = np.linalg.norm(self.quat)
        if n < 1e-12:
            raise PoseError("quaternion norm too small to normalize")
        return self.quat / n

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.unit_quat())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.quat, [self.log_scale]])

    @classmethod
    def from_vector(cls, vec) -> "PoseParams":
        vec = as_float_array(vec, "pose vector", (NUM_POSE_PARAMS,))
        return cls(tau=vec[:3], quat=vec[3:7], log_scale=float(vec[7]))

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls()

    def inverse(self) -> "PoseParams":
        """Pose undoing this one: v = s R u + tau  =>  u = (1/s) R^T (v - tau)."""
        q = self.unit_quat()
        q_inv = np.array([q[0], -q[1], -q[2], -q[3]])
        r_inv = quat_to_matrix(q_inv)
        s_inv = np.exp(-self.log_scale)
        return PoseParams(tau=-s_inv * (r_inv @ self.tau), quat=q_inv, log_scale=-self.log_scale)

    def compose(self, other: "PoseParams") -> "PoseParams":
        """Pose equivalent to applying ``other`` first, then ``self``."""
        q = quat_multiply(self.unit_quat(), other.unit_quat())
        tau = self.scale * (self.rotation_matrix() @ other.tau) + self.tau
        return PoseParams(tau=tau, quat=q, log_scale=self.log_scale + other.log_scale)

    def rotation_angle_deg(self) -> float:
        w, x, y, z = self.unit_quat()
        return float(np.degrees(2.0 * np.arctan2(np.linalg.norm([x, y, z]), abs(w))))

    def to_json_dict(self) -> dict:
        return {
            "tau": [float(t) for t in self.tau],
            "quat": [float(c) for c in self.unit_quat()],
            "scale": self.scale,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PoseParams":
        return cls(tau=d["tau"], quat=d["quat"], log_scale=float(np.log(d["scale"])))


@dataclass(frozen=True)
class PoseGradient:
    d_tau: np.ndarray
    d_quat: np.ndarray  # w.r.t. the unnormalized quaternion
    d_log_scale: float

    def __post_init__(self):
        object.__setattr__(self, "d_tau", as_float_array(self.d_tau, "d_tau", (3,)))
        object.__setattr__(self, "d_quat", as_float_array(self.d_quat, "d_quat", (4,)))
        object.__setattr__(self, "d_log_scale", float(self.d_log_scale))
        require_finite(self.d_tau, "d_tau")
        require_finite(self.d_quat, "d_quat")
        if not np.isfinite(self.d_log_scale):
            raise PoseError("d_log_scale is non-finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.d_tau, self.d_quat, [self.d_log_scale]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = as_float_array(axis, "axis", (3,))
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise PoseError("rotation axis has near-zero norm")
    half = 0.5 * float(angle_rad)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Extrinsic x-y-z Euler angles (radians): R = Rz @ Ry @ Rx."""
    qx = quat_from_axis_angle([1, 0, 0], rx)
    qy = quat_from_axis_angle([0, 1, 0], ry)
    qz = quat_from_axis_angle([0, 0, 1], rz)
    return quat_multiply(qz, quat_multiply(qy, qx))


# Partial derivatives of the rotation matrix w.r.t. unit-quaternion components.
def _dR_dq(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return np.stack([dw, dx, dy, dz])  # (4, 3, 3)


def apply_pose(mesh: TriMesh, pose: PoseParams) -> TriMesh:
    """Return the posed mesh: vertices -> s R v + tau, normals rotated by R."""
    check_pose(pose)
    rot = pose.rotation_matrix()
    verts = pose.scale * (mesh.vertices @ rot.T) + pose.tau
    require_finite(verts, "posed vertices")
    normals = mesh.vertex_normals @ rot.T if mesh.vertex_normals is not None else None
    return replace(mesh, vertices=verts, vertex_normals=normals)


def backprop_pose(mesh: TriMesh, pose: PoseParams, d_vertices: np.ndarray) -> PoseGradient:
    """Chain-rule vertex-space gradients back to the 8 pose parameters.

    Includes the quaternion-normalization Jacobian, so ``d_quat`` is the
    gradient w.r.t. the *unnormalized* stored quaternion and is orthogonal
    to it. d/d(log s) = s * sum_i <d_i, R v_i>.
    """
    d_vertices = as_float_array(d_vertices, "d_vertices")
    if d_vertices.shape != mesh.vertices.shape:
        raise PoseError(
            f"d_vertices shape {d_vertices.shape} != vertices shape {mesh.vertices.shape}"
        )
    require_finite(d_vertices, "d_vertices")
    check_pose(pose)

    q = pose.quat
    q_norm = np.linalg.norm(q)
    q_hat = q / q_norm
    rot = quat_to_matrix(q_hat)
    s = pose.scale

    d_tau = d_vertices.sum(axis=0)

    rv = mesh.vertices @ rot.T  # R v_i
    d_log_scale = s * float(np.einsum("ij,ij->", d_vertices, rv))

    # d/d q_hat_k = s * sum_i d_i^T (dR/dq_hat_k) v_i
    dR = _dR_dq(q_hat)  # (4, 3, 3)
    # sum_i outer(d_i, v_i) contracted against each dR slice
    outer = d_vertices.T @ mesh.vertices  # (3, 3) = sum_i d_i v_i^T
    d_qhat = s * np.einsum("kab,ab->k", dR, outer)

    # normalization Jacobian: d q_hat / d q = (I - q_hat q_hat^T) / |q|
    d_quat = (d_qhat - q_hat * float(d_qhat @ q_hat)) / q_norm
    return PoseGradient(d_tau=d_tau, d_quat=d_quat, d_log_scale=d_log_scale)


def compose_scene(target: TriMesh, posed_source: TriMesh) -> TriMesh:
    """Concatenate target and posed source into one labeled scene mesh.

    Target keeps its existing provenance labels (0 if it has none); the source
    block gets the next free label, recorded in ``meta['source_label']`` so
    rendering and gradient routing can identify the active object.
    """
    if posed_source.vertex_count == 0:
        return target
    check_mesh(target)
    check_mesh(posed_source)
    t_labels = (
        target.vertex_labels
        if target.vertex_labels is not None
        else np.zeros(target.vertex_count, dtype=np.int64)
    )
    source_label = int(t_labels.max()) + 1 if t_labels.size else 1
    labels = np.concatenate([t_labels, np.full(posed_source.vertex_count, source_label, dtype=np.int64)])
    verts = np.vstack([target.vertices, posed_source.vertices])
    faces = np.vstack([target.faces, posed_source.faces + target.vertex_count])
    normals = None
    if target.vertex_normals is not None and posed_source.vertex_normals is not None:
        normals = np.vstack([target.vertex_normals, posed_source.vertex_normals])
    return TriMesh(
        verts,
        faces,
        vertex_normals=normals,
        name=f"{target.name}+{posed_source.name}",
        vertex_labels=labels,
        meta={"source_label": source_label},
    )
