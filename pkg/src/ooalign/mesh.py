"""Triangle-mesh representation, OBJ ingestion, and preprocessing.

All operations are pure: meshes are immutable after construction and every
transform returns a new TriMesh. Vertices are float64 model units; faces are
0-based index triples with counter-clockwise winding meaning outward normal.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import MeshLoadError
from .validation import DEGENERATE_AREA_EPS, as_points_array, check_mesh, triangle_areas

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, CCW winding
    vertex_normals: Optional[np.ndarray] = None  # (V, 3) unit vectors
    name: str = "mesh"
    vertex_labels: Optional[np.ndarray] = None  # (V,) int object provenance
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        verts = as_points_array(self.vertices, "vertices")
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        if self.vertex_normals is not None:
            vn = as_points_array(self.vertex_normals, "vertex_normals")
            vn.flags.writeable = False
            object.__setattr__(self, "vertex_normals", vn)
        if self.vertex_labels is not None:
            labels = np.ascontiguousarray(self.vertex_labels, dtype=np.int64)
            labels.flags.writeable = False
            object.__setattr__(self, "vertex_labels", labels)

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray, vertex_normals=None) -> "TriMesh":
        return replace(self, vertices=vertices, vertex_normals=vertex_normals)

    def face_labels(self) -> Optional[np.ndarray]:
        """Per-face provenance label (label of the face's first vertex)."""
        if self.vertex_labels is None:
            return None
        return self.vertex_labels[self.faces[:, 0]]


@dataclass(frozen=True)
class MeshStats:
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    centroid: np.ndarray  # area-weighted surface centroid
    signed_volume: float
    vertex_count: int
    face_count: int
    watertight: bool

    @property
    def bbox_sides(self) -> np.ndarray:
        return self.aabb_max - self.aabb_min

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_sides))


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------


def load_obj(path) -> TriMesh:
    """Read a Wavefront OBJ file (v / vn / f records, '#' comments).

    Polygonal faces are fan-triangulated, indices normalized to 0-based.
    Materials, texture coordinates, and groups are ignored. Degenerate faces
    (repeated indices or area <= 1e-12) are dropped with a warning count.
    Negative (relative) indices are rejected.
    """
    verts: list[tuple[float, float, float]] = []
    normals: list[tuple[float, float, float]] = []
    face_tuples: list[tuple[int, int, int]] = []
    face_normal_idx: list[tuple[int, int, int]] = []
    name = None

    def parse_index(token: str, lineno: int) -> tuple[int, Optional[int]]:
        parts = token.split("/")
        try:
            vi = int(parts[0])
        except ValueError as exc:
            raise MeshLoadError(f"{path}: line {lineno}: bad face token '{token}'") from exc
        ni = None
        if len(parts) >= 3 and parts[2] != "":
            try:
                ni = int(parts[2])
            except ValueError as exc:
                raise MeshLoadError(f"{path}: line {lineno}: bad face token '{token}'") from exc
        if vi < 0 or (ni is not None and ni < 0):
            raise MeshLoadError(f"{path}: line {lineno}: negative indices are not supported")
        if vi == 0 or ni == 0:
            raise MeshLoadError(f"{path}: line {lineno}: OBJ indices are 1-based, got 0")
        return vi - 1, None if ni is None else ni - 1

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            rec = parts[0]
            try:
                if rec == "v":
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif rec == "vn":
                    normals.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif rec == "f":
                    if len(parts) < 4:
                        raise MeshLoadError(f"{path}: line {lineno}: face with fewer than 3 vertices")
                    corners = [parse_index(tok, lineno) for tok in parts[1:]]
                    # fan triangulation preserves winding
                    for k in range(1, len(corners) - 1):
                        face_tuples.append((corners[0][0], corners[k][0], corners[k + 1][0]))
                        face_normal_idx.append((corners[0][1], corners[k][1], corners[k + 1][1]))
                elif rec == "o" and len(parts) > 1:
                    name = parts[1]
                # vt, g, s, usemtl, mtllib: ignored
            except MeshLoadError:
                raise
            except (ValueError, IndexError) as exc:
                raise MeshLoadError(f"{path}: line {lineno}: cannot parse '{line}'") from exc

    if not verts:
        raise MeshLoadError(f"{path}: no vertices found")
    if not face_tuples:
        raise MeshLoadError(f"{path}: no faces found")

    vertices = np.array(verts, dtype=np.float64)
    faces = np.array(face_tuples, dtype=np.int64)
    if faces.max() >= len(vertices):
        bad = int(faces.max())
        raise MeshLoadError(f"{path}: face references vertex {bad + 1} but only {len(vertices)} exist")

    faces, dropped = _drop_degenerate_faces(vertices, faces)
    if dropped:
        logger.warning("%s: dropped %d degenerate face(s)", path, dropped)
    if faces.shape[0] == 0:
        raise MeshLoadError(f"{path}: all faces degenerate")

    # Attach file normals only when they map one-to-one onto vertices.
    vertex_normals = None
    if normals and len(normals) == len(verts):
        if all(
            ni is not None and ni == vi
            for tri, ntri in zip(face_tuples, face_normal_idx)
            for vi, ni in zip(tri, ntri)
        ):
            vn = np.array(normals, dtype=np.float64)
            lengths = np.linalg.norm(vn, axis=1, keepdims=True)
            vn = np.divide(vn, lengths, out=np.zeros_like(vn), where=lengths > 1e-12)
            vertex_normals = vn

    mesh_name = name if name is not None else _stem(path)
    meta = {"degenerate_faces_dropped": dropped} if dropped else {}
    return TriMesh(vertices, faces, vertex_normals=vertex_normals, name=mesh_name, meta=meta)


def save_obj(mesh: TriMesh, path) -> None:
    """Write v/vn/f records with lossless float formatting (1-based indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"o {mesh.name}\n")
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        if mesh.vertex_normals is not None:
            for n in mesh.vertex_normals:
                fh.write(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}\n")
            for f in mesh.faces:
                a, b, c = (int(i) + 1 for i in f)
                fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
        else:
            for f in mesh.faces:
                fh.write(f"f {int(f[0]) + 1} {int(f[1]) + 1} {int(f[2]) + 1}\n")


def _stem(path) -> str:
    import os

    return os.path.splitext(os.path.basename(str(path)))[0]


def _drop_degenerate_faces(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, int]:
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    areas = triangle_areas(vertices, faces)
    keep = distinct & (areas > DEGENERATE_AREA_EPS)
    return faces[keep], int((~keep).sum())


# ---------------------------------------------------------------------------
# Bulk queries
# ---------------------------------------------------------------------------


def compute_stats(mesh: TriMesh) -> MeshStats:
    """Bounding box, area-weighted surface centroid, signed volume, watertightness.

    signed_volume is the divergence-theorem sum of det(v0, v1, v2) / 6 over
    faces: positive for consistently outward-wound watertight meshes.
    A mesh is watertight when every directed edge appears exactly once and its
    reverse also appears exactly once (each edge shared by two opposing faces).
    """
    verts, faces = mesh.vertices, mesh.faces
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total_area = float(areas.sum())
    face_centroids = (v0 + v1 + v2) / 3.0
    if total_area > 0:
        centroid = (areas[:, None] * face_centroids).sum(axis=0) / total_area
    else:
        centroid = verts.mean(axis=0)
    signed_volume = float(np.einsum("ij,ij->i", np.cross(v0, v1), v2).sum() / 6.0)
    return MeshStats(
        aabb_min=verts.min(axis=0),
        aabb_max=verts.max(axis=0),
        centroid=centroid,
        signed_volume=signed_volume,
        vertex_count=mesh.vertex_count,
        face_count=mesh.face_count,
        watertight=_is_watertight(faces),
    )


def _is_watertight(faces: np.ndarray) -> bool:
    if faces.shape[0] == 0:
        return False
    directed = {}
    for a, b, c in faces:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v))
            directed[key] = directed.get(key, 0) + 1
    for (u, v), count in directed.items():
        if count != 1 or directed.get((v, u), 0) != 1:
            return False
    return True


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def remesh_subdivide(mesh: TriMesh, target_vertex_count: int) -> TriMesh:
    """Longest-edge midpoint subdivision until vertex count >= target.

    New vertices land on existing edges, so surface geometry (total area,
    signed volume) is preserved exactly. Deterministic: ties between equally
    long edges break on vertex indices.
    """
    if target_vertex_count <= mesh.vertex_count:
        return mesh

    verts = [tuple(map(float, p)) for p in mesh.vertices]
    faces: dict[int, tuple[int, int, int]] = {i: tuple(map(int, f)) for i, f in enumerate(mesh.faces)}
    next_face_id = len(faces)

    edge_faces: dict[tuple[int, int], set[int]] = {}

    def edge_key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def register(fid: int, tri: tuple[int, int, int]) -> None:
        for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_faces.setdefault(edge_key(u, v), set()).add(fid)

    def unregister(fid: int, tri: tuple[int, int, int]) -> None:
        for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = edge_key(u, v)
            bucket = edge_faces.get(key)
            if bucket is not None:
                bucket.discard(fid)
                if not bucket:
                    del edge_faces[key]

    for fid, tri in faces.items():
        register(fid, tri)

    def edge_len2(key: tuple[int, int]) -> float:
        pa, pb = verts[key[0]], verts[key[1]]
        return (pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2 + (pa[2] - pb[2]) ** 2

    heap = [(-edge_len2(k), k) for k in edge_faces]
    heapq.heapify(heap)

    while len(verts) < target_vertex_count and heap:
        _, key = heapq.heappop(heap)
        if key not in edge_faces:
            continue  # stale entry (edge already split)
        a, b = key
        pa, pb = verts[a], verts[b]
        mid = ((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0, (pa[2] + pb[2]) / 2.0)
        m = len(verts)
        verts.append(mid)

        created: set[tuple[int, int]] = set()
        for fid in sorted(edge_faces[key]):
            tri = faces.pop(fid)
            unregister(fid, tri)
            # rotate so the split edge is (tri[0], tri[1]) preserving winding
            if {tri[0], tri[1]} == {a, b}:
                x, y, z = tri
            elif {tri[1], tri[2]} == {a, b}:
                x, y, z = tri[1], tri[2], tri[0]
            else:
                x, y, z = tri[2], tri[0], tri[1]
            for new_tri in ((x, m, z), (m, y, z)):
                fid_new = next_face_id
                next_face_id += 1
                faces[fid_new] = new_tri
                register(fid_new, new_tri)
                created.update(
                    edge_key(u, v)
                    for u, v in ((new_tri[0], new_tri[1]), (new_tri[1], new_tri[2]), (new_tri[2], new_tri[0]))
                )
        for k in sorted(created):
            if k in edge_faces:
                heapq.heappush(heap, (-edge_len2(k), k))

    new_faces = np.array([faces[fid] for fid in sorted(faces)], dtype=np.int64)
    out = TriMesh(np.array(verts), new_faces, name=mesh.name, meta=dict(mesh.meta))
    return check_mesh(out)


def compute_vertex_normals(mesh: TriMesh) -> TriMesh:
    """Per-vertex normals as the normalized angle-weighted mean of incident
    face normals. Isolated vertices get a zero normal and are flagged in
    ``meta['zero_normal_vertices']``.
    """
    verts, faces = mesh.vertices, mesh.faces
    accum = np.zeros_like(verts)
    corner_verts = verts[faces]  # (F, 3, 3)
    for c in range(3):
        p = corner_verts[:, c]
        e1 = corner_verts[:, (c + 1) % 3] - p
        e2 = corner_verts[:, (c + 2) % 3] - p
        n = np.cross(e1, e2)  # face normal direction (CCW outward), |n| = 2*area
        n_len = np.linalg.norm(n, axis=1, keepdims=True)
        unit_n = np.divide(n, n_len, out=np.zeros_like(n), where=n_len > 1e-300)
        cosang = np.einsum("ij,ij->i", e1, e2) / np.maximum(
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300
        )
        angles = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(accum, faces[:, c], unit_n * angles[:, None])
    lengths = np.linalg.norm(accum, axis=1, keepdims=True)
    normals = np.divide(accum, lengths, out=np.zeros_like(accum), where=lengths > 1e-12)
    zero = np.nonzero(lengths[:, 0] <= 1e-12)[0]
    meta = dict(mesh.meta)
    if zero.size:
        meta["zero_normal_vertices"] = [int(i) for i in zero]
    return replace(mesh, vertex_normals=normals, meta=meta)


def ensure_vertex_normals(mesh: TriMesh) -> TriMesh:
    return mesh if mesh.vertex_normals is not None else compute_vertex_normals(mesh)


def upright_canonicalize(mesh: TriMesh) -> TriMesh:
    """Heuristic upright reorientation used in place of an external
    canonicalization tool (off by default in the CLI).

    Convention: principal axes of the vertex covariance are mapped so the
    smallest-variance axis goes to +y, the largest to +x, the middle to +z
    (sign-fixed for a right-handed frame); the mesh is then centered at its
    area-weighted surface centroid. If the covariance spectrum is fully
    degenerate (all eigenvalues equal within 1e-9 relative) the rotation is
    the identity. The applied rotation is recorded in ``meta['canonicalize']``.
    """
    stats = compute_stats(mesh)
    centered = mesh.vertices - stats.centroid
    cov = np.cov(centered, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending

    scale = max(abs(eigvals).max(), 1e-300)
    if (eigvals.max() - eigvals.min()) / scale < 1e-9:
        rot = np.eye(3)
    else:
        # columns of eigvecs are eigenvectors; ascending variance order
        y_axis = eigvecs[:, 0]  # smallest variance -> up
        x_axis = eigvecs[:, 2]  # largest variance -> +x
        z_axis = eigvecs[:, 1]
        axes = []
        for ax in (x_axis, y_axis, z_axis):
            k = int(np.argmax(np.abs(ax)))
            axes.append(-ax if ax[k] < 0 else ax)
        x_axis, y_axis, z_axis = axes
        rot = np.stack([x_axis, y_axis, z_axis])  # rows: world axes in mesh frame
        if np.linalg.det(rot) < 0:
            rot[2] = -rot[2]

    new_verts = centered @ rot.T
    normals = mesh.vertex_normals @ rot.T if mesh.vertex_normals is not None else None
    meta = dict(mesh.meta)
    meta["canonicalize"] = {
        "rotation": rot.tolist(),
        "centroid": stats.centroid.tolist(),
        "eigenvalues": eigvals.tolist(),
        "convention": "smallest-variance axis -> +y, largest -> +x",
    }
    return TriMesh(
        new_verts,
        mesh.faces,
        vertex_normals=normals,
        name=mesh.name,
        vertex_labels=mesh.vertex_labels,
        meta=meta,
    )
