"""Physical-plausibility and semantic evaluation of final alignments.

The volumetric intersection ratio voxelizes the joint bounding box and tests
voxel centers for containment with x-axis ray-crossing parity; rays that hit
a triangle edge or vertex exactly are re-cast with a deterministic jitter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .guidance import GuidanceError, GuidanceTarget, clip_loss_from_scores, evaluate
from .mesh import TriMesh, compute_stats
from .render import Camera, RING_ELEVATION_DEG, render_soft

logger = logging.getLogger(__name__)

DEFAULT_VOXEL_RESOLUTION = 128
EVAL_DISTANCE_FACTOR = 2.0  # x scene bbox diagonal; frozen for comparability
EVAL_NUM_VIEWS = 8
_EDGE_TOL = 1e-10
_MAX_JITTER_ROUNDS = 5


@dataclass(frozen=True)
class IntersectionReport:
    intersection_volume: float
    union_volume: float
    ratio: float
    voxel_resolution: int
    watertight_flags: tuple[bool, bool]

    def to_json_dict(self) -> dict:
        return {
            "intersection_volume": self.intersection_volume,
            "union_volume": self.union_volume,
            "ratio": self.ratio,
            "voxel_resolution": self.voxel_resolution,
            "watertight": list(self.watertight_flags),
        }


@dataclass(frozen=True)
class SemanticReport:
    per_view_scores: list[float]
    mean_score: float
    num_views: int
    provider_id: str
    available: bool = True

    def to_json_dict(self) -> dict:
        return {
            "per_view_scores": self.per_view_scores,
            "mean_score": self.mean_score,
            "num_views": self.num_views,
            "provider_id": self.provider_id,
            "available": self.available,
        }


def _ray_crossings(mesh: TriMesh, ray_y: np.ndarray, ray_z: np.ndarray):
    """x-coordinates where +x rays through (y, z) points cross the surface.

    Returns (ray_idx array, x array, tie_mask over rays). Ties are hits within
    _EDGE_TOL of a triangle boundary in barycentric terms, or triangles seen
    edge-on by the ray.
    """
    verts, faces = mesh.vertices, mesh.faces
    n_rays = len(ray_y)
    tie = np.zeros(n_rays, dtype=bool)
    idx_chunks: list[np.ndarray] = []
    x_chunks: list[np.ndarray] = []

    tri = verts[faces]  # (F, 3, 3)
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = p1 - p0
    e2 = p2 - p0
    # 2x2 solve in the (y, z) plane: q - p0 = u e1 + v e2
    det = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    order_y = np.argsort(ray_y, kind="stable")
    ray_y_sorted = ray_y[order_y]

    for f in range(len(faces)):
        if abs(det[f]) < 1e-300:
            continue  # edge-on to the ray direction: measure-zero grazing hit
        y_lo, y_hi = tri[f, :, 1].min(), tri[f, :, 1].max()
        z_lo, z_hi = tri[f, :, 2].min(), tri[f, :, 2].max()
        lo = np.searchsorted(ray_y_sorted, y_lo - _EDGE_TOL, side="left")
        hi = np.searchsorted(ray_y_sorted, y_hi + _EDGE_TOL, side="right")
        cand = order_y[lo:hi]
        if cand.size == 0:
            continue
        cand = cand[(ray_z[cand] >= z_lo - _EDGE_TOL) & (ray_z[cand] <= z_hi + _EDGE_TOL)]
        if cand.size == 0:
            continue
        dy = ray_y[cand] - p0[f, 1]
        dz = ray_z[cand] - p0[f, 2]
        inv = 1.0 / det[f]
        u = (dy * e2[f, 2] - dz * e2[f, 1]) * inv
        v = (dz * e1[f, 1] - dy * e1[f, 2]) * inv
        w = 1.0 - u - v
        inside = (u > _EDGE_TOL) & (v > _EDGE_TOL) & (w > _EDGE_TOL)
        boundary = (
            (np.abs(u) <= _EDGE_TOL) | (np.abs(v) <= _EDGE_TOL) | (np.abs(w) <= _EDGE_TOL)
        ) & (u >= -_EDGE_TOL) & (v >= -_EDGE_TOL) & (w >= -_EDGE_TOL)
        tie[cand[boundary]] = True
        if inside.any():
            sel = cand[inside]
            x_cross = p0[f, 0] + u[inside] * e1[f, 0] + v[inside] * e2[f, 0]
            idx_chunks.append(sel)
            x_chunks.append(x_cross)

    if idx_chunks:
        return np.concatenate(idx_chunks), np.concatenate(x_chunks), tie
    return np.zeros(0, dtype=np.int64), np.zeros(0), tie


def _inside_grid(mesh: TriMesh, xs: np.ndarray, ys: np.ndarray, zs: np.ndarray, diag: float) -> np.ndarray:
    """Boolean (nx, ny, nz) containment mask at voxel centers via +x parity."""
    ny, nz = len(ys), len(zs)
    gy, gz = np.meshgrid(ys, zs, indexing="ij")
    ray_y = gy.ravel().copy()
    ray_z = gz.ravel().copy()
    n_rays = ray_y.size
    nx = len(xs)
    tol = _EDGE_TOL * max(diag, 1.0)

    inside = np.zeros((nx, n_rays), dtype=bool)
    pending = np.arange(n_rays)
    for attempt in range(_MAX_JITTER_ROUNDS):
        ridx, x_cross, tie = _ray_crossings(mesh, ray_y[pending], ray_z[pending])
        # crossing count above each center via a (bin, ray) histogram:
        # bin = number of centers at or below the crossing
        bins = np.searchsorted(xs, x_cross, side="right")
        hist = np.zeros((nx + 1, len(pending)), dtype=np.int32)
        np.add.at(hist, (bins, ridx), 1)
        above = np.cumsum(hist[::-1], axis=0)[::-1]  # above[j] = crossings with bin >= j
        inside[:, pending] = (above[1:] % 2).astype(bool)
        # crossings landing within tol of a center x are parity ties
        near = np.searchsorted(xs, x_cross - tol, side="right") != np.searchsorted(
            xs, x_cross + tol, side="right"
        )
        tie[ridx[near]] = True
        retry = pending[tie]
        if retry.size == 0:
            break
        jitter = (attempt + 1) * 1e-7 * max(diag, 1.0)
        ray_y[retry] += jitter
        ray_z[retry] += jitter * 0.5
        pending = retry
    else:
        logger.warning("ray ties persisted after %d jitter rounds", _MAX_JITTER_ROUNDS)

    return inside.reshape(nx, ny, nz)


def intersection_ratio(
    mesh_a: TriMesh,
    mesh_b: TriMesh,
    resolution: int = DEFAULT_VOXEL_RESOLUTION,
) -> IntersectionReport:
    """Vol(a AND b) / Vol(a OR b) by voxel containment counts over the joint
    bounding box at ``resolution``^3. Non-watertight inputs are flagged and
    evaluated anyway (parity raycasting still gives a usable estimate)."""
    stats_a, stats_b = compute_stats(mesh_a), compute_stats(mesh_b)
    flags = (stats_a.watertight, stats_b.watertight)
    if not all(flags):
        logger.warning(
            "intersection_ratio on non-watertight input (a=%s, b=%s)", *flags
        )
    lo = np.minimum(stats_a.aabb_min, stats_b.aabb_min)
    hi = np.maximum(stats_a.aabb_max, stats_b.aabb_max)
    span = hi - lo
    diag = float(np.linalg.norm(span))
    if diag <= 0:
        raise ValueError("degenerate joint bounding box")
    span = np.maximum(span, 1e-9 * diag)
    h = span / resolution
    xs = lo[0] + (np.arange(resolution) + 0.5) * h[0]
    ys = lo[1] + (np.arange(resolution) + 0.5) * h[1]
    zs = lo[2] + (np.arange(resolution) + 0.5) * h[2]

    in_a = _inside_grid(mesh_a, xs, ys, zs, diag)
    in_b = _inside_grid(mesh_b, xs, ys, zs, diag)
    voxel_vol = float(h[0] * h[1] * h[2])
    inter = int(np.count_nonzero(in_a & in_b))
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        raise ValueError("zero union volume: neither mesh occupies any voxel")
    return IntersectionReport(
        intersection_volume=inter * voxel_vol,
        union_volume=union * voxel_vol,
        ratio=inter / union,
        voxel_resolution=resolution,
        watertight_flags=flags,
    )


def _closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle (a, b, c) to each query p (row-wise)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    result = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def commit(mask, pts):
        sel = mask & ~done
        result[sel] = pts[sel]
        done[sel] = True

    commit((d1 <= 0) & (d2 <= 0), a)  # vertex a
    commit((d3 >= 0) & (d4 <= d3), b)  # vertex b
    commit((d6 >= 0) & (d5 <= d6), c)  # vertex c

    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(np.abs(d1 - d3) > 0, d1 / (d1 - d3), 0.0)
    commit((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)  # edge ab

    vb = d5 * d2 - d1 * d6
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = np.where(np.abs(d2 - d6) > 0, d2 / (d2 - d6), 0.0)
    commit((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)  # edge ac

    va = d3 * d6 - d5 * d4
    denom_bc = (d4 - d3) + (d5 - d6)
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = np.where(np.abs(denom_bc) > 0, (d4 - d3) / denom_bc, 0.0)
    commit((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b))  # edge bc

    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(np.abs(denom) > 0, vb / denom, 0.0)
        w = np.where(np.abs(denom) > 0, vc / denom, 0.0)
    commit(~done, a + v[:, None] * ab + w[:, None] * ac)
    return result


def nearest_surface_points(points: np.ndarray, mesh: TriMesh, k_candidates: int = 32):
    """Nearest point on the mesh surface for each query; exact within the
    k-nearest-centroid candidate set. Returns (closest_points, distances)."""
    faces = mesh.faces
    verts = mesh.vertices
    centroids = verts[faces].mean(axis=1)
    k = min(k_candidates, len(faces))
    _, cand = cKDTree(centroids).query(points, k=k)
    cand = cand.reshape(len(points), k)
    best_d = np.full(len(points), np.inf)
    best_p = np.zeros_like(points)
    for col in range(k):
        f = faces[cand[:, col]]
        cp = _closest_points_on_triangles(points, verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]])
        d = np.linalg.norm(points - cp, axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_p[better] = cp[better]
    return best_p, best_d


def contact_fraction(source: TriMesh, target: TriMesh, epsilon: float) -> float:
    """Share of source vertices within epsilon of the target surface."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, d = nearest_surface_points(source.vertices, target)
    return float(np.mean(d < epsilon))


def build_eval_cameras(
    scene: TriMesh,
    num_views: int = EVAL_NUM_VIEWS,
    resolution: tuple[int, int] = (224, 224),
) -> list[Camera]:
    """Fixed evaluation rig: azimuth ring at the standard elevation, looking at
    the source-object centroid, at EVAL_DISTANCE_FACTOR x scene bbox diagonal.
    Distinct from (and frozen independently of) the training rig."""
    stats = compute_stats(scene)
    if scene.vertex_labels is not None:
        source_label = scene.meta.get("source_label", int(scene.vertex_labels.max()))
        source_verts = scene.vertices[scene.vertex_labels == source_label]
        look_at = source_verts.mean(axis=0) if len(source_verts) else stats.centroid
    else:
        look_at = stats.centroid
    distance = EVAL_DISTANCE_FACTOR * stats.bbox_diagonal
    el = math.radians(RING_ELEVATION_DEG)
    cams = []
    for i in range(num_views):
        az = 2.0 * math.pi * i / num_views
        offset = np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        cams.append(Camera(eye=look_at + distance * offset, look_at=look_at, resolution=resolution))
    return cams


def semantic_eval(
    scene: TriMesh,
    target_spec: GuidanceTarget,
    provider,
    num_views: int = EVAL_NUM_VIEWS,
    resolution: tuple[int, int] = (224, 224),
) -> SemanticReport:
    """Mean image-text agreement over the fixed evaluation rig (no gradients).

    Provider failures yield an unavailable report rather than an exception so
    geometric metrics still get emitted.
    """
    cameras = build_eval_cameras(scene, num_views, resolution)
    views = [render_soft(scene, cam) for cam in cameras]
    try:
        result = evaluate(provider, target_spec, views, want_grads=False)
    except GuidanceError as exc:
        logger.warning("semantic eval unavailable: %s", exc)
        return SemanticReport([], float("nan"), num_views, "unavailable", available=False)
    scores = [float(s) for s in result.per_view_scores]
    return SemanticReport(
        per_view_scores=scores,
        mean_score=float(np.mean(scores)),
        num_views=num_views,
        provider_id=result.provider_id,
    )
