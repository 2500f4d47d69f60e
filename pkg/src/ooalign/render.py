"""Camera rig scheduling and a differentiable soft rasterizer.

The rasterizer computes per-pixel soft triangle coverage with a sigmoid of
the signed 2D distance to each triangle boundary (in pixels, divided by a
softness temperature), aggregates color across triangles with depth-softmax
weights, and shades flat Lambertian with a camera headlight. The forward pass
runs in torch; ``backprop_render`` uses autograd for the exact chain rule
back to world-space vertex positions. Rendering is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import RenderError
from .mesh import MeshStats, TriMesh
from .validation import as_float_array

# Pair tensors are small; intra-op threading only adds contention here, and a
# single thread keeps reductions bitwise reproducible across machines.
torch.set_num_threads(1)

DEFAULT_RESOLUTION = (224, 224)
DEFAULT_SOFTNESS_PX = 1.5
DEPTH_GAMMA = 0.05  # depth-softmax temperature on [0, 1]-normalized depth
RING_ELEVATION_DEG = 20.0
SIGMOID_SUPPORT = 12.0  # pixels of bbox padding per unit of softness temp
# sigma'(12) ~ 6e-6: keeps truncated-tail gradient error well inside the 5e-3
# finite-difference tolerance even for small glancing triangles

BACKGROUND_RGB = (1.0, 1.0, 1.0)
TARGET_RGB = (0.82, 0.82, 0.82)  # light gray
SOURCE_RGB = (1.0, 0.70, 0.38)  # light orange
AMBIENT = 0.35


@dataclass(frozen=True)
class Camera:
    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    vertical_fov_deg: float = 40.0
    resolution: tuple[int, int] = DEFAULT_RESOLUTION  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "eye", as_float_array(self.eye, "eye", (3,)))
        object.__setattr__(self, "look_at", as_float_array(self.look_at, "look_at", (3,)))
        object.__setattr__(self, "up", as_float_array(self.up, "up", (3,)))
        if np.linalg.norm(self.eye - self.look_at) < 1e-12:
            raise RenderError("camera eye coincides with look_at")
        if not (1.0 < self.vertical_fov_deg < 179.0):
            raise RenderError(f"fov must be in (1, 179) degrees, got {self.vertical_fov_deg}")

    def to_json_dict(self) -> dict:
        return {
            "eye": self.eye.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_deg": self.vertical_fov_deg,
            "resolution": list(self.resolution),
        }


@dataclass(frozen=True)
class RigSchedule:
    num_views: int = 8
    betas: tuple[float, ...] = (0.0, 0.5, 1.0)  # look-at interpolation per phase
    distance_factors: tuple[float, ...] = (2.0, 1.5, 1.0)  # x scene bbox diagonal

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        factors = tuple(float(f) for f in self.distance_factors)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "distance_factors", factors)
        if len(betas) != len(factors):
            raise ValueError("betas and distance_factors must have equal length")
        if not betas or betas[0] != 0.0:
            raise ValueError("betas must start at exactly 0")
        if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
            raise ValueError("betas must be strictly increasing")
        if betas[-1] > 1.0:
            raise ValueError("betas must not exceed 1")
        if any(f <= 0 for f in factors):
            raise ValueError("distance factors must be positive")
        if any(f2 > f1 for f1, f2 in zip(factors, factors[1:])):
            raise ValueError("distance factors must be non-increasing")

    @property
    def num_phases(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class RenderedView:
    rgba: np.ndarray  # (H, W, 4) float in [0, 1]; alpha = soft coverage
    camera: Camera

    def composited_rgb(self) -> np.ndarray:
        """RGB over a white background (what semantic scorers consume)."""
        alpha = self.rgba[..., 3:4]
        bg = np.asarray(BACKGROUND_RGB)
        return self.rgba[..., :3] * alpha + bg * (1.0 - alpha)


def build_rig(
    target_stats: MeshStats,
    source_stats: MeshStats,
    phase: int,
    schedule: RigSchedule,
    source_centroid=None,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    fov_deg: float = 40.0,
) -> list[Camera]:
    """Cameras for one phase: an azimuth ring at fixed elevation, looking at
    the interpolated point between target and source centroids, at a distance
    proportional to the joint scene bbox diagonal.
    """
    if not (1 <= phase <= schedule.num_phases):
        raise ValueError(f"phase {phase} outside [1, {schedule.num_phases}]")
    c_t = target_stats.centroid
    c_s = as_float_array(
        source_centroid if source_centroid is not None else source_stats.centroid,
        "source_centroid",
        (3,),
    )
    beta = schedule.betas[phase - 1]
    look_at = (1.0 - beta) * c_t + beta * c_s

    joint_min = np.minimum(target_stats.aabb_min, source_stats.aabb_min)
    joint_max = np.maximum(target_stats.aabb_max, source_stats.aabb_max)
    diag = float(np.linalg.norm(joint_max - joint_min))
    if diag <= 0:
        raise RenderError("degenerate scene bounding box (zero diagonal)")
    distance = schedule.distance_factors[phase - 1] * diag

    el = math.radians(RING_ELEVATION_DEG)
    cams = []
    for i in range(schedule.num_views):
        az = 2.0 * math.pi * i / schedule.num_views
        offset = np.array(
            [math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)]
        )
        cams.append(
            Camera(
                eye=look_at + distance * offset,
                look_at=look_at,
                vertical_fov_deg=fov_deg,
                resolution=resolution,
            )
        )
    return cams


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


def _face_colors(scene: TriMesh) -> np.ndarray:
    labels = scene.face_labels()
    colors = np.tile(np.asarray(SOURCE_RGB), (scene.face_count, 1))
    if labels is not None:
        source_label = scene.meta.get("source_label")
        if source_label is None:
            source_label = int(labels.max()) if labels.size else 0
        colors[labels != source_label] = np.asarray(TARGET_RGB)
    return colors


def _project(verts: torch.Tensor, camera: Camera) -> tuple[torch.Tensor, torch.Tensor]:
    """Perspective projection to pixel coordinates; returns ((V,2) xy, (V,) depth)."""
    eye = torch.from_numpy(camera.eye)
    fwd = torch.from_numpy(camera.look_at) - eye
    fwd = fwd / torch.linalg.norm(fwd)
    up_hint = torch.from_numpy(camera.up)
    right = torch.linalg.cross(fwd, up_hint)
    right = right / torch.linalg.norm(right)
    up = torch.linalg.cross(right, fwd)

    rel = verts - eye
    x = rel @ right
    y = rel @ up
    z = rel @ fwd  # positive in front of the camera

    width, height = camera.resolution
    tan_half = math.tan(math.radians(camera.vertical_fov_deg) / 2.0)
    aspect = width / height
    safe_z = torch.clamp(z, min=1e-12)
    x_ndc = x / (safe_z * tan_half * aspect)
    y_ndc = y / (safe_z * tan_half)
    px = (x_ndc + 1.0) * 0.5 * width
    py = (1.0 - y_ndc) * 0.5 * height
    return torch.stack([px, py], dim=1), z


def _segment_distance_sq(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ab = b - a
    ap = p - a
    denom = (ab * ab).sum(-1).clamp_min(1e-30)
    t = ((ap * ab).sum(-1) / denom).clamp(0.0, 1.0)
    closest = a + t.unsqueeze(-1) * ab
    d = p - closest
    return (d * d).sum(-1)


def _render_torch(scene: TriMesh, camera: Camera, softness_temp: float, verts: torch.Tensor):
    """Forward pass; ``verts`` may carry requires_grad for backprop."""
    width, height = camera.resolution
    n_px = width * height
    xy, z = _project(verts, camera)
    if not torch.all(torch.isfinite(xy)):
        raise RenderError("non-finite vertex after projection")

    white = torch.tensor(BACKGROUND_RGB, dtype=torch.float64)
    if scene.face_count == 0:
        rgb = white.expand(n_px, 3).clone()
        alpha = torch.zeros(n_px, dtype=torch.float64)
        return rgb.reshape(height, width, 3), alpha.reshape(height, width)

    faces = torch.from_numpy(np.array(scene.faces))
    tri_xy = xy[faces]  # (F, 3, 2)
    tri_z = z[faces]  # (F, 3)

    # Drop triangles touching or behind the near plane.
    cam_span = float(np.linalg.norm(camera.eye - camera.look_at))
    near = max(1e-9, 1e-6 * cam_span)
    visible = (tri_z > near).all(dim=1)
    vis_idx = torch.nonzero(visible, as_tuple=False).squeeze(1)
    if vis_idx.numel() == 0:
        rgb = white.expand(n_px, 3).clone()
        alpha = torch.zeros(n_px, dtype=torch.float64)
        return rgb.reshape(height, width, 3), alpha.reshape(height, width)

    # pixel-triangle candidate pairs from padded screen bboxes (not differentiated)
    pad = SIGMOID_SUPPORT * softness_temp + 1.0
    with torch.no_grad():
        t_xy = tri_xy[vis_idx]
        x0 = torch.clamp((t_xy[..., 0].min(dim=1).values - pad).floor_().long(), 0, width - 1)
        x1 = torch.clamp((t_xy[..., 0].max(dim=1).values + pad).ceil_().long(), 0, width - 1)
        y0 = torch.clamp((t_xy[..., 1].min(dim=1).values - pad).floor_().long(), 0, height - 1)
        y1 = torch.clamp((t_xy[..., 1].max(dim=1).values + pad).ceil_().long(), 0, height - 1)
        # skip triangles entirely off screen
        on = (t_xy[..., 0].max(dim=1).values >= -pad) & (t_xy[..., 0].min(dim=1).values <= width + pad)
        on &= (t_xy[..., 1].max(dim=1).values >= -pad) & (t_xy[..., 1].min(dim=1).values <= height + pad)
        bw = x1 - x0 + 1
        bh = y1 - y0 + 1
        counts = torch.where(on, bw * bh, torch.zeros_like(x0))
        pair_tri_rows = torch.repeat_interleave(torch.arange(len(vis_idx)), counts)
        total = int(counts.sum())
        starts = torch.cumsum(counts, 0) - counts
        within = torch.arange(total) - starts[pair_tri_rows]
        w_rows = bw[pair_tri_rows]
        px_col = x0[pair_tri_rows] + within % w_rows
        px_row = y0[pair_tri_rows] + torch.div(within, w_rows, rounding_mode="floor")
        pair_pix = px_row * width + px_col

    if pair_pix.numel() == 0:
        rgb = white.expand(n_px, 3).clone()
        alpha = torch.zeros(n_px, dtype=torch.float64)
        return rgb.reshape(height, width, 3), alpha.reshape(height, width)

    pair_tri = vis_idx[pair_tri_rows]
    px_centers = torch.stack(
        [
            (pair_pix % width).to(torch.float64) + 0.5,
            torch.div(pair_pix, width, rounding_mode="floor").to(torch.float64) + 0.5,
        ],
        dim=1,
    )

    a = tri_xy[pair_tri, 0]
    b = tri_xy[pair_tri, 1]
    c = tri_xy[pair_tri, 2]
    d2 = torch.minimum(
        torch.minimum(
            _segment_distance_sq(px_centers, a, b), _segment_distance_sq(px_centers, b, c)
        ),
        _segment_distance_sq(px_centers, c, a),
    )
    dist = torch.sqrt(d2.clamp_min(1e-30))

    def cross2(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    c1 = cross2(b - a, px_centers - a)
    c2 = cross2(c - b, px_centers - b)
    c3 = cross2(a - c, px_centers - c)
    inside = ((c1 >= 0) & (c2 >= 0) & (c3 >= 0)) | ((c1 <= 0) & (c2 <= 0) & (c3 <= 0))
    signed = torch.where(inside, dist, -dist)
    logit = signed / softness_temp

    # stable log(1 - sigmoid(x)) = -softplus(x)
    log_one_minus = -torch.nn.functional.softplus(logit)
    neg_log_transparency = torch.zeros(n_px, dtype=torch.float64)
    neg_log_transparency.index_add_(0, pair_pix, -log_one_minus)
    alpha = 1.0 - torch.exp(-neg_log_transparency)

    # flat Lambertian headlight shading per triangle (world space)
    v0 = verts[faces[:, 0]]
    v1 = verts[faces[:, 1]]
    v2 = verts[faces[:, 2]]
    fn = torch.linalg.cross(v1 - v0, v2 - v0)
    fn = fn / torch.linalg.norm(fn, dim=1, keepdim=True).clamp_min(1e-30)
    centroid = (v0 + v1 + v2) / 3.0
    to_eye = torch.from_numpy(camera.eye) - centroid
    to_eye = to_eye / torch.linalg.norm(to_eye, dim=1, keepdim=True).clamp_min(1e-30)
    lambert = AMBIENT + (1.0 - AMBIENT) * (fn * to_eye).sum(dim=1).abs()
    base = torch.from_numpy(_face_colors(scene))
    tri_rgb = base * lambert.unsqueeze(1)  # (F, 3)

    # depth-softmax aggregation: weight = coverage * exp(-z_norm / gamma)
    z_tri = tri_z.mean(dim=1)
    with torch.no_grad():
        z_vis = z_tri[vis_idx]
        z_lo = float(z_vis.min())
        z_span = max(float(z_vis.max()) - z_lo, 1e-12)
    z_norm = (z_tri[pair_tri] - z_lo) / z_span
    # coverage in log space stays overflow-free: sigmoid(x) = exp(-softplus(-x))
    log_s = -torch.nn.functional.softplus(-logit) - z_norm / DEPTH_GAMMA
    s = torch.exp(log_s)
    den = torch.zeros(n_px, dtype=torch.float64)
    den.index_add_(0, pair_pix, s)
    num = torch.zeros(n_px, 3, dtype=torch.float64)
    num.index_add_(0, pair_pix, s.unsqueeze(1) * tri_rgb[pair_tri])

    eps = 1e-12
    rgb = (num + eps * white) / (den + eps).unsqueeze(1)
    return rgb.reshape(height, width, 3), alpha.reshape(height, width)


def render_soft(scene: TriMesh, camera: Camera, softness_temp: float = DEFAULT_SOFTNESS_PX) -> RenderedView:
    """Render one view. Output RGBA is straight-alpha: RGB is the aggregated
    foreground color (white where uncovered), alpha the soft silhouette."""
    if softness_temp <= 0:
        raise RenderError("softness_temp must be positive")
    verts = torch.from_numpy(np.array(scene.vertices))
    with torch.no_grad():
        rgb, alpha = _render_torch(scene, camera, float(softness_temp), verts)
    rgba = np.concatenate([rgb.numpy(), alpha.numpy()[..., None]], axis=2)
    return RenderedView(rgba=np.clip(rgba, 0.0, 1.0), camera=camera)


def backprop_render(
    view: RenderedView,
    d_pixels: np.ndarray,
    scene: TriMesh,
    softness_temp: float = DEFAULT_SOFTNESS_PX,
) -> np.ndarray:
    """Gradient of sum(d_pixels * rgba) w.r.t. source-labeled vertex positions.

    Re-runs the forward pass under autograd; gradients for target-labeled
    vertices are discarded. Returns an (N_source, 3) array ordered like the
    source block of the composed scene.
    """
    camera = view.camera
    height, width = camera.resolution[1], camera.resolution[0]
    d_pixels = np.asarray(d_pixels, dtype=np.float64)
    if d_pixels.shape != (height, width, 4):
        raise RenderError(f"d_pixels shape {d_pixels.shape} != {(height, width, 4)}")

    verts = torch.from_numpy(np.array(scene.vertices)).requires_grad_(True)
    rgb, alpha = _render_torch(scene, camera, float(softness_temp), verts)
    d = torch.from_numpy(d_pixels)
    scalar = (rgb * d[..., :3]).sum() + (alpha * d[..., 3]).sum()
    scalar.backward()
    grads = verts.grad.numpy()

    if scene.vertex_labels is None:
        return grads
    source_label = scene.meta.get("source_label")
    if source_label is None:
        source_label = int(scene.vertex_labels.max())
    return grads[scene.vertex_labels == source_label]


def render_views(scene: TriMesh, cameras: Sequence[Camera], softness_temp: float = DEFAULT_SOFTNESS_PX):
    return [render_soft(scene, cam, softness_temp) for cam in cameras]


class RenderGraph:
    """One differentiable forward pass kept alive for a later backward.

    Saves re-running the forward when pixel gradients arrive after scoring
    (the optimizer's hot path). Equivalent to render_soft + backprop_render.
    """

    def __init__(self, scene: TriMesh, camera: Camera, softness_temp: float = DEFAULT_SOFTNESS_PX):
        if softness_temp <= 0:
            raise RenderError("softness_temp must be positive")
        self.scene = scene
        self.camera = camera
        self._verts = torch.from_numpy(np.array(scene.vertices)).requires_grad_(True)
        self._rgb, self._alpha = _render_torch(scene, camera, float(softness_temp), self._verts)
        rgba = np.concatenate(
            [self._rgb.detach().numpy(), self._alpha.detach().numpy()[..., None]], axis=2
        )
        self.view = RenderedView(rgba=np.clip(rgba, 0.0, 1.0), camera=camera)

    def backward(self, d_pixels: np.ndarray) -> np.ndarray:
        height, width = self.camera.resolution[1], self.camera.resolution[0]
        d_pixels = np.asarray(d_pixels, dtype=np.float64)
        if d_pixels.shape != (height, width, 4):
            raise RenderError(f"d_pixels shape {d_pixels.shape} != {(height, width, 4)}")
        d = torch.from_numpy(d_pixels)
        scalar = (self._rgb * d[..., :3]).sum() + (self._alpha * d[..., 3]).sum()
        if self._verts.grad is not None:
            self._verts.grad.zero_()
        scalar.backward()
        grads = self._verts.grad.numpy().copy()
        labels = self.scene.vertex_labels
        if labels is None:
            return grads
        source_label = self.scene.meta.get("source_label")
        if source_label is None:
            source_label = int(labels.max())
        return grads[labels == source_label]


def save_view_png(view: RenderedView, path) -> None:
    """8-bit straight-alpha RGBA dump for debugging and reports."""
    from PIL import Image

    img = (np.clip(view.rgba, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img, mode="RGBA").save(path)
