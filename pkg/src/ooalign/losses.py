"""Geometric objectives: fractional soft-ICP attachment, penetration penalty,
and the weighted total objective.

Both losses return (value, gradient w.r.t. source vertices). The target is
static, so no target gradients are produced. Nondifferentiable choices
(subset membership W, nearest indices i*, hinge activation) are frozen per
evaluation, giving a piecewise-smooth subgradient; the softmax correspondence
weights ARE differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .validation import as_points_array, require_finite

# Dense softmax over all targets up to this size; beyond it, per-source-vertex
# truncation to the nearest TRUNCATED_K targets with renormalization.
DENSE_MAX_TARGETS = 4096
TRUNCATED_K = 64
_ROW_BLOCK = 256  # bounds peak memory of the dense path


@dataclass(frozen=True)
class IcpConfig:
    ratio_r: float = 1.0
    sigma: float = 0.05  # softmax temperature, model units

    def __post_init__(self):
        if not (0.0 < self.ratio_r <= 1.0):
            raise ValueError(f"ratio_r must be in (0, 1], got {self.ratio_r}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class PenetrationConfig:
    margin: float = 0.0  # admissible indentation depth, model units

    def __post_init__(self):
        if self.margin < 0.0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass(frozen=True)
class LossWeights:
    lambda_clip: float = 1.0
    lambda_icp: float = 1.0
    lambda_pen: float = 1.0

    def __post_init__(self):
        for name in ("lambda_clip", "lambda_icp", "lambda_pen"):
            v = getattr(self, name)
            if v < 0 or not np.isfinite(v):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    clip_term: float
    icp_term: float
    pen_term: float
    weights: LossWeights
    d_source_vertices: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "clip": self.clip_term,
            "icp": self.icp_term,
            "pen": self.pen_term,
        }


def fractional_soft_icp(
    source_vertices, target_vertices, cfg: IcpConfig
) -> tuple[float, np.ndarray]:
    """Attachment loss over the r-fraction of source vertices nearest the target.

    With N_S source and N_T target vertices, let d_i = min_j |v_i - t_j| and
    W = the K = floor(r * N_S) source indices with smallest d_i (ties broken
    by lower index). Squared distances E_ij get soft correspondences
    alpha_ij = softmax_j(-E_ij / (2 sigma^2)); the loss is the mean over W of
    sum_j alpha_ij E_ij. The gradient combines the direct E term with the
    softmax's dependence on the source position; W is held fixed.
    """
    src = as_points_array(source_vertices, "source_vertices")
    tgt = as_points_array(target_vertices, "target_vertices")
    if src.shape[0] == 0:
        raise ValueError("source vertex set is empty")
    if tgt.shape[0] == 0:
        raise ValueError("target vertex set is empty")
    n_src = src.shape[0]
    k_sel = int(np.floor(cfg.ratio_r * n_src))
    if k_sel < 1:
        raise ValueError(
            f"ratio_r={cfg.ratio_r} selects no vertices out of {n_src} (K must be >= 1)"
        )

    tree = cKDTree(tgt)
    d_min, _ = tree.query(src, k=1)
    selected = np.argsort(d_min, kind="stable")[:k_sel]
    selected = np.sort(selected)  # ascending index order: deterministic reductions

    inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma * cfg.sigma)
    d_source = np.zeros_like(src)
    row_losses = np.empty(k_sel)

    if tgt.shape[0] <= DENSE_MAX_TARGETS:
        for start in range(0, k_sel, _ROW_BLOCK):
            rows = selected[start : start + _ROW_BLOCK]
            diff = src[rows, None, :] - tgt[None, :, :]  # (B, N_T, 3)
            energy = np.einsum("bjk,bjk->bj", diff, diff)
            loss_rows, grad_rows = _soft_rows(diff, energy, inv_two_sigma_sq, cfg.sigma)
            row_losses[start : start + len(rows)] = loss_rows
            d_source[rows] = grad_rows / k_sel
    else:
        k_nn = min(TRUNCATED_K, tgt.shape[0])
        _, nn_idx = tree.query(src[selected], k=k_nn)
        nn_idx = nn_idx.reshape(len(selected), k_nn)
        for start in range(0, k_sel, _ROW_BLOCK):
            rows = selected[start : start + _ROW_BLOCK]
            cols = nn_idx[start : start + len(rows)]
            diff = src[rows, None, :] - tgt[cols]  # (B, k_nn, 3)
            energy = np.einsum("bjk,bjk->bj", diff, diff)
            loss_rows, grad_rows = _soft_rows(diff, energy, inv_two_sigma_sq, cfg.sigma)
            row_losses[start : start + len(rows)] = loss_rows
            d_source[rows] = grad_rows / k_sel

    loss = float(np.sum(row_losses) / k_sel)
    require_finite(d_source, "soft-ICP gradient", error=ValueError)
    return loss, d_source


def _soft_rows(diff, energy, inv_two_sigma_sq, sigma):
    """Per-row softmax expectation and its source-vertex gradient.

    d/dv_i [sum_j a_ij E_ij] = sum_j a_ij * 2 diff_ij
                               - (1/sigma^2) sum_j a_ij (E_ij - L_i) diff_ij
    """
    shift = energy.min(axis=1, keepdims=True)
    weights = np.exp((shift - energy) * inv_two_sigma_sq)
    norm = weights.sum(axis=1, keepdims=True)
    alpha = weights / norm
    loss_rows = np.einsum("bj,bj->b", alpha, energy)
    term1 = 2.0 * np.einsum("bj,bjk->bk", alpha, diff)
    centered = energy - loss_rows[:, None]
    term2 = -(1.0 / (sigma * sigma)) * np.einsum("bj,bjk->bk", alpha * centered, diff)
    return loss_rows, term1 + term2


def penetration_loss(
    source_vertices, target_vertices, target_normals, cfg: PenetrationConfig
) -> tuple[float, np.ndarray]:
    """Hinge penalty on signed depth along target outward normals.

    For each target vertex t_j with unit normal n_j, the Euclidean nearest
    source vertex v_{i*(j)} defines signed depth (t_j - v_{i*})^T n_j,
    positive when the source point sits inside the target's local tangent
    half-space. Depth beyond the margin accumulates linearly; the gradient
    routes -n_j to each selected source vertex where the hinge is active.
    """
    src = as_points_array(source_vertices, "source_vertices")
    tgt = as_points_array(target_vertices, "target_vertices")
    nrm = as_points_array(target_normals, "target_normals")
    if nrm.shape[0] != tgt.shape[0]:
        raise ValueError(
            f"normal count {nrm.shape[0]} != target vertex count {tgt.shape[0]}"
        )
    if src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("empty vertex set")

    tree = cKDTree(src)
    _, nearest = tree.query(tgt, k=1)
    depth = np.einsum("jk,jk->j", tgt - src[nearest], nrm)
    excess = depth - cfg.margin
    active = excess > 0.0
    loss = float(excess[active].sum())
    d_source = np.zeros_like(src)
    np.add.at(d_source, nearest[active], -nrm[active])
    return loss, d_source


def max_signed_depth(source_vertices, target_vertices, target_normals) -> float:
    """Largest signed depth over target vertices (diagnostic, no margin)."""
    src = as_points_array(source_vertices, "source_vertices")
    tgt = as_points_array(target_vertices, "target_vertices")
    nrm = as_points_array(target_normals, "target_normals")
    tree = cKDTree(src)
    _, nearest = tree.query(tgt, k=1)
    depth = np.einsum("jk,jk->j", tgt - src[nearest], nrm)
    return float(depth.max())


def total_objective(
    clip_term: float,
    icp_term: float,
    pen_term: float,
    weights: LossWeights,
    d_clip: Optional[np.ndarray] = None,
    d_icp: Optional[np.ndarray] = None,
    d_pen: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """Weighted sum of the three objective terms and their vertex gradients."""
    for name, v in (("clip_term", clip_term), ("icp_term", icp_term), ("pen_term", pen_term)):
        if not np.isfinite(v):
            raise ValueError(f"{name} is non-finite: {v}")
    total = (
        weights.lambda_clip * clip_term
        + weights.lambda_icp * icp_term
        + weights.lambda_pen * pen_term
    )
    grads = [g for g in (d_clip, d_icp, d_pen) if g is not None]
    d_total = None
    if grads:
        d_total = np.zeros_like(grads[0])
        if d_clip is not None:
            d_total += weights.lambda_clip * d_clip
        if d_icp is not None:
            d_total += weights.lambda_icp * d_icp
        if d_pen is not None:
            d_total += weights.lambda_pen * d_pen
    return LossBreakdown(
        total=float(total),
        clip_term=float(clip_term),
        icp_term=float(icp_term),
        pen_term=float(pen_term),
        weights=weights,
        d_source_vertices=d_total,
    )


def default_icp_sigma(target_bbox_diagonal: float) -> float:
    """Scale-invariant default softmax temperature: 5% of the target bbox diagonal."""
    return 0.05 * float(target_bbox_diagonal)
