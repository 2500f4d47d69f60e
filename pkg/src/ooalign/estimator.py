"""Scikit-learn style facade over the alignment pipeline.

``MeshAligner.fit(source, target, prompt=...)`` runs the phased best-of-N
optimization and stores the winning pose; ``transform`` applies it. Parameters
follow sklearn conventions (constructor args mirrored as attributes,
``get_params`` / ``set_params`` inherited), so the aligner clones and composes
with the wider ecosystem.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .guidance import GuidanceTarget, SilhouetteProvider
from .mesh import TriMesh, compute_stats, compute_vertex_normals, remesh_subdivide
from .optim import AlignConfig, run_alignment
from .pose import apply_pose, compose_scene
from .render import RigSchedule, build_rig, render_soft
from .validation import check_mesh


class MeshAligner(BaseEstimator):
    """Aligns a source mesh onto a target mesh by test-time optimization.

    Parameters mirror the run configuration; see AlignConfig for semantics.
    Fitted attributes: ``best_pose_``, ``result_``, ``source_``, ``target_``.
    """

    def __init__(
        self,
        guidance: str = "null",
        mode: str = "rigid",
        total_steps: int = 2000,
        num_phases: int = 3,
        num_views: int = 8,
        num_restarts: int = 5,
        lambda_clip: float = 1.0,
        icp_ratio: float = 1.0,
        selection: str = "objective",
        remesh_target: int = 5000,
        resolution: tuple[int, int] = (224, 224),
        seed: int = 0,
    ):
        self.guidance = guidance
        self.mode = mode
        self.total_steps = total_steps
        self.num_phases = num_phases
        self.num_views = num_views
        self.num_restarts = num_restarts
        self.lambda_clip = lambda_clip
        self.icp_ratio = icp_ratio
        self.selection = selection
        self.remesh_target = remesh_target
        self.resolution = resolution
        self.seed = seed

    def _build_config(self) -> AlignConfig:
        base = AlignConfig()
        ramp_icp = tuple(base.lambda_icp_per_phase[0] * 10**p for p in range(self.num_phases))
        ramp_pen = tuple(base.lambda_pen_per_phase[0] * 10**p for p in range(self.num_phases))
        betas = tuple(p / max(self.num_phases - 1, 1) for p in range(self.num_phases))
        factors = tuple(
            2.0 - p * (1.0 / max(self.num_phases - 1, 1)) for p in range(self.num_phases)
        )
        return AlignConfig(
            total_steps=self.total_steps,
            num_phases=self.num_phases,
            num_views=self.num_views,
            num_restarts=self.num_restarts,
            mode=self.mode,
            guidance=self.guidance,
            selection=self.selection,
            seed=self.seed,
            lambda_clip=self.lambda_clip,
            lambda_icp_per_phase=ramp_icp,
            lambda_pen_per_phase=ramp_pen,
            icp_ratio_r=self.icp_ratio,
            rig=RigSchedule(num_views=self.num_views, betas=betas, distance_factors=factors),
            resolution=tuple(self.resolution),
            remesh_target=self.remesh_target,
        )

    def _preprocess(self, mesh: TriMesh) -> TriMesh:
        check_mesh(mesh)
        if self.remesh_target:
            mesh = remesh_subdivide(mesh, self.remesh_target)
        return compute_vertex_normals(mesh)

    def fit(
        self,
        source: TriMesh,
        target: TriMesh,
        prompt: Optional[str] = None,
        reference_image: Optional[np.ndarray] = None,
        provider_factory=None,
        config: Optional[AlignConfig] = None,
    ) -> "MeshAligner":
        """Optimize the source pose; returns self with fitted attributes set."""
        if prompt is not None and reference_image is not None:
            raise ValueError("pass either prompt or reference_image, not both")
        if reference_image is not None:
            target_spec = GuidanceTarget.image(reference_image)
        else:
            target_spec = GuidanceTarget.text(prompt if prompt is not None else "")

        cfg = config if config is not None else self._build_config()
        src = self._preprocess(source)
        tgt = self._preprocess(target)

        if cfg.guidance == "silhouette" and provider_factory is None:
            # offline synthetic objective: match the target's own image footprint
            t_stats = compute_stats(tgt)
            rig1 = RigSchedule(
                num_views=cfg.num_views, betas=(0.0,),
                distance_factors=(cfg.rig.distance_factors[0],),
            )
            cams = build_rig(t_stats, t_stats, 1, rig1, resolution=cfg.resolution)
            silhouettes = [render_soft(tgt, c, cfg.softness_temp).rgba[..., 3] for c in cams]
            cfg.fixed_cameras = cams
            provider_factory = lambda: SilhouetteProvider(silhouettes)  # noqa: E731

        self.result_ = run_alignment(src, tgt, target_spec, cfg, provider_factory)
        self.best_pose_ = self.result_.best_pose
        self.source_ = src
        self.target_ = tgt
        self.config_ = cfg
        return self

    def transform(self, mesh: Optional[TriMesh] = None) -> TriMesh:
        """Apply the fitted pose (to the stored source by default)."""
        self._check_fitted()
        return apply_pose(mesh if mesh is not None else self.source_, self.best_pose_)

    def fit_transform(self, source: TriMesh, target: TriMesh, **fit_kwargs) -> TriMesh:
        return self.fit(source, target, **fit_kwargs).transform()

    def compose(self) -> TriMesh:
        """Composed scene: target plus the posed source, with labels."""
        self._check_fitted()
        return compose_scene(self.target_, self.transform())

    def score(self, *args, **kwargs) -> float:
        """Negative best objective (higher is better, sklearn convention)."""
        self._check_fitted()
        return -float(self.result_.best_objective)

    def _check_fitted(self):
        if not hasattr(self, "best_pose_"):
            raise RuntimeError("MeshAligner is not fitted; call fit() first")
