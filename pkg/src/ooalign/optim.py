"""Phased test-time optimization of the source pose.

Each restart runs P phases of Adam over theta = (tau, q, log s) with per-step
Gaussian jitter; lambda_icp / lambda_pen ramp geometrically (x10 by default)
across phases while cameras re-target and zoom per the rig schedule. The best
pose of phase p (by the selection metric) initializes phase p+1; the best
restart wins. Everything is deterministic given the master seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, GuidanceError, OptimizationError
from .guidance import GuidanceTarget, NullProvider, clip_loss_from_scores, evaluate, make_provider
from .losses import (
    IcpConfig,
    LossWeights,
    PenetrationConfig,
    default_icp_sigma,
    fractional_soft_icp,
    penetration_loss,
    total_objective,
)
from .mesh import MeshStats, TriMesh, compute_stats, ensure_vertex_normals
from .pose import NUM_POSE_PARAMS, PoseParams, apply_pose, backprop_pose, compose_scene
from .render import Camera, DEFAULT_SOFTNESS_PX, RenderGraph, RigSchedule, build_rig

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1

# Benchmark perturbation protocol ranges.
PERTURB_TRANSLATION_SCALE = 10.0  # x bbox side lengths, uniform
PERTURB_ROTATION_MAX_DEG = 180.0  # independent Euler angles, uniform
PERTURB_SCALE_RANGE = (0.01, 100.0)  # uniform, scale-enabled benchmark only


class Adam:
    """Standard Adam with bias correction; operates on flat parameter vectors."""

    def __init__(self, n_params: int, lr: float = 5e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class JitterConfig:
    tau: float = 0.002  # fraction of target bbox diagonal
    quat: float = 0.002
    log_scale: float = 0.002
    phase_decay: float = 0.5

    def stds_for_phase(self, phase: int) -> np.ndarray:
        decay = self.phase_decay ** (phase - 1)
        return np.array([self.tau] * 3 + [self.quat] * 4 + [self.log_scale]) * decay


@dataclass(frozen=True)
class InitConfig:
    """Randomized initial pose ranges (defaults match the benchmark protocol).

    ``fixed_scale`` overrides the uniform scale draw in scaled mode (used by
    the LLM size-ratio policy)."""

    translation_scale: float = PERTURB_TRANSLATION_SCALE  # x bbox side lengths
    rotation_max_deg: float = PERTURB_ROTATION_MAX_DEG
    scale_range: tuple[float, float] = PERTURB_SCALE_RANGE
    rotate: bool = True
    fixed_scale: Optional[float] = None


@dataclass
class AlignConfig:
    total_steps: int = 2000
    num_phases: int = 3
    num_views: int = 8
    num_restarts: int = 5
    mode: str = "rigid"  # rigid | scaled
    guidance: str = "null"  # null | silhouette | external
    selection: str = "objective"  # objective | clip
    seed: int = 0

    lambda_clip: float = 1.0  # constant across phases
    lambda_icp_per_phase: tuple[float, ...] = (0.1, 1.0, 10.0)
    lambda_pen_per_phase: tuple[float, ...] = (0.01, 0.1, 1.0)

    icp_ratio_r: float = 1.0
    icp_sigma: Optional[float] = None  # None -> 0.05 x target bbox diagonal
    pen_margin: float = 0.0

    lr: float = 5e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    jitter: JitterConfig = field(default_factory=JitterConfig)
    init: InitConfig = field(default_factory=InitConfig)

    rig: RigSchedule = field(default_factory=RigSchedule)
    resolution: tuple[int, int] = (224, 224)
    softness_temp: float = DEFAULT_SOFTNESS_PX
    softness_decay: float = 0.5
    remesh_target: int = 5000
    restart_workers: int = 1

    # Testing/advanced hooks (not part of the JSON schema)
    fixed_cameras: Optional[list[Camera]] = None
    init_poses: Optional[list[PoseParams]] = None

    def __post_init__(self):
        if self.num_phases < 1:
            raise ConfigError("num_phases must be >= 1")
        if self.mode not in ("rigid", "scaled"):
            raise ConfigError(f"mode must be rigid|scaled, got {self.mode}")
        if self.selection not in ("objective", "clip"):
            raise ConfigError(f"selection must be objective|clip, got {self.selection}")
        for name in ("lambda_icp_per_phase", "lambda_pen_per_phase"):
            ramp = tuple(float(x) for x in getattr(self, name))
            setattr(self, name, ramp)
            if len(ramp) != self.num_phases:
                raise ConfigError(f"{name} must have one value per phase ({self.num_phases})")
            if any(b < a for a, b in zip(ramp, ramp[1:])):
                raise ConfigError(f"{name} must be non-decreasing")
        if self.rig.num_phases != self.num_phases:
            raise ConfigError(
                f"rig schedule has {self.rig.num_phases} phases, config has {self.num_phases}"
            )
        if self.rig.num_views != self.num_views:
            self.rig = replace(self.rig, num_views=self.num_views)

    def steps_for_phase(self, phase: int) -> int:
        base, extra = divmod(self.total_steps, self.num_phases)
        return base + (1 if phase <= extra else 0)

    def weights_for_phase(self, phase: int) -> LossWeights:
        return LossWeights(
            lambda_clip=self.lambda_clip,
            lambda_icp=self.lambda_icp_per_phase[phase - 1],
            lambda_pen=self.lambda_pen_per_phase[phase - 1],
        )

    def selection_weights(self) -> LossWeights:
        return self.weights_for_phase(self.num_phases)

    def softness_for_phase(self, phase: int) -> float:
        return self.softness_temp * self.softness_decay ** (phase - 1)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "total_steps": self.total_steps,
            "num_phases": self.num_phases,
            "num_views": self.num_views,
            "num_restarts": self.num_restarts,
            "mode": self.mode,
            "guidance": self.guidance,
            "selection": self.selection,
            "seed": self.seed,
            "lambda_clip": self.lambda_clip,
            "lambda_icp_per_phase": list(self.lambda_icp_per_phase),
            "lambda_pen_per_phase": list(self.lambda_pen_per_phase),
            "icp_ratio_r": self.icp_ratio_r,
            "icp_sigma": self.icp_sigma,
            "pen_margin": self.pen_margin,
            "lr": self.lr,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "jitter": {
                "tau": self.jitter.tau,
                "quat": self.jitter.quat,
                "log_scale": self.jitter.log_scale,
                "phase_decay": self.jitter.phase_decay,
            },
            "init": {
                "translation_scale": self.init.translation_scale,
                "rotation_max_deg": self.init.rotation_max_deg,
                "scale_range": list(self.init.scale_range),
                "rotate": self.init.rotate,
                "fixed_scale": self.init.fixed_scale,
            },
            "rig": {
                "num_views": self.rig.num_views,
                "betas": list(self.rig.betas),
                "distance_factors": list(self.rig.distance_factors),
            },
            "resolution": list(self.resolution),
            "softness_temp": self.softness_temp,
            "softness_decay": self.softness_decay,
            "remesh_target": self.remesh_target,
            "restart_workers": self.restart_workers,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AlignConfig":
        data = dict(data)
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {
            "total_steps", "num_phases", "num_views", "num_restarts", "mode",
            "guidance", "selection", "seed", "lambda_clip", "lambda_icp_per_phase",
            "lambda_pen_per_phase", "icp_ratio_r", "icp_sigma", "pen_margin", "lr",
            "adam_betas", "adam_eps", "jitter", "init", "rig", "resolution",
            "softness_temp", "softness_decay", "remesh_target", "restart_workers",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "jitter" in kwargs:
            kwargs["jitter"] = JitterConfig(**kwargs["jitter"])
        if "init" in kwargs:
            init = dict(kwargs["init"])
            if "scale_range" in init:
                init["scale_range"] = tuple(init["scale_range"])
            kwargs["init"] = InitConfig(**init)
        if "rig" in kwargs:
            rig = kwargs["rig"]
            kwargs["rig"] = RigSchedule(
                num_views=rig["num_views"],
                betas=tuple(rig["betas"]),
                distance_factors=tuple(rig["distance_factors"]),
            )
        for key in ("lambda_icp_per_phase", "lambda_pen_per_phase", "adam_betas"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "resolution" in kwargs:
            kwargs["resolution"] = tuple(kwargs["resolution"])
        return cls(**kwargs)


@dataclass
class OptimState:
    pose: PoseParams
    adam: Adam
    step_count: int = 0
    phase_best_pose: Optional[PoseParams] = None
    phase_best_metric: float = np.inf


@dataclass
class RestartRecord:
    restart_index: int
    init_pose: PoseParams
    status: str = "ok"  # ok | failed
    error: Optional[str] = None
    best_pose: Optional[PoseParams] = None
    best_metric: float = np.inf
    phase_trajectory: list[PoseParams] = field(default_factory=list)
    phase_best_metrics: list[float] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)


@dataclass
class RunResult:
    best_pose: PoseParams
    best_objective: float
    restart_index: int
    restarts: list[RestartRecord]

    @property
    def per_step_log(self) -> list[dict]:
        return self.restarts[self.restart_index].steps

    @property
    def phase_trajectory(self) -> list[PoseParams]:
        return self.restarts[self.restart_index].phase_trajectory

    def all_step_records(self) -> list[dict]:
        out = []
        for rec in self.restarts:
            out.extend(rec.steps)
        return out


@dataclass(frozen=True)
class AlignmentInputs:
    """Read-only bundle shared by every restart of one alignment run."""

    source: TriMesh
    target: TriMesh
    target_stats: MeshStats
    target_spec: GuidanceTarget
    config: AlignConfig
    icp_cfg: IcpConfig
    pen_cfg: PenetrationConfig


def random_initial_pose(
    rng: np.random.Generator,
    stats: MeshStats,
    mode: str = "rigid",
    init: InitConfig | None = None,
) -> PoseParams:
    """Uniform draws per the benchmark perturbation protocol: translation in
    +-(scale x bbox sides) per component, independent Euler angles, uniform
    isotropic scale (pinned to 1 in rigid mode)."""
    from .pose import quat_from_euler

    init = init or InitConfig()
    sides = stats.bbox_sides
    tau = rng.uniform(-init.translation_scale * sides, init.translation_scale * sides)
    if init.rotate and init.rotation_max_deg > 0:
        limit = np.radians(init.rotation_max_deg)
        rx, ry, rz = rng.uniform(-limit, limit, 3)
        quat = quat_from_euler(rx, ry, rz)
    else:
        quat = np.array([1.0, 0.0, 0.0, 0.0])
    if mode == "scaled":
        if init.fixed_scale is not None:
            log_scale = float(np.log(init.fixed_scale))
        else:
            log_scale = float(np.log(rng.uniform(*init.scale_range)))
    else:
        log_scale = 0.0
    return PoseParams(tau=tau, quat=quat, log_scale=log_scale)


def _theta_scale_vector(bbox_diag: float) -> np.ndarray:
    """Parameter-group normalization: tau measured in bbox diagonals."""
    return np.array([bbox_diag] * 3 + [1.0] * 4 + [1.0])


def _selection_metric(breakdown_terms, selection_weights: LossWeights, mode: str) -> float:
    clip_term, icp_term, pen_term = breakdown_terms
    if mode == "clip":
        return clip_term
    return (
        selection_weights.lambda_clip * clip_term
        + selection_weights.lambda_icp * icp_term
        + selection_weights.lambda_pen * pen_term
    )


def _evaluate_step(
    pose: PoseParams,
    phase: int,
    inputs: AlignmentInputs,
    provider,
) -> tuple[dict, np.ndarray]:
    """One objective + gradient evaluation at ``pose``. Returns (record, d_theta)."""
    cfg = inputs.config
    weights = cfg.weights_for_phase(phase)
    posed = apply_pose(inputs.source, pose)

    use_guidance = weights.lambda_clip > 0 and not isinstance(provider, NullProvider)
    clip_term = 0.0
    d_clip = None
    if use_guidance:
        scene = compose_scene(inputs.target, posed)
        if cfg.fixed_cameras is not None:
            cameras = cfg.fixed_cameras
        else:
            posed_stats = compute_stats(posed)
            cameras = build_rig(
                inputs.target_stats,
                posed_stats,
                phase,
                cfg.rig,
                source_centroid=posed_stats.centroid,
                resolution=cfg.resolution,
            )
        temp = cfg.softness_for_phase(phase)
        graphs = [RenderGraph(scene, cam, temp) for cam in cameras]
        views = [g.view for g in graphs]
        result = evaluate(provider, inputs.target_spec, views, want_grads=True)
        clip_term = clip_loss_from_scores(result)
        n_views = len(views)
        d_clip = np.zeros_like(posed.vertices)
        for graph, grad in zip(graphs, result.per_view_pixel_grads):
            d_clip += graph.backward(-grad / n_views)

    icp_term, d_icp = 0.0, None
    if weights.lambda_icp > 0:
        icp_term, d_icp = fractional_soft_icp(
            posed.vertices, inputs.target.vertices, inputs.icp_cfg
        )
    pen_term, d_pen = 0.0, None
    if weights.lambda_pen > 0:
        pen_term, d_pen = penetration_loss(
            posed.vertices, inputs.target.vertices, inputs.target.vertex_normals, inputs.pen_cfg
        )

    breakdown = total_objective(clip_term, icp_term, pen_term, weights, d_clip, d_icp, d_pen)
    if breakdown.d_source_vertices is not None:
        pose_grad = backprop_pose(inputs.source, pose, breakdown.d_source_vertices)
        d_theta = pose_grad.to_vector()
    else:
        d_theta = np.zeros(NUM_POSE_PARAMS)

    metric = _selection_metric(
        (clip_term, icp_term, pen_term), cfg.selection_weights(), cfg.selection
    )
    record = {
        "phase": phase,
        "clip": clip_term,
        "icp": icp_term,
        "pen": pen_term,
        "total": breakdown.total,
        "selection": metric,
    }
    return record, d_theta


def run_phase(
    state: OptimState,
    phase: int,
    inputs: AlignmentInputs,
    provider,
    rng: np.random.Generator,
    log: list[dict],
    restart_index: int = 0,
) -> OptimState:
    """Optimize for one phase; returns state holding the phase-best pose."""
    cfg = inputs.config
    if not (1 <= phase <= cfg.num_phases):
        raise ConfigError(f"phase {phase} outside [1, {cfg.num_phases}]")
    scale_vec = _theta_scale_vector(inputs.target_stats.bbox_diagonal)
    theta_opt = state.pose.to_vector() / scale_vec
    jitter_stds = cfg.jitter.stds_for_phase(phase)
    rigid = cfg.mode == "rigid"

    best_pose = state.phase_best_pose
    best_metric = state.phase_best_metric

    for _ in range(cfg.steps_for_phase(phase)):
        pose = PoseParams.from_vector(theta_opt * scale_vec)
        record, d_theta = _evaluate_step(pose, phase, inputs, provider)
        record["restart"] = restart_index
        record["step"] = state.step_count
        log.append(record)
        if record["selection"] < best_metric:
            best_metric = record["selection"]
            best_pose = pose

        grad_opt = d_theta * scale_vec  # chain rule for theta = theta_opt * scale
        if rigid:
            grad_opt[7] = 0.0
        theta_opt = state.adam.step(theta_opt, grad_opt)
        jitter = rng.normal(0.0, 1.0, NUM_POSE_PARAMS) * jitter_stds
        if rigid:
            jitter[7] = 0.0
            theta_opt[7] = 0.0
        theta_opt = theta_opt + jitter
        state.step_count += 1

    state.pose = best_pose if best_pose is not None else PoseParams.from_vector(theta_opt * scale_vec)
    state.phase_best_pose = best_pose
    state.phase_best_metric = best_metric
    return state


def _run_restart(
    restart_index: int,
    seed_seq: np.random.SeedSequence,
    inputs: AlignmentInputs,
    provider_factory: Callable[[], object],
) -> RestartRecord:
    cfg = inputs.config
    rng = np.random.default_rng(seed_seq)
    if cfg.init_poses is not None:
        init_pose = cfg.init_poses[restart_index % len(cfg.init_poses)]
    else:
        init_pose = random_initial_pose(rng, inputs.target_stats, cfg.mode, cfg.init)
    record = RestartRecord(restart_index=restart_index, init_pose=init_pose)

    provider = provider_factory()
    try:
        state = OptimState(pose=init_pose, adam=_make_adam(cfg))
        for phase in range(1, cfg.num_phases + 1):
            state.adam = _make_adam(cfg)  # moments reset per phase (weights jump)
            state.phase_best_pose = None
            state.phase_best_metric = np.inf
            state = run_phase(state, phase, inputs, provider, rng, record.steps, restart_index)
            record.phase_trajectory.append(state.pose)
            record.phase_best_metrics.append(state.phase_best_metric)
        record.best_metric = min(record.phase_best_metrics)
        best_phase = int(np.argmin(record.phase_best_metrics))
        record.best_pose = record.phase_trajectory[best_phase]
    except GuidanceError as exc:
        record.status = "failed"
        record.error = str(exc)
        logger.warning("restart %d aborted: %s", restart_index, exc)
    finally:
        if hasattr(provider, "close"):
            provider.close()
    return record


def _make_adam(cfg: AlignConfig) -> Adam:
    return Adam(NUM_POSE_PARAMS, lr=cfg.lr, beta1=cfg.adam_betas[0],
                beta2=cfg.adam_betas[1], eps=cfg.adam_eps)


def run_alignment(
    source: TriMesh,
    target: TriMesh,
    target_spec: GuidanceTarget,
    config: AlignConfig,
    provider_factory: Optional[Callable[[], object]] = None,
) -> RunResult:
    """Best-of-N restarts of the phased optimization.

    Meshes must be preprocessed (remeshed to taste, normals present; normals
    are derived here if missing). Restart RNG streams are spawned from the
    master seed, so results are reproducible bit-for-bit.
    """
    source = ensure_vertex_normals(source)
    target = ensure_vertex_normals(target)
    target_stats = compute_stats(target)

    sigma = config.icp_sigma if config.icp_sigma is not None else default_icp_sigma(
        target_stats.bbox_diagonal
    )
    inputs = AlignmentInputs(
        source=source,
        target=target,
        target_stats=target_stats,
        target_spec=target_spec,
        config=config,
        icp_cfg=IcpConfig(ratio_r=config.icp_ratio_r, sigma=sigma),
        pen_cfg=PenetrationConfig(margin=config.pen_margin),
    )
    if provider_factory is None:
        provider_factory = lambda: make_provider(config.guidance)  # noqa: E731

    seeds = np.random.SeedSequence(config.seed).spawn(config.num_restarts)
    if config.restart_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.restart_workers) as pool:
            records = list(
                pool.map(
                    lambda args: _run_restart(*args, inputs, provider_factory),
                    list(enumerate(seeds)),
                )
            )
    else:
        records = [_run_restart(i, s, inputs, provider_factory) for i, s in enumerate(seeds)]

    ok = [r for r in records if r.status == "ok"]
    if not ok:
        causes = "; ".join(f"restart {r.restart_index}: {r.error}" for r in records)
        raise OptimizationError(f"all restarts failed: {causes}")
    winner = min(ok, key=lambda r: (r.best_metric, r.restart_index))
    return RunResult(
        best_pose=winner.best_pose,
        best_objective=winner.best_metric,
        restart_index=winner.restart_index,
        restarts=records,
    )
