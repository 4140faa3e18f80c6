"""Synthetic two-agent street scenes with ground-truth correspondences.

Generates desk-scale paired observations that reproduce the challenge
structure of intersection perception: perceptual aliasing (objects that
share an appearance class get identical feature prototypes), objects
visible to only one agent (field-of-view limits, independent occlusion
drops, optional ray blocking), noisy depth along the viewing ray, and
noisy GPS poses.

Everything is a pure function of (config, seed): object placement,
agent poses, visibility, and every noise draw come from named RNG
streams, so scenes are bit-reproducible and safe to generate in
parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .graph_build import Pose, SceneGraph, build_graph
from .numerics import stream


@dataclass(frozen=True)
class SimConfig:
    """Scene generator settings.

    Angles are radians unless the field name says degrees.  GPS noise
    defaults model a real GNSS unit: sigma 1.2 m per horizontal axis and
    0.2 degrees in yaw.
    """

    n_objects: tuple[int, int] = (5, 15)
    field_extent: float = 24.0
    fov_half_angle: float = math.radians(75.0)
    occlusion_prob: float = 0.3
    occlusion_block_deg: float = 0.0
    appearance_classes: int = 4
    feature_dim: int = 64
    sigma_feat: float = 0.3
    sigma_depth: float = 0.1
    sigma_gps: float = 1.2
    sigma_yaw_deg: float = 0.2
    agent_distance: float = 26.0
    agent_angles_deg: tuple[float, float] | None = None

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 1 or hi < lo:
            raise ValueError("degenerate config")
        if self.field_extent <= 0 or self.agent_distance <= 0:
            raise ValueError("degenerate config")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        for name in ("sigma_feat", "sigma_depth", "sigma_gps", "sigma_yaw_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.appearance_classes < 1:
            raise ValueError("appearance_classes must be >= 1")
        if self.feature_dim < self.appearance_classes:
            raise ValueError("feature_dim must be >= appearance_classes "
                             "(class prototypes are one-hot)")


@dataclass
class WorldScene:
    """Simulator ground truth for one paired observation.

    ``visible`` holds, per agent, the world-object indices that survive
    the agent's visibility filtering, in ascending index order; that
    order defines the node order of the rendered view.
    ``gt_correspondence`` pairs view-local node indices (a, b).
    """

    ids: np.ndarray
    positions: np.ndarray
    classes: np.ndarray
    agent_poses: tuple[Pose, Pose]
    visible: tuple[list[int], list[int]]
    gt_correspondence: set[tuple[int, int]]
    seed: int

    @property
    def n_objects(self) -> int:
        return len(self.ids)

    def covisible_fraction(self) -> float:
        return len(self.gt_correspondence) / max(1, self.n_objects)


def _agent_pose(angle: float, distance: float) -> Pose:
    t = np.array([distance * math.cos(angle), distance * math.sin(angle), 0.0])
    return Pose(t, angle + math.pi)  # forward (+x in agent frame) points at the center


def _local_frame(positions: np.ndarray, pose: Pose) -> np.ndarray:
    return (positions - pose.t) @ pose.rotation()


def _fov_ok(local: np.ndarray, half_angle: float) -> np.ndarray:
    bearing = np.arctan2(local[:, 1], local[:, 0])
    return np.abs(bearing) <= half_angle + 1e-12


def _blocked(positions: np.ndarray, pose: Pose, window_rad: float) -> np.ndarray:
    """Objects hidden behind a nearer object within a bearing window.

    Purely geometric over all scene objects, independent of FOV and of
    the random occlusion draws, so visibility stays monotone in FOV.
    """
    n = positions.shape[0]
    out = np.zeros(n, dtype=bool)
    if window_rad <= 0 or n < 2:
        return out
    local = _local_frame(positions, pose)
    rng_dist = np.hypot(local[:, 0], local[:, 1])
    bearing = np.arctan2(local[:, 1], local[:, 0])
    for i in range(n):
        diff = np.abs(bearing - bearing[i])
        diff = np.minimum(diff, 2.0 * math.pi - diff)
        nearer = (rng_dist < rng_dist[i]) & (diff <= window_rad)
        nearer[i] = False
        out[i] = bool(nearer.any())
    return out


def generate_scene(cfg: SimConfig, seed: int) -> WorldScene:
    """Place objects and agents, resolve per-view visibility, compute gt pairs."""
    n = int(stream(seed, "scene", "count").integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    half = cfg.field_extent / 2.0
    pos_xy = stream(seed, "scene", "pos").uniform(-half, half, size=(n, 2))
    positions = np.column_stack([pos_xy, np.zeros(n)])
    classes = stream(seed, "scene", "class").integers(0, cfg.appearance_classes, size=n)

    if cfg.agent_angles_deg is not None:
        angles = [math.radians(a) for a in cfg.agent_angles_deg]
    else:
        rng = stream(seed, "scene", "agents")
        a0 = rng.uniform(0.0, 2.0 * math.pi)
        a1 = a0 + rng.uniform(math.pi / 4.0, 2.0 * math.pi - math.pi / 4.0)
        angles = [a0, a1 % (2.0 * math.pi)]
    poses = (_agent_pose(angles[0], cfg.agent_distance),
             _agent_pose(angles[1], cfg.agent_distance))

    window = math.radians(cfg.occlusion_block_deg)
    visible = []
    for agent in (0, 1):
        local = _local_frame(positions, poses[agent])
        ok = _fov_ok(local, cfg.fov_half_angle)
        ok &= ~_blocked(positions, poses[agent], window)
        # one occlusion draw per (view, object id): FOV changes never shift draws
        drops = stream(seed, "occl", agent).random(n) < cfg.occlusion_prob
        ok &= ~drops
        visible.append([int(i) for i in np.nonzero(ok)[0]])

    index_b = {obj: k for k, obj in enumerate(visible[1])}
    gt = {(ka, index_b[obj]) for ka, obj in enumerate(visible[0]) if obj in index_b}

    return WorldScene(ids=np.arange(n), positions=positions, classes=classes,
                      agent_poses=poses, visible=(visible[0], visible[1]),
                      gt_correspondence=gt, seed=int(seed))


def render_view(scene: WorldScene, agent: int, cfg: SimConfig) -> SceneGraph:
    """Produce one agent's SceneGraph from the world ground truth.

    Node positions are the true positions in the agent frame plus depth
    noise along the viewing ray; features are the one-hot class
    prototype plus isotropic noise; the attached pose is the true pose
    perturbed by GPS noise (horizontal translation and yaw).  All draws
    come from streams keyed by (scene seed, agent, noise kind), so a
    given noise level never shifts the draws of the other kinds.
    """
    if agent not in (0, 1):
        raise ValueError(f"agent must be 0 or 1, got {agent}")
    pose = scene.agent_poses[agent]
    vis = scene.visible[agent]
    n = len(vis)

    local = _local_frame(scene.positions[vis], pose) if n else np.zeros((0, 3))
    depth_eps = stream(scene.seed, "render", agent, "depth").normal(0.0, 1.0, size=n)
    if n:
        dist = np.linalg.norm(local, axis=1)
        safe = np.where(dist > 1e-9, dist, 1.0)
        rays = local / safe[:, None]
        local = local + (cfg.sigma_depth * depth_eps)[:, None] * rays

    protos = np.zeros((n, cfg.feature_dim))
    if n:
        protos[np.arange(n), scene.classes[vis]] = 1.0
    feat_eps = stream(scene.seed, "render", agent, "feat").normal(
        0.0, 1.0, size=(n, cfg.feature_dim))
    features = protos + cfg.sigma_feat * feat_eps

    rng_gps = stream(scene.seed, "render", agent, "gps")
    dt = rng_gps.normal(0.0, 1.0, size=2) * cfg.sigma_gps
    dyaw = math.radians(rng_gps.normal(0.0, 1.0) * cfg.sigma_yaw_deg)
    noisy_pose = Pose(pose.t + np.array([dt[0], dt[1], 0.0]), pose.yaw + dyaw)

    return build_graph(local, features, noisy_pose)


def make_instance(cfg: SimConfig, seed: int) -> tuple[WorldScene, SceneGraph, SceneGraph]:
    """Scene plus both rendered views."""
    scene = generate_scene(cfg, seed)
    return scene, render_view(scene, 0, cfg), render_view(scene, 1, cfg)


# ------------------------------------------------------------------ JSON I/O


def scene_to_json(scene: WorldScene) -> dict:
    return {
        "seed": scene.seed,
        "objects": [
            {"id": int(i), "position": p.tolist(), "appearance_class": int(c)}
            for i, p, c in zip(scene.ids, scene.positions, scene.classes)
        ],
        "agent_poses": [
            {"t": np.asarray(p.t, dtype=float).tolist(), "yaw_deg": math.degrees(p.yaw)}
            for p in scene.agent_poses
        ],
        "visible": [list(scene.visible[0]), list(scene.visible[1])],
    }


def scene_from_json(doc: dict) -> WorldScene:
    objs = doc["objects"]
    ids = np.array([o["id"] for o in objs], dtype=int)
    positions = np.array([o["position"] for o in objs], dtype=np.float64).reshape(-1, 3)
    classes = np.array([o["appearance_class"] for o in objs], dtype=int)
    poses = tuple(
        Pose(np.asarray(p["t"], dtype=np.float64), math.radians(p["yaw_deg"]))
        for p in doc["agent_poses"]
    )
    visible = (list(doc["visible"][0]), list(doc["visible"][1]))
    index_b = {obj: k for k, obj in enumerate(visible[1])}
    gt = {(ka, index_b[obj]) for ka, obj in enumerate(visible[0]) if obj in index_b}
    return WorldScene(ids=ids, positions=positions, classes=classes,
                      agent_poses=poses, visible=visible,
                      gt_correspondence=gt, seed=int(doc["seed"]))


def with_noise(cfg: SimConfig, **sigmas) -> SimConfig:
    """Copy of ``cfg`` with selected noise levels replaced (sweep helper)."""
    return replace(cfg, **sigmas)
