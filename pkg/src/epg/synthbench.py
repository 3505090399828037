"""Synthetic trajectories, scenes, and descriptor fields for desk-scale
verification.

Descriptors come from a smooth random sinusoidal field over position and
view direction: nearby poses get similar vectors, distant poses decorrelate.
Optional distractors plant far-away poses with near-duplicate descriptors to
simulate perceptual aliasing. Everything is deterministic for a given seed
and config.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import io as epgio
from .builder import Frame
from .evaluation import Intrinsics, visible_points
from .grid import pose_looking
from .providers import ArrayProvider

TRAJECTORY_TYPES = ("loop", "corridor", "figure-eight")


@dataclass(frozen=True)
class SynthConfig:
    trajectory: str = "loop"
    n_frames: int = 400
    scene_points: int = 4000
    noise: float = 0.0  # descriptor noise sigma on queries
    distractors: int = 0
    n_queries: int = 40
    loc_dim: int = 48
    sem_dim: int = 32
    extent: float = 6.0  # trajectory footprint radius, meters
    dt: float = 0.25  # seconds between frames
    query_jitter_pos: float = 0.05
    query_jitter_ang: float = math.radians(3.0)

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_TYPES:
            raise ValueError(f"unknown trajectory type '{self.trajectory}'")
        if min(self.n_frames, self.scene_points, self.n_queries, self.loc_dim, self.sem_dim) < 1:
            raise ValueError("all counts must be >= 1")
        if self.noise < 0 or self.distractors < 0:
            raise ValueError("noise and distractor count must be >= 0")


SYNTH_CAM = Intrinsics(fx=300.0, fy=300.0, cx=200.0, cy=150.0, width=400, height=300, max_range=10.0)


class _DescriptorField:
    """Unit-norm sinusoidal feature of (position, view direction)."""

    def __init__(self, rng, dim):
        self.w_pos = rng.normal(0.0, 0.4, size=(dim, 3))
        self.w_dir = rng.normal(0.0, 1.2, size=(dim, 3))
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=dim)

    def __call__(self, pose):
        arg = self.w_pos @ pose.translation + self.w_dir @ pose.rotation[:, 2] + self.phase
        v = np.sin(arg)
        return v / np.linalg.norm(v)


@dataclass
class SynthData:
    config: SynthConfig
    seed: int
    map_frames: list
    semantic: dict
    localization: dict
    query_frames: list
    query_semantic: dict
    query_localization: dict
    scene: np.ndarray

    def provider(self):
        return ArrayProvider(self.semantic, self.localization)

    def gt_poses(self):
        return [f.pose for f in self.query_frames]


def _trajectory_pose(kind, extent, s):
    """Pose at parameter s in [0, 1) along the named trajectory."""
    if kind == "loop":
        a = 2.0 * math.pi * s
        pos = (extent * math.cos(a), extent * math.sin(a), 1.0)
        fwd = (-math.sin(a), math.cos(a), 0.0)
    elif kind == "corridor":
        x = extent * (2.0 * s - 1.0)
        pos = (x, 0.6 * math.sin(x / max(extent, 1e-9) * math.pi), 1.0)
        fwd = (1.0, 0.6 * math.cos(x / max(extent, 1e-9) * math.pi) * math.pi / max(extent, 1e-9), 0.0)
    else:  # figure-eight (Gerono lemniscate)
        a = 2.0 * math.pi * s
        pos = (extent * math.sin(a), 0.5 * extent * math.sin(2.0 * a), 1.0)
        fwd = (math.cos(a), math.cos(2.0 * a), 0.0)
    return pose_looking(pos, fwd)


def generate(config, seed):
    """Deterministic (frames, embeddings, queries, scene) for one seed."""
    rng = np.random.default_rng(seed)
    g_loc = _DescriptorField(rng, config.loc_dim)
    g_sem = _DescriptorField(rng, config.sem_dim)

    map_frames = []
    semantic = {}
    localization = {}
    for i in range(config.n_frames):
        pose = _trajectory_pose(config.trajectory, config.extent, i / config.n_frames)
        fid = f"map{i:05d}"
        map_frames.append(Frame(i * config.dt, pose, fid))
        semantic[fid] = g_sem(pose).astype(np.float32)
        localization[fid] = g_loc(pose).astype(np.float32)

    # perceptual aliasing: far poses wearing a near-copy of a real descriptor
    t_next = config.n_frames * config.dt
    for d in range(config.distractors):
        victim = map_frames[rng.integers(config.n_frames)]
        radius = 40.0 * config.extent + rng.uniform(0.0, 10.0 * config.extent)
        a = rng.uniform(0.0, 2.0 * math.pi)
        pos = (radius * math.cos(a), radius * math.sin(a), rng.uniform(0.0, 2.0))
        yaw = rng.uniform(-math.pi, math.pi)
        pose = pose_looking(pos, (math.cos(yaw), math.sin(yaw), 0.0))
        fid = f"dis{d:05d}"
        eps = rng.uniform(0.0, 2.0 * config.noise)
        noise_dir = rng.standard_normal(config.loc_dim)
        noise_dir /= np.linalg.norm(noise_dir)
        vec = localization[victim.frame_id] + eps * noise_dir
        map_frames.append(Frame(t_next, pose, fid))
        t_next += config.dt
        semantic[fid] = g_sem(pose).astype(np.float32)
        localization[fid] = (vec / np.linalg.norm(vec)).astype(np.float32)

    # queries: a contiguous run of jittered map poses, ground truth = the
    # jittered pose itself
    n_real = config.n_frames
    count = min(config.n_queries, n_real)
    start = int(rng.integers(0, max(1, n_real - count)))
    query_frames = []
    query_semantic = {}
    query_localization = {}
    for qi in range(count):
        base = map_frames[start + qi]
        offset = rng.uniform(-config.query_jitter_pos, config.query_jitter_pos, size=3)
        dyaw = rng.uniform(-config.query_jitter_ang, config.query_jitter_ang)
        f = base.pose.rotation[:, 2]
        yaw = math.atan2(f[1], f[0]) + dyaw
        pose = pose_looking(base.pose.translation + offset, (math.cos(yaw), math.sin(yaw), f[2]))
        fid = f"q{qi:05d}"
        query_frames.append(Frame(qi * config.dt, pose, fid))
        for field, g, dim in (
            (query_semantic, g_sem, config.sem_dim),
            (query_localization, g_loc, config.loc_dim),
        ):
            vec = g(pose) + config.noise * rng.standard_normal(dim)
            n = np.linalg.norm(vec)
            field[fid] = (vec / n if n > 0 else vec).astype(np.float32)

    half = config.extent + 2.0
    scene = np.column_stack(
        [
            rng.uniform(-half, half, config.scene_points),
            rng.uniform(-half, half, config.scene_points),
            rng.uniform(-1.0, 3.0, config.scene_points),
        ]
    )
    return SynthData(
        config=config,
        seed=seed,
        map_frames=map_frames,
        semantic=semantic,
        localization=localization,
        query_frames=query_frames,
        query_semantic=query_semantic,
        query_localization=query_localization,
        scene=scene,
    )


def local_cloud(pose, scene, cam=SYNTH_CAM):
    """Scene points visible from a pose, expressed in its camera frame."""
    idx = visible_points(pose, cam, scene)
    pts = np.asarray(scene, dtype=np.float64)[idx]
    return (pts - pose.translation) @ pose.rotation


def write_dataset(data, outdir, depth_clouds=False):
    """Write the dataset in the standard file formats the CLI consumes."""
    os.makedirs(outdir, exist_ok=True)
    p = lambda name: os.path.join(outdir, name)
    epgio.save_trajectory(p("map.traj"), data.map_frames)
    ids = [f.frame_id for f in data.map_frames]
    epgio.save_embeddings(
        p("map_semantic.emb"), ids, np.array([data.semantic[i] for i in ids], dtype=np.float16)
    )
    epgio.save_embeddings(
        p("map_localization.emb"), ids, np.array([data.localization[i] for i in ids], dtype=np.float32)
    )
    epgio.save_trajectory(p("queries.traj"), data.query_frames)
    qids = [f.frame_id for f in data.query_frames]
    epgio.save_embeddings(
        p("query_semantic.emb"), qids, np.array([data.query_semantic[i] for i in qids], dtype=np.float16)
    )
    epgio.save_embeddings(
        p("query_localization.emb"),
        qids,
        np.array([data.query_localization[i] for i in qids], dtype=np.float32),
    )
    epgio.save_pointcloud(p("scene.ply"), data.scene)
    if depth_clouds:
        ddir = p("depth")
        os.makedirs(ddir, exist_ok=True)
        for f in data.query_frames:
            cloud = local_cloud(f.pose, data.scene)
            epgio.save_pointcloud(os.path.join(ddir, f"{f.frame_id}.ply"), cloud)
    return outdir
