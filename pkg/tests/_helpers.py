"""Shared test factories: random poses, frames, tiny EPGs, and the
independent builder replay oracle."""

import itertools
import math

import numpy as np

from epg.builder import EpgNode, Epg, Frame, centering_score
from epg.grid import GridParams, Pose, pose_key, pose_looking


def random_rotation(rng):
    """Uniform random rotation via QR of a Gaussian matrix."""
    A = rng.standard_normal((3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q


def random_pose(rng, extent=10.0):
    return Pose(random_rotation(rng), rng.uniform(-extent, extent, 3), check=False)


def random_unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def yaw_pitch_pose(position, theta, phi):
    f = (
        math.cos(phi) * math.cos(theta),
        math.cos(phi) * math.sin(theta),
        math.sin(phi),
    )
    return pose_looking(position, f)


class CountingProvider:
    """Deterministic per-frame vectors plus a call counter."""

    def __init__(self, dim_sem=6, dim_loc=6, fail_on=None):
        self.dim_sem = dim_sem
        self.dim_loc = dim_loc
        self.fail_on = fail_on
        self.calls = 0

    def __call__(self, frame_id):
        if frame_id == self.fail_on:
            raise RuntimeError("backend exploded")
        self.calls += 1
        rng = np.random.default_rng(abs(hash(frame_id)) % (2**32))
        return random_unit(rng, self.dim_sem), random_unit(rng, self.dim_loc)


def replay_oracle(frames, params, config):
    """Two-pass builder reference: group frames into visits, fold the rules."""
    nodes = {}
    last_commit = {}
    calls = 0
    keyed = [(pose_key(f.pose, params), f) for f in frames]
    for key, group in itertools.groupby(keyed, key=lambda kf: kf[0]):
        fs = [f for _, f in group]
        scores = [centering_score(f.pose, key, params, config.angle_weight) for f in fs]
        best = max(range(len(fs)), key=lambda i: (scores[i], -i))
        first_ts, last_ts = fs[0].timestamp, fs[-1].timestamp
        if key in nodes:
            if first_ts - last_commit[key] < config.revisit_window:
                continue
            if scores[best] <= nodes[key][1]:
                continue
        nodes[key] = (fs[best].frame_id, scores[best])
        last_commit[key] = last_ts
        calls += 1
    return nodes, calls


def random_stream(rng, n, params=None):
    """Random-walk trajectory with pauses and occasional long gaps."""
    frames = []
    pos = rng.uniform(-1, 1, 3)
    theta = rng.uniform(-math.pi, math.pi)
    phi = rng.uniform(-0.6, 0.6)
    t = 0.0
    for i in range(n):
        step = rng.choice([0.0, 0.03, 0.3], p=[0.3, 0.5, 0.2])
        pos = pos + rng.normal(0, step, 3)
        theta = float((theta + rng.normal(0, 0.15) + math.pi) % (2 * math.pi) - math.pi)
        phi = float(np.clip(phi + rng.normal(0, 0.08), -1.4, 1.4))
        t += float(rng.choice([0.1, 0.5, 12.0], p=[0.7, 0.2, 0.1]))
        frames.append(Frame(t, yaw_pitch_pose(pos, theta, phi), f"s{i}"))
    return frames


def make_epg(poses, params=GridParams(0.4), dim_sem=8, dim_loc=8, rng=None, descriptors=None):
    """EPG with one node per pose; keys must come out distinct."""
    rng = rng or np.random.default_rng(0)
    epg = Epg(params)
    for idx, pose in enumerate(poses):
        key = pose_key(pose, params)
        if key in epg.nodes:
            raise AssertionError(f"test poses collide in cell {key}")
        loc = descriptors[idx] if descriptors is not None else random_unit(rng, dim_loc)
        epg.store(
            EpgNode(
                key=key,
                pose=pose,
                timestamp=float(idx),
                frame_id=f"f{idx}",
                semantic=random_unit(rng, dim_sem).astype(np.float16),
                localization=np.asarray(loc, dtype=np.float32),
                insertion_index=0,
                score=-0.1,
            )
        )
    epg.session_boundaries = [0] if len(epg) else []
    return epg
