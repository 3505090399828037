"""Bundle re-localization: candidate realignment, spatial Gaussian voting,
and optional point-to-point ICP refinement.

A bundle is a short run of consecutive poses tied together by local
odometry. Each pose retrieves its best map candidates; every candidate is
transported to the bundle's middle pose through the relative odometry, so
all candidates become votes for one location. Votes are scored by a sum of
Gaussian kernels in (x, y, z, yaw, pitch) and the top-scoring vote wins.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .grid import Pose, view_angles
from .query import top_k


@dataclass(frozen=True)
class Bundle:
    """K_b consecutive odometry poses with their localization queries."""

    poses: list
    queries: list

    def __post_init__(self):
        if len(self.poses) != len(self.queries) or len(self.poses) < 1:
            raise ValueError("bundle needs equal, nonzero pose and query counts")

    @property
    def mid_index(self):
        return len(self.poses) // 2


@dataclass(frozen=True)
class Vote:
    """Candidate world pose for the bundle's middle pose."""

    pose: Pose
    source: tuple  # (bundle index, candidate rank)
    similarity: float


@dataclass(frozen=True)
class VoteParams:
    sigma_xyz: float = 0.45  # meters; 2.2 suits outdoor scales
    sigma_ang: float = math.radians(20.0)

    def __post_init__(self):
        if self.sigma_xyz <= 0 or self.sigma_ang <= 0:
            raise ValueError("vote sigmas must be positive")


@dataclass(frozen=True)
class RelocEstimate:
    pose: Pose
    score: float
    winning_vote: Vote


@dataclass(frozen=True)
class IcpConfig:
    max_dist: float = 0.8  # correspondence gate, 2*dl by default
    max_iter: int = 30
    translation_eps: float = 1e-4
    rotation_eps: float = math.radians(0.01)


def realign_votes(bundle, candidates):
    """Transport each pose's candidates to the bundle middle pose.

    ``candidates[i]`` is the list of (pose, similarity) retrieved for bundle
    pose i. A candidate C hypothesizing pose i becomes the middle-pose vote
    C @ (P_i^-1 @ P_mid) through the relative odometry.
    """
    if len(candidates) != len(bundle.poses):
        raise ValueError("one candidate list per bundle pose required")
    mid = bundle.poses[bundle.mid_index]
    votes = []
    for i, (p_i, cands) in enumerate(zip(bundle.poses, candidates)):
        rel = p_i.inverse().compose(mid)
        for rank, (cand_pose, similarity) in enumerate(cands):
            votes.append(
                Vote(
                    pose=cand_pose.compose(rel),
                    source=(i, rank),
                    similarity=float(similarity),
                )
            )
    return votes


def vote_scores(votes, params):
    """Sum-of-Gaussians score of every vote, evaluated at vote locations.

    Votes are processed in canonical (bundle index, rank) order internally
    so results do not depend on input permutation.
    """
    if not votes:
        raise ValueError("empty vote set")
    order = sorted(range(len(votes)), key=lambda i: votes[i].source)
    t = np.array([votes[i].pose.translation for i in order])
    ang = [view_angles(votes[i].pose) for i in order]
    theta = np.array([a.theta for a in ang])
    phi = np.array([a.phi for a in ang])

    d2_xyz = np.sum((t[:, None, :] - t[None, :, :]) ** 2, axis=2)
    d_theta = theta[:, None] - theta[None, :]
    d_theta = np.remainder(d_theta + math.pi, 2.0 * math.pi) - math.pi
    d_phi = phi[:, None] - phi[None, :]
    expo = -d2_xyz / (2.0 * params.sigma_xyz**2) - (d_theta**2 + d_phi**2) / (
        2.0 * params.sigma_ang**2
    )
    scores_sorted = np.exp(expo).sum(axis=1)
    scores = np.empty(len(votes))
    scores[order] = scores_sorted
    return scores


def gaussian_vote(votes, params):
    """Pick the vote with the largest Gaussian mass (ties: lowest source)."""
    scores = vote_scores(votes, params)
    best = min(range(len(votes)), key=lambda i: (-scores[i], votes[i].source))
    return RelocEstimate(pose=votes[best].pose, score=float(scores[best]), winning_vote=votes[best])


def retrieve_candidates(epg, bundle, k_c):
    """Per-pose top-k_c localization candidates as (pose, similarity) lists."""
    out = []
    for q in bundle.queries:
        hits = top_k(epg, q, field_name="localization", k=k_c)
        out.append([(h.node.pose, h.score) for h in hits])
    return out


def relocalize(epg, bundle, k_c=5, params=VoteParams()):
    """Bundle re-localization without refinement.

    Similarities ride along on the votes for reporting but carry no vote
    weight.
    """
    if len(epg) == 0:
        raise ValueError("empty EPG")
    candidates = retrieve_candidates(epg, bundle, k_c)
    votes = realign_votes(bundle, candidates)
    return gaussian_vote(votes, params)


def _kabsch(src, dst):
    """Rigid (R, t) minimizing ||R @ src + t - dst||."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def icp_refine(initial, local_cloud, scene, cfg=IcpConfig()):
    """Point-to-point ICP of a camera-frame cloud onto the world scene.

    Nearest-neighbor correspondences within ``cfg.max_dist``, closed-form
    SVD updates, at most ``cfg.max_iter`` iterations. Returns (pose, rmse,
    converged); with no initial correspondences the initial pose comes back
    unchanged and unconverged.
    """
    local = np.asarray(local_cloud, dtype=np.float64)
    scene = np.asarray(scene, dtype=np.float64)
    if local.size == 0 or scene.size == 0:
        raise ValueError("both clouds must be non-empty")
    tree = cKDTree(scene)
    R = initial.rotation.copy()
    t = initial.translation.copy()
    converged = False
    for it in range(cfg.max_iter):
        world = local @ R.T + t
        dist, idx = tree.query(world, distance_upper_bound=cfg.max_dist)
        mask = np.isfinite(dist)
        if not mask.any():
            if it == 0:
                return initial, math.inf, False
            break
        dR, dt = _kabsch(world[mask], scene[idx[mask]])
        R = dR @ R
        t = dR @ t + dt
        angle = math.acos(min(1.0, max(-1.0, (np.trace(dR) - 1.0) / 2.0)))
        if float(np.linalg.norm(dt)) < cfg.translation_eps and angle < cfg.rotation_eps:
            converged = True
            break
    world = local @ R.T + t
    dist, _ = tree.query(world, distance_upper_bound=cfg.max_dist)
    mask = np.isfinite(dist)
    rmse = float(np.sqrt(np.mean(dist[mask] ** 2))) if mask.any() else math.inf
    return Pose(R, t, check=False), rmse, converged


def relocalize_icp(epg, bundle, local_clouds, scene, k_c=5, params=VoteParams(), icp_cfg=IcpConfig()):
    """Bundle re-localization with per-candidate ICP refinement.

    ``local_clouds[i]`` is the camera-frame depth cloud of bundle pose i.
    Candidates that fail to converge vote with their unrefined pose.
    """
    if scene is None or len(np.asarray(scene)) == 0:
        raise ValueError("a scene cloud is required for ICP re-localization (use relocalize)")
    if len(local_clouds) != len(bundle.poses):
        raise ValueError("one local cloud per bundle pose required")
    if len(epg) == 0:
        raise ValueError("empty EPG")
    candidates = retrieve_candidates(epg, bundle, k_c)
    refined = []
    for i, cands in enumerate(candidates):
        row = []
        for cand_pose, similarity in cands:
            pose, _, ok = icp_refine(cand_pose, local_clouds[i], scene, icp_cfg)
            row.append((pose if ok else cand_pose, similarity))
        refined.append(row)
    votes = realign_votes(bundle, refined)
    return gaussian_vote(votes, params)
