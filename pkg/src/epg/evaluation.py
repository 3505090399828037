"""Visibility, view overlap, redundancy index, and Recall@K utilities."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model plus a hard visibility range (m)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    max_range: float = 10.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("intrinsics need positive focal lengths and image size")

    def horizontal_fov(self):
        return 2.0 * math.atan(self.width / (2.0 * self.fx))


@dataclass(frozen=True)
class RecallThresholds:
    """Positional (m) and forward-angle (rad) correctness radii."""

    d_xyz: float
    d_ang: float

    def __post_init__(self):
        if self.d_xyz <= 0 or self.d_ang <= 0:
            raise ValueError("thresholds must be positive")


# Environment presets; the angular gate matches the grid's pi/6 yaw step.
INDOOR_COARSE = RecallThresholds(0.8, math.pi / 6)
INDOOR_FINE = RecallThresholds(0.3, math.pi / 6)
OUTDOOR_COARSE = RecallThresholds(15.0, math.pi / 6)
OUTDOOR_FINE = RecallThresholds(3.0, math.pi / 6)


def visible_points(pose, cam, scene):
    """Indices of scene points inside the view frustum of ``pose``.

    A point is visible when its camera-frame depth lies in (0, max_range]
    and its pinhole projection lands inside the image. No occlusion
    reasoning.
    """
    scene = np.asarray(scene, dtype=np.float64)
    if scene.size == 0:
        return np.empty(0, dtype=np.intp)
    p_cam = (scene - pose.translation) @ pose.rotation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p_cam[:, 0] / z + cam.cx
        v = cam.fy * p_cam[:, 1] / z + cam.cy
    ok = (
        (z > 0)
        & (z <= cam.max_range)
        & (u >= 0)
        & (u < cam.width)
        & (v >= 0)
        & (v < cam.height)
    )
    return np.flatnonzero(ok)


def view_overlap(a, b, scene, cam):
    """IoU of the two poses' visible point sets; 0 when both are empty."""
    va = visible_points(a, cam, scene)
    vb = visible_points(b, cam, scene)
    union = np.union1d(va, vb).size
    if union == 0:
        return 0.0
    inter = np.intersect1d(va, vb, assume_unique=True).size
    return inter / union


def forward_angle(a, b):
    """Angle (rad) between the two poses' viewing directions."""
    fa = a.rotation[:, 2]
    fb = b.rotation[:, 2]
    c = float(np.dot(fa, fb) / (np.linalg.norm(fa) * np.linalg.norm(fb)))
    return math.acos(min(1.0, max(-1.0, c)))


def redundancy_index(epg, cam, scene, o):
    """Average number of other views whose visible-point IoU exceeds o percent."""
    nodes = epg.nodes_in_order()
    n = len(nodes)
    if n == 0:
        raise ValueError("empty EPG")
    scene = np.asarray(scene, dtype=np.float64)
    masks = np.zeros((n, scene.shape[0]), dtype=bool)
    for row, node in enumerate(nodes):
        masks[row, visible_points(node.pose, cam, scene)] = True
    sizes = masks.sum(axis=1)
    inter = masks.astype(np.int64) @ masks.T.astype(np.int64)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    np.fill_diagonal(iou, 0.0)
    count = np.count_nonzero(iou > o / 100.0)
    return count / n


def pose_match(estimate, truth, thr):
    return (
        float(np.linalg.norm(estimate.translation - truth.translation)) <= thr.d_xyz
        and forward_angle(estimate, truth) <= thr.d_ang
    )


def recall_at_k(estimates, truths, k, thr):
    """Percent of queries with a correct pose among the first k estimates."""
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimate lists vs {len(truths)} truths")
    if not truths:
        return 0.0
    hits = 0
    for ranked, truth in zip(estimates, truths):
        if any(pose_match(est, truth, thr) for est in ranked[:k]):
            hits += 1
    return 100.0 * hits / len(truths)


def filter_queries(query_frames, epg, coarse, dedupe_dist, dedupe_ang):
    """Benchmark query selection: proximity filter then greedy dedupe.

    Queries with no EPG node within the coarse thresholds are dropped; the
    rest are kept greedily in trajectory order when they differ from every
    kept query by at least ``dedupe_dist`` meters OR ``dedupe_ang`` radians.
    """
    node_poses = [n.pose for n in epg.nodes_in_order()]
    kept = []
    for frame in query_frames:
        if not any(pose_match(p, frame.pose, coarse) for p in node_poses):
            continue
        duplicate = False
        for other in kept:
            d = float(np.linalg.norm(frame.pose.translation - other.pose.translation))
            a = forward_angle(frame.pose, other.pose)
            if d < dedupe_dist and a < dedupe_ang:
                duplicate = True
                break
        if not duplicate:
            kept.append(frame)
    return kept
