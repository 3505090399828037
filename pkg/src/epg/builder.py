"""Streaming EPG construction from timestamped pose sequences.

One pass over the frames keeps, for the currently occupied cell, the frame
closest to the cell center. Embeddings are only computed when a cell is
exited (or the stream ends), so the embedding provider runs once per
committed visit instead of once per frame.
"""

from dataclasses import dataclass

import numpy as np

from .grid import (
    Pose,
    PoseKey,
    cell_center,
    is_cap_ring,
    pose_key,
    ring_theta_step,
    view_angles,
    wrap_angle,
)


class BuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class Frame:
    """One captured image: timestamp (s), camera pose, source image id."""

    timestamp: float
    pose: Pose
    frame_id: str


@dataclass(frozen=True)
class BuilderConfig:
    revisit_window: float = 10.0  # seconds before a committed cell may update
    angle_weight: float = 1.0

    def __post_init__(self):
        if self.revisit_window < 0:
            raise ValueError("revisit_window must be >= 0")


@dataclass(eq=False)
class EpgNode:
    """Stored pose of one cell plus its two embedding vectors.

    semantic is kept in float16 (768-dim default), localization in float32
    (512-dim default); both are unit length unless the provider returned a
    zero vector.
    """

    key: PoseKey
    pose: Pose
    timestamp: float
    frame_id: str
    semantic: np.ndarray
    localization: np.ndarray
    insertion_index: int
    score: float

    def __eq__(self, other):
        if not isinstance(other, EpgNode):
            return NotImplemented
        return (
            self.key == other.key
            and self.pose == other.pose
            and self.timestamp == other.timestamp
            and self.frame_id == other.frame_id
            and self.insertion_index == other.insertion_index
            and self.score == other.score
            and self.semantic.dtype == other.semantic.dtype
            and self.localization.dtype == other.localization.dtype
            and self.semantic.tobytes() == other.semantic.tobytes()
            and self.localization.tobytes() == other.localization.tobytes()
        )


class Epg:
    """Keyed cell map: at most one node per 5D key, plus commit order.

    ``order`` lists keys by first commit; a re-commit replaces the node but
    keeps its slot, while ``insertion_index`` is bumped to the latest commit
    sequence number. ``session_boundaries`` holds the order index where each
    recording session starts.
    """

    def __init__(self, params):
        self.params = params
        self.nodes = {}
        self.order = []
        self.session_boundaries = []
        self._commit_counter = 0

    def __len__(self):
        return len(self.nodes)

    def __eq__(self, other):
        if not isinstance(other, Epg):
            return NotImplemented
        return (
            self.params == other.params
            and self.order == other.order
            and self.session_boundaries == other.session_boundaries
            and self.nodes == other.nodes
        )

    def store(self, node):
        """Insert or replace the node at its key, keeping order stable."""
        node.insertion_index = self._commit_counter
        self._commit_counter += 1
        if node.key not in self.nodes:
            self.order.append(node.key)
        self.nodes[node.key] = node

    def nodes_in_order(self):
        return [self.nodes[k] for k in self.order]

    def session_of(self, order_index):
        """Index of the session containing the given order position."""
        s = -1
        for b in self.session_boundaries:
            if b <= order_index:
                s += 1
            else:
                break
        return s

    def embedding_matrix(self, field_name):
        """(keys, float32 matrix) over nodes in commit order."""
        keys = list(self.order)
        if not keys:
            return keys, np.zeros((0, 0), dtype=np.float32)
        rows = [getattr(self.nodes[k], field_name) for k in keys]
        return keys, np.asarray(rows, dtype=np.float32)


def centering_score(pose, key, params, angle_weight=1.0):
    """Proximity of a pose to its cell's ideal center; 0 is perfect, else < 0.

    Each term is normalized by its own cell width so a cell-width of angular
    offset costs the same as a cell-width of translation. Cap rings have no
    yaw term. The pose must actually key into ``key``.
    """
    center_pos, center_ang = cell_center(key, params)
    d_pos = float(np.linalg.norm(pose.translation - center_pos)) / params.dl
    ang = view_angles(pose)
    d_ang = abs(ang.phi - center_ang.phi) / params.d_phi
    if not is_cap_ring(key.l, params):
        step = ring_theta_step(key.l, params)
        d_ang += abs(wrap_angle(ang.theta - center_ang.theta)) / step
    return -(d_pos + angle_weight * d_ang)


def unit(v, dtype=None):
    """L2-normalize, leaving exact zero vectors alone."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    out = v if n == 0 else v / n
    return out.astype(dtype) if dtype is not None else out


class _Visit:
    __slots__ = ("key", "best_frame", "best_score", "first_ts", "last_ts")

    def __init__(self, key, frame, score):
        self.key = key
        self.best_frame = frame
        self.best_score = score
        self.first_ts = frame.timestamp
        self.last_ts = frame.timestamp


def ingest(frames, params, config=BuilderConfig(), provider=None):
    """Build an EPG from one session of frames ordered by timestamp.

    ``provider`` is a callable mapping a frame_id to a
    (semantic, localization) vector pair; it is invoked once per stored
    commit. A cell revisited sooner than ``revisit_window`` seconds after
    its last commit is skipped entirely, and a later revisit only replaces
    the stored node when its best centering score is strictly better.
    """
    if provider is None:
        raise ValueError("an embedding provider is required")
    epg = Epg(params)
    last_commit_ts = {}
    visit = None
    prev_ts = None
    got_frames = False

    def commit(v):
        if v.key in epg.nodes:
            t0 = last_commit_ts.get(v.key)
            if t0 is not None and v.first_ts - t0 < config.revisit_window:
                return  # too soon after the last commit: trajectory noise
            if v.best_score <= epg.nodes[v.key].score:
                return  # no provider call for a losing revisit
        frame = v.best_frame
        try:
            semantic, localization = provider(frame.frame_id)
        except Exception as exc:
            raise BuildError(f"embedding provider failed for frame '{frame.frame_id}': {exc}") from exc
        epg.store(
            EpgNode(
                key=v.key,
                pose=frame.pose,
                timestamp=frame.timestamp,
                frame_id=frame.frame_id,
                semantic=unit(semantic, dtype=np.float16),
                localization=unit(localization, dtype=np.float32),
                insertion_index=0,
                score=v.best_score,
            )
        )
        last_commit_ts[v.key] = v.last_ts

    for idx, frame in enumerate(frames):
        got_frames = True
        if prev_ts is not None and frame.timestamp < prev_ts:
            raise BuildError(
                f"frame {idx} ('{frame.frame_id}') breaks timestamp order: "
                f"{frame.timestamp} < {prev_ts}"
            )
        prev_ts = frame.timestamp
        key = pose_key(frame.pose, params)
        score = centering_score(frame.pose, key, params, config.angle_weight)
        if visit is None or key != visit.key:
            if visit is not None:
                commit(visit)
            visit = _Visit(key, frame, score)
        else:
            visit.last_ts = frame.timestamp
            if score > visit.best_score:
                visit.best_frame = frame
                visit.best_score = score
    if visit is not None:
        commit(visit)
    if got_frames and epg.order:
        epg.session_boundaries = [0]
    return epg


def merge(base, addition):
    """Union of two EPGs; on key collision the better-centered node wins."""
    if base.params != addition.params:
        raise ValueError(f"grid parameter mismatch: {base.params} vs {addition.params}")
    out = Epg(base.params)
    for node in base.nodes_in_order():
        out.store(_copy_node(node))
    out.session_boundaries = list(base.session_boundaries)

    add_sessions = [addition.session_of(i) for i in range(len(addition.order))]
    seen_sessions = set()
    for pos, key in enumerate(addition.order):
        node = addition.nodes[key]
        new_len_before = len(out.order)
        if key in out.nodes:
            if node.score > out.nodes[key].score:
                out.store(_copy_node(node))
            continue
        out.store(_copy_node(node))
        sid = add_sessions[pos]
        if sid >= 0 and sid not in seen_sessions:
            seen_sessions.add(sid)
            out.session_boundaries.append(new_len_before)
    return out


def _copy_node(node):
    return EpgNode(
        key=node.key,
        pose=node.pose,
        timestamp=node.timestamp,
        frame_id=node.frame_id,
        semantic=node.semantic,
        localization=node.localization,
        insertion_index=node.insertion_index,
        score=node.score,
    )
