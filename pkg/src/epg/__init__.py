"""Embedding pose graphs: sparse 5D-grid pose maps carrying semantic and
localization embeddings, with retrieval, navigation, re-localization, and
evaluation tooling."""

from .builder import BuilderConfig, BuildError, Epg, EpgNode, Frame, centering_score, ingest, merge
from .descriptor import PcaTransform, VladVocabulary, fit_pca, fit_vocabulary, reduce, vlad
from .evaluation import (
    Intrinsics,
    RecallThresholds,
    filter_queries,
    recall_at_k,
    redundancy_index,
    visible_points,
)
from .grid import (
    GridParams,
    Pose,
    PoseKey,
    ViewAngles,
    angular_key,
    cell_center,
    pose_key,
    spatial_key,
    view_angles,
)
from .query import DisambiguationResult, NoPathError, QueryHit, disambiguate, top_k, view_overlap, waypoints
from .reloc import (
    Bundle,
    IcpConfig,
    RelocEstimate,
    Vote,
    VoteParams,
    gaussian_vote,
    icp_refine,
    realign_votes,
    relocalize,
    relocalize_icp,
)

__version__ = "0.1.0"
