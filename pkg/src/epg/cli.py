"""Command-line front end: build, query, re-localize, evaluate, plus the
descriptor-artifact commands (fit-vocab, fit-pca, aggregate) and a synthetic
dataset generator.

Exit codes: 0 success, 1 usage, 2 input format, 3 computation failure.
"""

import argparse
import math
import os
import sys

import numpy as np

from . import io as epgio
from .builder import BuildError, BuilderConfig, ingest
from .descriptor import fit_pca, fit_vocabulary, reduce as pca_reduce, vlad
from .evaluation import Intrinsics, RecallThresholds, filter_queries, recall_at_k, redundancy_index
from .grid import GridParams, cell_center, view_angles
from .providers import FileProvider, extract_single
from .query import disambiguate, top_k
from .reloc import (
    Bundle,
    IcpConfig,
    VoteParams,
    icp_refine,
    realign_votes,
    relocalize,
    relocalize_icp,
    retrieve_candidates,
    vote_scores,
)
from .synthbench import SynthConfig, generate, write_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_COMPUTE = 3

PROFILES = {
    "indoor": dict(
        dl=0.4, sigma_xyz=0.45, max_range=10.0,
        coarse=0.8, fine=0.3, dedupe_dist=0.3, dedupe_ang=math.radians(20.0),
    ),
    "outdoor": dict(
        dl=2.0, sigma_xyz=2.2, max_range=80.0,
        coarse=15.0, fine=3.0, dedupe_dist=3.0, dedupe_ang=math.radians(10.0),
    ),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_flags(p):
    p.add_argument("--profile", choices=("indoor", "outdoor"), default="indoor")
    p.add_argument("--dl", type=float)
    p.add_argument("--dtheta", type=float)
    p.add_argument("--dphi", type=float)
    p.add_argument("--revisit-window", type=float)
    p.add_argument("--kb", type=int, default=15)
    p.add_argument("--kc", type=int, default=5)
    p.add_argument("--sigma-xyz", type=float)
    p.add_argument("--sigma-ang", type=float)
    p.add_argument("--pca-dim", type=int, default=512)
    p.add_argument("--vlad-k", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "csv"), default="text", dest="fmt")


def _profile(args, key):
    return PROFILES[args.profile][key]


def _grid_params(args):
    return GridParams(
        dl=args.dl if args.dl is not None else _profile(args, "dl"),
        d_theta=args.dtheta if args.dtheta is not None else math.pi / 6,
        d_phi=args.dphi if args.dphi is not None else math.pi / 6,
    )


def _vote_params(args):
    return VoteParams(
        sigma_xyz=args.sigma_xyz if args.sigma_xyz is not None else _profile(args, "sigma_xyz"),
        sigma_ang=args.sigma_ang if args.sigma_ang is not None else math.radians(20.0),
    )


def _emit_rows(rows, fmt):
    if fmt == "csv":
        for row in rows:
            print(",".join(str(c) for c in row))
        return
    widths = [max(len(str(r[c])) for r in rows) for c in range(len(rows[0]))]
    for row in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())


def _pose_angles_deg(pose):
    a = view_angles(pose)
    return math.degrees(a.theta), math.degrees(a.phi)


# -- build ---------------------------------------------------------------

def cmd_build(args):
    frames = epgio.load_trajectory(args.trajectory)
    if not frames:
        raise epgio.FormatError(f"{args.trajectory}: no frames")
    provider = FileProvider(args.semantic, args.localization)
    config = BuilderConfig(
        revisit_window=args.revisit_window if args.revisit_window is not None else 10.0
    )
    epg = ingest(frames, _grid_params(args), config, provider)
    epgio.save_epg(args.out, epg)
    size = os.path.getsize(args.out)
    rows = [
        ("nodes", len(epg)),
        ("size_bytes", size),
        ("provider_calls", provider.calls),
    ]
    _emit_rows(rows, args.fmt)
    return EXIT_OK


# -- query ---------------------------------------------------------------

def _load_query_vector(args):
    extractor = os.environ.get("EPG_EXTRACTOR")
    if args.text_embedding:
        ids, mat = epgio.load_embeddings(args.text_embedding)
        return np.asarray(mat[0], dtype=np.float32), "semantic"
    if args.image_embedding:
        ids, mat = epgio.load_embeddings(args.image_embedding)
        return np.asarray(mat[0], dtype=np.float32), "localization"
    if args.text is not None:
        if not extractor:
            raise UsageError("--text needs the EPG_EXTRACTOR environment variable")
        return extract_single(extractor, "clip-text", args.text), "semantic"
    if args.image is not None:
        if not extractor:
            raise UsageError("--image needs the EPG_EXTRACTOR environment variable")
        return (
            extract_single(extractor, "loc-descriptor", args.image, vocab=args.vocab, pca=args.pca),
            "localization",
        )
    raise UsageError("one of --text-embedding/--image-embedding/--text/--image is required")


def _hit_rows(epg, hits):
    rows = [("rank", "i", "j", "k", "l", "m", "x", "y", "z", "yaw_deg", "pitch_deg", "score")]
    for rank, h in enumerate(hits, start=1):
        pos, _ = cell_center(h.key, epg.params)
        yaw, pitch = _pose_angles_deg(h.node.pose)
        rows.append(
            (rank, *h.key, f"{pos[0]:.3f}", f"{pos[1]:.3f}", f"{pos[2]:.3f}",
             f"{yaw:.1f}", f"{pitch:.1f}", f"{h.score:.3f}")
        )
    return rows


def cmd_query(args):
    epg = epgio.load_epg(args.epg)
    vector, field_name = _load_query_vector(args)
    if len(epg):
        stored = getattr(epg.nodes[epg.order[0]], field_name).shape[0]
        if vector.shape != (stored,):
            raise epgio.FormatError(
                f"query dimension {vector.shape[0]} does not match stored {field_name} "
                f"dimension {stored}"
            )
    k = min(args.k, max(len(epg), 1))
    hits = top_k(epg, vector, field_name=field_name, k=k)
    _emit_rows(_hit_rows(epg, hits), args.fmt)
    if not args.disambiguate:
        return EXIT_OK

    scene = cam = None
    if args.scene:
        scene = epgio.load_pointcloud(args.scene)
        cam = Intrinsics(
            fx=args.fx, fy=args.fx, cx=args.width / 2, cy=args.height / 2,
            width=args.width, height=args.height, max_range=_profile(args, "max_range"),
        )
    elif not args.allow_heuristic:
        raise UsageError("--disambiguate needs --scene (or --allow-heuristic)")

    while True:
        result = disambiguate(hits, epg, scene=scene, cam=cam)
        if not result.needs_clarification:
            best = result.clusters[0][0]
            print(f"unambiguous: {_format_hit(epg, best)}")
            return EXIT_OK
        note = " (heuristic overlap)" if result.heuristic else ""
        print(f"ambiguous: {len(result.clusters)} distinct locations{note}")
        for ci, cluster in enumerate(result.clusters):
            print(f"  [{ci}] {_format_hit(epg, cluster[0])}")
        print("pick an index or give a refinement embedding file (blank to abort):")
        line = sys.stdin.readline()
        if not line or not line.strip():
            print("aborted")
            return EXIT_OK
        choice = line.strip()
        if choice.isdigit() and int(choice) < len(result.clusters):
            print(f"selected: {_format_hit(epg, result.clusters[int(choice)][0])}")
            return EXIT_OK
        try:
            _, mat = epgio.load_embeddings(choice)
        except (OSError, epgio.FormatError) as exc:
            print(f"not an index or readable embedding file: {exc}")
            continue
        vector = np.asarray(mat[0], dtype=np.float32)
        hits = top_k(epg, vector, field_name=field_name, k=k)


def _format_hit(epg, hit):
    pos, _ = cell_center(hit.key, epg.params)
    yaw, pitch = _pose_angles_deg(hit.node.pose)
    return (
        f"key=({hit.key.i},{hit.key.j},{hit.key.k},{hit.key.l},{hit.key.m}) "
        f"center=({pos[0]:.2f},{pos[1]:.2f},{pos[2]:.2f}) "
        f"yaw={yaw:.1f} pitch={pitch:.1f} score={hit.score:.3f}"
    )


# -- reloc ---------------------------------------------------------------

def _load_depth_clouds(depth_dir, frame_ids):
    clouds = []
    for fid in frame_ids:
        path = os.path.join(depth_dir, f"{fid}.ply")
        if not os.path.exists(path):
            raise epgio.FormatError(f"missing depth cloud {path}")
        clouds.append(epgio.load_pointcloud(path))
    return clouds


def cmd_reloc(args):
    epg = epgio.load_epg(args.epg)
    bundle, ids = epgio.load_bundle(args.bundle)
    params = _vote_params(args)
    if args.icp:
        if not args.scene or not args.depth_dir:
            raise UsageError("--icp needs --scene and --depth-dir")
        scene = epgio.load_pointcloud(args.scene)
        clouds = _load_depth_clouds(args.depth_dir, ids)
        cfg = IcpConfig(max_dist=2.0 * epg.params.dl)
        estimate = relocalize_icp(epg, bundle, clouds, scene, k_c=args.kc, params=params, icp_cfg=cfg)
        mode = "icp" if len(bundle.poses) == 1 else "icp-bundle"
    else:
        estimate = relocalize(epg, bundle, k_c=args.kc, params=params)
        mode = "simple" if len(bundle.poses) == 1 else "bundle"
    t = estimate.pose.translation
    yaw, pitch = _pose_angles_deg(estimate.pose)
    rows = [
        ("mode", mode),
        ("x", f"{t[0]:.6f}"),
        ("y", f"{t[1]:.6f}"),
        ("z", f"{t[2]:.6f}"),
        ("yaw_deg", f"{yaw:.3f}"),
        ("pitch_deg", f"{pitch:.3f}"),
        ("vote_score", f"{estimate.score:.6f}"),
    ]
    _emit_rows(rows, args.fmt)
    return EXIT_OK


# -- eval ----------------------------------------------------------------

def _ranked_votes(votes, params, k):
    scores = vote_scores(votes, params)
    order = sorted(range(len(votes)), key=lambda i: (-scores[i], votes[i].source))
    return [votes[i].pose for i in order[:k]]


def _eval_modes(epg, frames, descriptors, args, scene, depth_dir):
    """Per-mode ranked estimates for the mid frame of each query window."""
    kb = min(args.kb, len(frames))
    params = _vote_params(args)
    windows = [list(range(s, s + kb)) for s in range(0, len(frames) - kb + 1)]
    mids = [w[kb // 2] for w in windows]
    truths = [frames[m].pose for m in mids]

    simple, bundled = [], []
    icp_simple, icp_bundled = [], []
    use_icp = scene is not None and depth_dir is not None
    if use_icp:
        clouds = {f.frame_id: epgio.load_pointcloud(os.path.join(depth_dir, f"{f.frame_id}.ply"))
                  for f in frames}
        icp_cfg = IcpConfig(max_dist=2.0 * epg.params.dl)
    for w, mid in zip(windows, mids):
        hits = top_k(epg, descriptors[frames[mid].frame_id], field_name="localization", k=5)
        simple.append([h.node.pose for h in hits])
        bundle = Bundle(
            poses=[frames[i].pose for i in w],
            queries=[descriptors[frames[i].frame_id] for i in w],
        )
        candidates = retrieve_candidates(epg, bundle, args.kc)
        votes = realign_votes(bundle, candidates)
        bundled.append(_ranked_votes(votes, params, 5))
        if use_icp:
            refined = []
            for pose, _sim in candidates[bundle.mid_index]:
                rp, rmse, ok = icp_refine(pose, clouds[frames[mid].frame_id], scene, icp_cfg)
                refined.append((rp if ok else pose, rmse))
            refined.sort(key=lambda pr: pr[1])
            icp_simple.append([p for p, _ in refined])
            rows = []
            for i, cands in zip(w, candidates):
                row = []
                for pose, sim in cands:
                    rp, _, ok = icp_refine(pose, clouds[frames[i].frame_id], scene, icp_cfg)
                    row.append((rp if ok else pose, sim))
                rows.append(row)
            votes = realign_votes(bundle, rows)
            icp_bundled.append(_ranked_votes(votes, params, 5))
    modes = [("simple", simple), ("bundle", bundled)]
    if use_icp:
        modes += [("icp", icp_simple), ("icp-bundle", icp_bundled)]
    return modes, truths


def cmd_eval(args):
    epg = epgio.load_epg(args.epg)
    frames = epgio.load_trajectory(args.queries)
    ids, mat = epgio.load_embeddings(args.query_embeddings)
    descriptors = {fid: np.asarray(row, dtype=np.float32) for fid, row in zip(ids, mat)}
    missing = [f.frame_id for f in frames if f.frame_id not in descriptors]
    if missing:
        raise epgio.FormatError(f"queries without embeddings: {missing[:5]}")
    if args.truths:
        truth_frames = epgio.load_trajectory(args.truths)
        if len(truth_frames) != len(frames):
            raise epgio.FormatError(
                f"query/truth count mismatch: {len(frames)} vs {len(truth_frames)}"
            )
        by_id = {f.frame_id: f.pose for f in truth_frames}
        frames = [
            type(f)(f.timestamp, by_id.get(f.frame_id, f.pose), f.frame_id) for f in frames
        ]

    ang = math.radians(args.ang_threshold)
    coarse = RecallThresholds(args.coarse if args.coarse else _profile(args, "coarse"), ang)
    fine = RecallThresholds(args.fine if args.fine else _profile(args, "fine"), ang)
    dd = args.dedupe_dist if args.dedupe_dist is not None else _profile(args, "dedupe_dist")
    da = args.dedupe_ang if args.dedupe_ang is not None else _profile(args, "dedupe_ang")
    kept = filter_queries(frames, epg, coarse, dd, da)
    if not kept:
        raise epgio.FormatError("no queries survive the coarse/dedupe filter")

    scene = epgio.load_pointcloud(args.scene) if args.scene else None
    modes, truths = _eval_modes(epg, kept, descriptors, args, scene, args.depth_dir)

    rows = [("mode", "coarse_r1", "coarse_r5", "fine_r1", "fine_r5")]
    for name, estimates in modes:
        rows.append(
            (
                name,
                f"{recall_at_k(estimates, truths, 1, coarse):.1f}",
                f"{recall_at_k(estimates, truths, 5, coarse):.1f}",
                f"{recall_at_k(estimates, truths, 1, fine):.1f}",
                f"{recall_at_k(estimates, truths, 5, fine):.1f}",
            )
        )
    _emit_rows(rows, args.fmt)
    if scene is not None:
        cam = Intrinsics(
            fx=args.fx, fy=args.fx, cx=args.width / 2, cy=args.height / 2,
            width=args.width, height=args.height, max_range=_profile(args, "max_range"),
        )
        r50 = redundancy_index(epg, cam, scene, 50)
        r25 = redundancy_index(epg, cam, scene, 25)
        _emit_rows([("R_50", f"{r50:.2f}"), ("R_25", f"{r25:.2f}")], args.fmt)
    return EXIT_OK


# -- descriptor artifacts -------------------------------------------------

def _group_rows(ids, matrix):
    """Rows grouped by id in first-appearance order."""
    order = []
    groups = {}
    for fid, row in zip(ids, matrix):
        if fid not in groups:
            groups[fid] = []
            order.append(fid)
        groups[fid].append(row)
    return [(fid, np.asarray(groups[fid], dtype=np.float64)) for fid in order]


def cmd_fit_vocab(args):
    ids, mat = epgio.load_embeddings(args.features)
    sets = [g for _, g in _group_rows(ids, mat.astype(np.float64))]
    vocab = fit_vocabulary(sets, args.vlad_k, args.seed)
    epgio.save_vocabulary(args.out, vocab)
    _emit_rows([("centroids", vocab.k), ("dim", vocab.dim)], args.fmt)
    return EXIT_OK


def cmd_fit_pca(args):
    ids, mat = epgio.load_embeddings(args.features)
    vocab = epgio.load_vocabulary(args.vocab)
    descriptors = [vlad(g, vocab) for _, g in _group_rows(ids, mat.astype(np.float64))]
    transform = fit_pca(descriptors, args.pca_dim)
    epgio.save_pca(args.out, transform)
    _emit_rows([("dim_in", transform.dim_in), ("dim_out", transform.dim_out)], args.fmt)
    return EXIT_OK


def cmd_aggregate(args):
    ids, mat = epgio.load_embeddings(args.features)
    vocab = epgio.load_vocabulary(args.vocab)
    transform = epgio.load_pca(args.pca)
    out_ids, rows = [], []
    for fid, g in _group_rows(ids, mat.astype(np.float64)):
        out_ids.append(fid)
        rows.append(pca_reduce(vlad(g, vocab), transform))
    epgio.save_embeddings(args.out, out_ids, np.asarray(rows, dtype=np.float32))
    _emit_rows([("rows", len(out_ids)), ("dim", transform.dim_out)], args.fmt)
    return EXIT_OK


# -- synth ----------------------------------------------------------------

def cmd_synth(args):
    config = SynthConfig(
        trajectory=args.trajectory,
        n_frames=args.frames,
        scene_points=args.scene_points,
        noise=args.noise,
        distractors=args.distractors,
        n_queries=args.queries,
        loc_dim=args.loc_dim,
        sem_dim=args.sem_dim,
    )
    data = generate(config, args.seed)
    write_dataset(data, args.out_dir, depth_clouds=args.depth)
    _emit_rows(
        [
            ("out_dir", args.out_dir),
            ("map_frames", len(data.map_frames)),
            ("queries", len(data.query_frames)),
        ],
        args.fmt,
    )
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser():
    parser = _Parser(prog="epg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build an EPG from a trajectory and embedding files")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--semantic", required=True, help="semantic embedding file")
    p.add_argument("--localization", required=True, help="localization embedding file")
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="rank EPG nodes against a query embedding")
    p.add_argument("--epg", required=True)
    p.add_argument("--text-embedding")
    p.add_argument("--image-embedding")
    p.add_argument("--text", help="raw text; embedded via $EPG_EXTRACTOR")
    p.add_argument("--image", help="raw image path; embedded via $EPG_EXTRACTOR")
    p.add_argument("--vocab", help="VLAD vocabulary for --image")
    p.add_argument("--pca", help="PCA transform for --image")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--disambiguate", action="store_true")
    p.add_argument("--scene", help="scene PLY for FOV overlap")
    p.add_argument("--allow-heuristic", action="store_true",
                   help="permit the scene-free overlap heuristic")
    p.add_argument("--fx", type=float, default=300.0)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--height", type=int, default=300)
    _common_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("reloc", help="re-localize a pose bundle against an EPG")
    p.add_argument("--epg", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--icp", action="store_true")
    p.add_argument("--scene")
    p.add_argument("--depth-dir")
    _common_flags(p)
    p.set_defaults(func=cmd_reloc)

    p = sub.add_parser("eval", help="recall/redundancy benchmark over query frames")
    p.add_argument("--epg", required=True)
    p.add_argument("--queries", required=True, help="query trajectory (poses are ground truth)")
    p.add_argument("--query-embeddings", required=True)
    p.add_argument("--truths", help="separate ground-truth trajectory (frame-id matched)")
    p.add_argument("--scene")
    p.add_argument("--depth-dir")
    p.add_argument("--coarse", type=float, help="coarse distance threshold (m)")
    p.add_argument("--fine", type=float, help="fine distance threshold (m)")
    p.add_argument("--ang-threshold", type=float, default=30.0, help="angular threshold (deg)")
    p.add_argument("--dedupe-dist", type=float)
    p.add_argument("--dedupe-ang", type=float)
    p.add_argument("--fx", type=float, default=300.0)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--height", type=int, default=300)
    _common_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-vocab", help="fit a VLAD vocabulary from a feature dump")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_fit_vocab)

    p = sub.add_parser("fit-pca", help="fit the PCA reduction on VLAD descriptors")
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("aggregate", help="features -> VLAD -> PCA descriptor rows")
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("synth", help="generate a synthetic dataset in the standard formats")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trajectory", choices=("loop", "corridor", "figure-eight"), default="loop")
    p.add_argument("--frames", type=int, default=400)
    p.add_argument("--queries", type=int, default=40)
    p.add_argument("--scene-points", type=int, default=4000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--loc-dim", type=int, default=48)
    p.add_argument("--sem-dim", type=int, default=32)
    p.add_argument("--depth", action="store_true", help="also write per-query depth clouds")
    _common_flags(p)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (epgio.FormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (BuildError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
