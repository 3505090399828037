"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line and holding its stated runtime budget (run with -s to
see the lines live)."""

import itertools
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from epg import io as epgio
from epg.builder import BuilderConfig, Epg, EpgNode, Frame, ingest
from epg.cli import main
from epg.descriptor import fit_pca, vlad, VladVocabulary
from epg.evaluation import RecallThresholds, recall_at_k, redundancy_index
from epg.grid import (
    GridParams,
    Pose,
    PoseKey,
    ViewAngles,
    angular_key,
    cell_center,
    is_cap_ring,
    pose_key,
    pose_looking,
    ring_theta_step,
    view_angles,
    wrap_angle,
)
from epg.query import top_k
from epg.reloc import (
    Bundle,
    IcpConfig,
    Vote,
    VoteParams,
    gaussian_vote,
    icp_refine,
    relocalize,
    relocalize_icp,
    vote_scores,
)
from epg.synthbench import SYNTH_CAM, SynthConfig, generate, local_cloud
from _helpers import (
    CountingProvider,
    make_epg,
    random_pose,
    random_stream,
    random_unit,
    replay_oracle,
)

P6 = GridParams(0.4, math.pi / 6, math.pi / 6)
FINE = RecallThresholds(0.3, math.pi / 6)


@contextmanager
def criterion(name, budget_s):
    start = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    elapsed = time.perf_counter() - start
    print(f"[PASS] {name} ({elapsed:.2f}s / budget {budget_s:.0f}s)")
    assert elapsed < budget_s, f"{name}: {elapsed:.2f}s over the {budget_s}s budget"


def test_grid_round_trip_100k():
    with criterion("grid round-trip over 1e5 random poses", 5.0):
        rng = np.random.default_rng(12345)
        quats = rng.standard_normal((100_000, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        positions = rng.uniform(-20.0, 20.0, (100_000, 3))
        for q, t in zip(quats, positions):
            pose = Pose.from_quaternion(q, t, check=False)
            key = pose_key(pose, P6)
            pos, ang = cell_center(key, P6)
            assert abs(pose.translation[0] - pos[0]) <= P6.dl / 2 + 1e-9
            assert abs(pose.translation[1] - pos[1]) <= P6.dl / 2 + 1e-9
            assert abs(pose.translation[2] - pos[2]) <= P6.dl / 2 + 1e-9
            a = view_angles(pose)
            assert abs(a.phi - ang.phi) <= P6.d_phi / 2 + 1e-9
            if is_cap_ring(key.l, P6):
                assert key.m == 0
            else:
                step = ring_theta_step(key.l, P6)
                assert abs(wrap_angle(a.theta - ang.theta)) <= step / 2 + 1e-9


def test_angular_key_hand_values():
    with criterion("angular partitioning hand values", 1.0):
        # independent evaluation of the partitioning rule:
        # l = floor(0.1 / (pi/6)) = 0; ring step = pi/6 * cos(pi/12);
        # m = floor(1.0 / step) = 1
        step_oracle = (math.pi / 6) * math.cos(math.pi / 12)
        assert step_oracle == pytest.approx(0.5057575799637313, abs=1e-12)
        l, m = angular_key(ViewAngles(theta=1.0, phi=0.1), P6)
        assert (l, m) == (0, 1)
        assert ring_theta_step(0, P6) == pytest.approx(step_oracle, abs=1e-5)


def test_builder_matches_replay_oracle():
    with criterion("builder equals brute-force replay on 100 random streams", 30.0):
        rng = np.random.default_rng(777)
        sizes = list(rng.integers(50, 1500, 97)) + [5000, 8000, 10_000]
        for n in sizes:
            frames = random_stream(rng, int(n))
            config = BuilderConfig(revisit_window=float(rng.choice([0.0, 2.0, 10.0])))
            provider = CountingProvider()
            epg = ingest(frames, P6, config, provider)
            expected, calls = replay_oracle(frames, P6, config)
            got = {k: n_.frame_id for k, n_ in epg.nodes.items()}
            assert got == {k: fid for k, (fid, _) in expected.items()}
            assert provider.calls == calls
            visits = len(list(itertools.groupby(pose_key(f.pose, P6) for f in frames)))
            assert provider.calls <= visits


def test_sparsification_strictly_ordered():
    with criterion("node count strictly drops as dl doubles", 10.0):
        data = generate(SynthConfig(n_frames=600, n_queries=1, loc_dim=8, sem_dim=4), 2024)
        counts = []
        for dl in (0.2, 0.4, 0.8):
            counts.append(len(ingest(data.map_frames, GridParams(dl), BuilderConfig(),
                                     data.provider())))
        assert counts[0] > counts[1] > counts[2]


def test_vlad_against_naive_reference():
    with criterion("VLAD equals the naive double-loop reference (200 sets)", 10.0):
        rng = np.random.default_rng(31)
        for _ in range(200):
            k = int(rng.integers(1, 9))
            d = int(rng.integers(2, 9))
            centroids = rng.normal(0, 1, (k, d))
            feats = rng.normal(0, 1, (int(rng.integers(1, 120)), d))
            got = vlad(feats, VladVocabulary(centroids))
            # straight double loop
            blocks = [np.zeros(d) for _ in range(k)]
            for f in feats:
                best = int(np.argmin([np.linalg.norm(f - c) for c in centroids]))
                blocks[best] = blocks[best] + (f - centroids[best])
            ref = []
            for b in blocks:
                n = np.linalg.norm(b)
                ref.append(b / n if n > 0 else b)
            ref = np.concatenate(ref)
            n = np.linalg.norm(ref)
            if n > 0:
                ref = ref / n
            assert np.abs(got - ref).max() <= 1e-6
        centroids = rng.normal(0, 1, (4, 3))
        at_centroids = np.repeat(centroids, 2, axis=0)
        assert np.all(vlad(at_centroids, VladVocabulary(centroids)) == 0.0)


def test_pca_properties():
    with criterion("PCA orthonormality and trailing-energy identity", 5.0):
        rng = np.random.default_rng(32)
        data = rng.normal(0, 1, (100, 64))
        t = fit_pca(data, 16)
        assert np.abs(t.basis @ t.basis.T - np.eye(16)).max() <= 1e-5
        centered = data - data.mean(axis=0)
        err = np.sum((centered - centered @ t.basis.T @ t.basis) ** 2)
        s = np.linalg.svd(centered, compute_uv=False)
        assert err == pytest.approx(np.sum(s[16:] ** 2), abs=1e-5)


def test_vote_oracle_and_planted_cluster():
    with criterion("Gaussian voting equals O(n^2) brute force (200 sets)", 10.0):
        rng = np.random.default_rng(33)
        params = VoteParams(sigma_xyz=0.8, sigma_ang=0.4)
        for _ in range(200):
            n = int(rng.integers(1, 101))
            votes = [
                Vote(pose=random_pose(rng, 3.0), source=(i // 5, i % 5), similarity=0.0)
                for i in range(n)
            ]
            scores = vote_scores(votes, params)
            angles = [view_angles(v.pose) for v in votes]
            ref = []
            for i, v in enumerate(votes):
                s = 0.0
                for j, w in enumerate(votes):
                    d2 = float(np.sum((v.pose.translation - w.pose.translation) ** 2))
                    dth = wrap_angle(angles[i].theta - angles[j].theta)
                    dph = angles[i].phi - angles[j].phi
                    s += math.exp(-d2 / (2 * params.sigma_xyz**2)
                                  - (dth**2 + dph**2) / (2 * params.sigma_ang**2))
                ref.append(s)
            assert np.abs(np.asarray(scores) - ref).max() <= 1e-9
            est = gaussian_vote(votes, params)
            best = min(range(n), key=lambda i: (-ref[i], votes[i].source))
            assert est.winning_vote is votes[best]

        vp = VoteParams()
        for trial in range(100):
            base = random_pose(rng, 2.0)
            offset = random_unit(rng, 3) * 10 * vp.sigma_xyz
            votes = [
                Vote(base, (0, 0), 0.0),
                Vote(base, (1, 0), 0.0),
                Vote(base, (2, 0), 0.0),
                Vote(Pose(base.rotation, base.translation + offset), (3, 0), 0.0),
            ]
            est = gaussian_vote(votes, vp)
            assert np.array_equal(est.pose.translation, base.translation)
            assert est.score == pytest.approx(3.0, abs=1e-6)


def test_icp_recovery():
    with criterion("ICP recovers 100 random rigid perturbations", 60.0):
        rng = np.random.default_rng(34)
        scene = rng.uniform(-2.0, 2.0, (2000, 3))
        cfg = IcpConfig(max_dist=1.5, max_iter=50)
        ok = 0
        for _ in range(100):
            axis = random_unit(rng, 3)
            ang = rng.uniform(0, math.radians(20))
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            dR = np.eye(3) + math.sin(ang) * K + (1 - math.cos(ang)) * K @ K
            dt = random_unit(rng, 3) * rng.uniform(0, 0.2)
            init = Pose(dR, dt)
            pose, _, converged = icp_refine(init, scene.copy(), scene, cfg)
            t_err = float(np.linalg.norm(pose.translation))
            r_err = math.acos(min(1.0, (np.trace(pose.rotation) - 1) / 2))
            if converged and t_err < 1e-3 and r_err < math.radians(0.1):
                ok += 1
        assert ok >= 95


def test_synthetic_relocalization_directionality():
    with criterion("bundle >= simple on every seed; ICP-bundle error <= bundle", 300.0):
        kb, kc = 7, 5
        vp = VoteParams(sigma_xyz=0.45)
        icp_cfg = IcpConfig(max_dist=0.8)
        simple_r1s, bundle_r1s, bundle_errs, icp_errs = [], [], [], []
        for seed in range(10):
            cfg = SynthConfig(n_frames=300, n_queries=30, noise=0.25, distractors=25,
                              loc_dim=32, scene_points=3000)
            data = generate(cfg, seed)
            epg = ingest(data.map_frames, P6, BuilderConfig(), data.provider())
            qf = data.query_frames
            desc = data.query_localization
            clouds = {f.frame_id: local_cloud(f.pose, data.scene) for f in qf}
            simple_est, bundle_est, icp_est, truths = [], [], [], []
            for s in range(0, len(qf) - kb + 1, 2):
                idxs = list(range(s, s + kb))
                mid = qf[idxs[kb // 2]]
                truths.append(mid.pose)
                hits = top_k(epg, desc[mid.frame_id], "localization", 1)
                simple_est.append([hits[0].node.pose])
                bundle = Bundle(poses=[qf[i].pose for i in idxs],
                                queries=[desc[qf[i].frame_id] for i in idxs])
                bundle_est.append([relocalize(epg, bundle, k_c=kc, params=vp).pose])
                est = relocalize_icp(epg, bundle, [clouds[qf[i].frame_id] for i in idxs],
                                     data.scene, k_c=kc, params=vp, icp_cfg=icp_cfg)
                icp_est.append([est.pose])
            s1 = recall_at_k(simple_est, truths, 1, FINE)
            b1 = recall_at_k(bundle_est, truths, 1, FINE)
            simple_r1s.append(s1)
            bundle_r1s.append(b1)
            bundle_errs.append(np.mean([np.linalg.norm(e[0].translation - t.translation)
                                        for e, t in zip(bundle_est, truths)]))
            icp_errs.append(np.mean([np.linalg.norm(e[0].translation - t.translation)
                                     for e, t in zip(icp_est, truths)]))
        assert all(b >= s for b, s in zip(bundle_r1s, simple_r1s))
        assert np.mean(bundle_r1s) - np.mean(simple_r1s) > 0
        assert np.mean(icp_errs) <= np.mean(bundle_errs)


def test_redundancy_properties():
    with criterion("redundancy index thresholds and exact constructions", 30.0):
        cam = SYNTH_CAM
        rng = np.random.default_rng(35)
        # R_25 >= R_50 on synthetic scenes
        for seed in range(3):
            data = generate(SynthConfig(n_frames=120, n_queries=1, loc_dim=8, sem_dim=4), seed)
            epg = ingest(data.map_frames, P6, BuilderConfig(), data.provider())
            assert redundancy_index(epg, cam, data.scene, 25) >= redundancy_index(
                epg, cam, data.scene, 50
            )
        # single node: no pairs
        single = make_epg([pose_looking((0, 0, 0), (1, 0, 0))], P6, rng=rng)
        scene = rng.uniform(-1, 1, (100, 3)) + np.array([3.0, 0, 0])
        assert redundancy_index(single, cam, scene, 50) == 0.0
        # N identical views in distinct angular cells overlap fully
        n = 9
        epg = Epg(P6)
        pose = pose_looking((0.0, 0.0, 0.0), (1, 0, 0))
        for m in range(n):
            epg.store(EpgNode(key=PoseKey(0, 0, 0, 0, m), pose=pose, timestamp=float(m),
                              frame_id=f"f{m}", semantic=random_unit(rng, 4).astype(np.float16),
                              localization=random_unit(rng, 4).astype(np.float32),
                              insertion_index=0, score=0.0))
        assert redundancy_index(epg, cam, scene, 50) == n - 1


def test_serialization_round_trips(tmp_path):
    with criterion("bit-exact round trips, corruption detection, node size", 10.0):
        rng = np.random.default_rng(36)

        def corrupt(path):
            data = bytearray(path.read_bytes())
            data[len(data) // 2] ^= 0xFF
            path.write_bytes(bytes(data))

        # EPG with the shipped default embedding dims (768 f2 + 512 f4)
        frames = []
        t = 0.0
        for i in range(240):
            t += float(rng.uniform(0.01, 2.0))
            frames.append(Frame(t, random_pose(rng, 8.0), f"img{i}"))
        provider = CountingProvider(dim_sem=768, dim_loc=512)
        epg = ingest(frames, P6, BuilderConfig(revisit_window=1.0), provider)
        p = tmp_path / "m.epg"
        epgio.save_epg(p, epg)
        assert epgio.load_epg(p) == epg
        assert os.path.getsize(p) / len(epg) <= 4096
        corrupt(p)
        with pytest.raises(epgio.FormatError):
            epgio.load_epg(p)

        ids = [f"f{i}" for i in range(64)]
        mat = rng.normal(0, 1, (64, 48)).astype(np.float32)
        p = tmp_path / "e.emb"
        epgio.save_embeddings(p, ids, mat)
        ids2, mat2 = epgio.load_embeddings(p)
        assert ids2 == ids and mat2.tobytes() == mat.tobytes()
        corrupt(p)
        with pytest.raises(epgio.FormatError):
            epgio.load_embeddings(p)

        p = tmp_path / "t.traj"
        epgio.save_trajectory(p, frames[:80])
        loaded = epgio.load_trajectory(p)
        for a, b in zip(frames, loaded):
            assert abs(a.timestamp - b.timestamp) < 1e-12
            assert np.abs(a.pose.rotation - b.pose.rotation).max() < 1e-12
            assert np.abs(a.pose.translation - b.pose.translation).max() < 1e-12
        p.write_text(p.read_text().replace("img1\n", "img1 extra\n"))
        with pytest.raises(epgio.FormatError):
            epgio.load_trajectory(p)

        pts = rng.normal(0, 5, (5000, 3)).astype(np.float32)
        p = tmp_path / "c.ply"
        epgio.save_pointcloud(p, pts)
        assert epgio.load_pointcloud(p).tobytes() == pts.tobytes()
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(epgio.FormatError):
            epgio.load_pointcloud(p)


def test_cli_determinism_and_eval_table(tmp_path, capsys):
    with criterion("deterministic builds and the 4-column recall table", 120.0):
        ds = tmp_path / "ds"
        assert main(["synth", "--out-dir", str(ds), "--frames", "250", "--queries", "25",
                     "--noise", "0.2", "--distractors", "15", "--loc-dim", "24",
                     "--sem-dim", "12", "--seed", "11", "--depth"]) == 0
        outs = []
        for name in ("a.epg", "b.epg"):
            out = tmp_path / name
            assert main(["build", "--trajectory", str(ds / "map.traj"),
                         "--semantic", str(ds / "map_semantic.emb"),
                         "--localization", str(ds / "map_localization.emb"),
                         "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

        capsys.readouterr()
        assert main(["eval", "--epg", str(tmp_path / "a.epg"),
                     "--queries", str(ds / "queries.traj"),
                     "--query-embeddings", str(ds / "query_localization.emb"),
                     "--scene", str(ds / "scene.ply"), "--depth-dir", str(ds / "depth"),
                     "--kb", "7", "--format", "csv"]) == 0
        stdout = capsys.readouterr().out
        lines = stdout.splitlines()
        assert lines[0] == "mode,coarse_r1,coarse_r5,fine_r1,fine_r5"
        modes = [l.split(",")[0] for l in lines[1:]]
        for mode in ("simple", "bundle", "icp", "icp-bundle"):
            assert mode in modes
        table = {l.split(",")[0]: [float(v) for v in l.split(",")[1:]] for l in lines[1:]}
        assert table["R_25"][0] >= table["R_50"][0]
        with capsys.disabled():
            print()
            print(stdout)
