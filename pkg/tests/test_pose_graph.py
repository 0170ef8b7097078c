"""Pose graph construction and LM pose adjustment."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vidsfm.errors import DataError
from vidsfm.geometry import Pose, se3_exp
from vidsfm.pose_graph import (
    PoseGraph,
    PoseGraphEdge,
    _Residuals,
    build_graph,
    dump_graph,
    edge_residual,
    optimize_pose_graph,
)
from vidsfm.synth import noisy_pose_loop


def random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    xi = np.concatenate(
        [rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale / 3, 3)]
    )
    return se3_exp(xi)


def center_rmse(poses, gt):
    c = np.array([p.camera_center() for p in poses])
    g = np.array([p.camera_center() for p in gt])
    return float(np.sqrt(np.mean(np.sum((c - g) ** 2, axis=-1))))


def consistent_measurements(poses, edges):
    return {(i, j): poses[j] @ poses[i].inverse() for i, j in edges}


class TestBuildGraph:
    def test_five_keyframes_eight_edges(self):
        kfs = [0, 3, 6, 9, 12]
        rng = np.random.default_rng(0)
        poses = [random_pose(rng) for _ in kfs]
        all_pairs = [(p, q) for p in range(5) for q in range(5) if p < q]
        meas = {
            (kfs[p], kfs[q]): poses[q] @ poses[p].inverse() for p, q in all_pairs
        }
        g = build_graph(kfs, (1, 2, 4, 8), [], poses, meas)
        got = sorted((e.i, e.j) for e in g.edges)
        assert got == [
            (0, 1), (0, 2), (0, 4), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4),
        ]
        assert len(g.edges) == 8
        for e in g.edges:
            tau = e.j - e.i
            assert np.allclose(e.weight, 1.0 / tau)

    def test_two_keyframes_single_unit_edge(self):
        rng = np.random.default_rng(1)
        poses = [random_pose(rng), random_pose(rng)]
        meas = {(0, 5): poses[1] @ poses[0].inverse()}
        g = build_graph([0, 5], (1, 2, 4, 8), [], poses, meas)
        assert len(g.edges) == 1
        e = g.edges[0]
        assert (e.i, e.j) == (0, 1)
        assert np.array_equal(e.weight, np.ones(6))

    def test_accepted_pair_adds_identity_weight_edge(self):
        kfs = list(range(0, 44, 4))  # 11 keyframes
        rng = np.random.default_rng(2)
        poses = [random_pose(rng) for _ in kfs]
        meas = {}
        for tau in (1, 2, 4, 8):
            for p in range(len(kfs) - tau):
                meas[(kfs[p], kfs[p + tau])] = poses[p + tau] @ poses[p].inverse()
        meas[(0, 40)] = poses[10] @ poses[0].inverse()
        g0 = build_graph(kfs, (1, 2, 4, 8), [], poses, meas)
        g1 = build_graph(kfs, (1, 2, 4, 8), [(0, 40)], poses, meas)
        assert len(g1.edges) == len(g0.edges) + 1
        extra = g1.edges[-1]
        assert (extra.i, extra.j) == (0, 10)
        assert np.array_equal(extra.weight, np.ones(6))

    def test_missing_measurement_rejected(self):
        rng = np.random.default_rng(3)
        poses = [random_pose(rng) for _ in range(3)]
        meas = {(0, 1): poses[1] @ poses[0].inverse()}
        with pytest.raises(DataError, match="missing relative pose"):
            build_graph([0, 1, 2], (1,), [], poses, meas)

    def test_disconnected_graph_rejected(self):
        rng = np.random.default_rng(4)
        poses = [random_pose(rng) for _ in range(4)]
        meas = consistent_measurements(poses, [(0, 2), (1, 3)])
        meas = {(i, j): meas[(i, j)] for i, j in [(0, 2), (1, 3)]}
        with pytest.raises(DataError, match="disconnected"):
            build_graph([0, 1, 2, 3], (2,), [], poses, meas)

    def test_pose_count_mismatch_rejected(self):
        with pytest.raises(DataError, match="initial poses"):
            build_graph([0, 1], (1,), [], [Pose.identity()], {})

    def test_edge_invariants(self):
        with pytest.raises(DataError, match="self edge"):
            PoseGraphEdge(2, 2, Pose.identity(), np.ones(6))
        with pytest.raises(DataError, match="positive"):
            PoseGraphEdge(0, 1, Pose.identity(), np.zeros(6))


class TestEdgeResidual:
    def test_zero_when_consistent(self):
        rng = np.random.default_rng(5)
        t_i = random_pose(rng)
        z = random_pose(rng)
        t_j = z @ t_i
        e = PoseGraphEdge(0, 1, z, np.ones(6))
        assert np.max(np.abs(edge_residual(e, t_i, t_j))) <= 1e-12

    def test_pure_translation_offset(self):
        eps = 1e-3
        e = PoseGraphEdge(0, 1, Pose.identity(), np.ones(6))
        t_j = Pose.from_rt(np.eye(3), np.array([eps, 0.0, 0.0]))
        r = edge_residual(e, Pose.identity(), t_j)
        assert np.allclose(r, [eps, 0, 0, 0, 0, 0], atol=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_gauge_invariance(self, seed):
        rng = np.random.default_rng(seed)
        t_i, t_j, gauge = (random_pose(rng) for _ in range(3))
        z = random_pose(rng, rot_scale=0.3)
        e = PoseGraphEdge(0, 1, z, np.ones(6))
        r0 = edge_residual(e, t_i, t_j)
        r1 = edge_residual(e, t_i @ gauge, t_j @ gauge)
        assert np.max(np.abs(r0 - r1)) <= 1e-9


class TestOptimize:
    def _noisy_graph(self, seed, n=16):
        gt, kfs, pairs, init, meas = noisy_pose_loop(n, seed)
        return gt, build_graph(kfs, (1, 2, 4, 8), pairs, init, meas)

    def test_consistent_graph_unchanged(self):
        rng = np.random.default_rng(6)
        poses = [random_pose(rng) for _ in range(5)]
        edges = [(p, p + 1) for p in range(4)] + [(0, 4)]
        meas = consistent_measurements(poses, edges)
        g = build_graph(list(range(5)), (1,), [(0, 4)], poses, meas)
        refined, cost = optimize_pose_graph(g)
        assert cost <= 1e-18
        for a, b in zip(refined, poses):
            assert np.max(np.abs(a.matrix() - b.matrix())) <= 1e-12

    def test_two_vertex_closed_form(self):
        rng = np.random.default_rng(7)
        t0 = random_pose(rng)
        z = random_pose(rng)
        init = [t0, random_pose(rng)]
        g = build_graph([0, 1], (1,), [], init, {(0, 1): z})
        refined, cost = optimize_pose_graph(g)
        assert np.max(np.abs(refined[1].matrix() - (z @ t0).matrix())) <= 1e-10
        assert np.max(np.abs(refined[0].matrix() - t0.matrix())) <= 1e-15

    def test_anchor_never_moves(self):
        gt, g = self._noisy_graph(seed=0)
        refined, _ = optimize_pose_graph(g)
        assert np.array_equal(
            refined[0].matrix(), g.initial_poses[0].matrix()
        )

    def test_cost_never_increases(self):
        for seed in range(3):
            gt, g = self._noisy_graph(seed)
            t0 = np.stack([p.matrix() for p in g.initial_poses])
            initial_cost = _Residuals(g).cost(t0)
            _, final_cost = optimize_pose_graph(g)
            assert final_cost <= initial_cost

    def test_loop_ate_halves(self):
        # Fast 3-seed slice of the 10-seed acceptance fixture.
        for seed in range(3):
            gt, kfs, pairs, init, meas = noisy_pose_loop(40, seed)
            g = build_graph(kfs, (1, 2, 4, 8), pairs, init, meas)
            refined, _ = optimize_pose_graph(g)
            assert center_rmse(refined, gt) <= 0.5 * center_rmse(init, gt)

    def test_gauge_equivariance(self):
        gt, kfs, pairs, init, meas = noisy_pose_loop(12, seed=3)
        g0 = build_graph(kfs, (1, 2, 4, 8), pairs, init, meas)
        out0, _ = optimize_pose_graph(g0)
        rng = np.random.default_rng(9)
        gauge = random_pose(rng)
        shifted = [p @ gauge for p in init]
        g1 = build_graph(kfs, (1, 2, 4, 8), pairs, shifted, meas)
        out1, _ = optimize_pose_graph(g1)
        for a, b in zip(out0, out1):
            assert np.max(np.abs((a @ gauge).matrix() - b.matrix())) <= 1e-6

    def test_weight_doubling_same_argmin(self):
        gt, kfs, pairs, init, meas = noisy_pose_loop(12, seed=4)
        g0 = build_graph(kfs, (1, 2, 4, 8), pairs, init, meas)
        out0, _ = optimize_pose_graph(g0)
        g1 = build_graph(kfs, (1, 2, 4, 8), pairs, init, meas)
        g1.edges = [
            PoseGraphEdge(e.i, e.j, e.z, 2.0 * e.weight) for e in g1.edges
        ]
        out1, _ = optimize_pose_graph(g1)
        for a, b in zip(out0, out1):
            assert np.max(np.abs(a.matrix() - b.matrix())) <= 1e-6


class TestDump:
    def test_line_layout(self):
        rng = np.random.default_rng(8)
        poses = [random_pose(rng) for _ in range(3)]
        meas = consistent_measurements(poses, [(0, 1), (1, 2)])
        g = build_graph([0, 1, 2], (1,), [], poses, meas)
        text = dump_graph(g)
        lines = text.strip().splitlines()
        assert len(lines) == 2
        fields = lines[0].split()
        assert len(fields) == 2 + 12 + 6
        assert fields[0] == "0" and fields[1] == "1"
        m = np.array([float(v) for v in fields[2:14]]).reshape(3, 4)
        ref = (poses[1] @ poses[0].inverse()).matrix()[:3, :]
        assert np.max(np.abs(m - ref)) <= 1e-7
