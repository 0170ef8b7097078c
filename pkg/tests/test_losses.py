"""Differentiable kernels vs. numpy oracles, loss closed forms, FD gradients."""

import math
import time

import numpy as np
import pytest
import torch

from vidsfm.adam import Adam
from vidsfm.diffgeom import (
    MeshUpsampler,
    bilinear_sample_t,
    mesh_grid_shape,
    pixel_grid_t,
    reproject_t,
    se3_exp_t,
)
from vidsfm.geometry import (
    Intrinsics,
    Pose,
    pixel_grid,
    reproject,
    rigid_flow,
    se3_exp,
    se3_log,
    warp_bilinear,
)
from vidsfm.imageops import area_resize
from vidsfm.losses import (
    LossWeights,
    PairBatch,
    consistency_terms,
    deform_terms,
    flow_terms,
    gradient_terms,
    photometric_terms,
    total_loss,
)
from vidsfm.rasters import normalize_log_prior
from vidsfm.state import (
    FrameState,
    WindowState,
    depth_from_params,
    interpolate_pose,
    load_frame_state,
    save_frame_state,
)
from vidsfm.synth import SceneSpec, generate


def t64(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


@pytest.fixture(scope="module")
def clean_scene(tmp_path_factory):
    """Small scene with uncorrupted priors (prior == ground truth)."""
    d = tmp_path_factory.mktemp("clean_scene")
    return generate(
        SceneSpec(seed=7, n_frames=6, width=96, height=72, prior_scale=1.0), d
    )


class TestTorchGeometry:
    def test_se3_exp_matches_numpy(self, rng):
        scales = np.concatenate(
            [np.full(40, s) for s in (1e-12, 1e-9, 1e-6, 1e-3, 0.3, 1.0)]
        )
        xi = rng.normal(size=(scales.size, 6)) * scales[:, None]
        got = se3_exp_t(t64(xi)).numpy()
        want = np.stack([se3_exp(row).matrix() for row in xi])
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_bilinear_matches_numpy_warp(self, rng):
        src = rng.random((12, 16))
        flow = rng.uniform(-4, 4, size=(12, 16, 2))
        flow[0, 0] = (3.0, 2.0)  # exactly integer target
        flow[5, 15] = (0.0, 0.0)  # far-border identity stays valid
        want, want_valid = warp_bilinear(src, flow)
        xy = pixel_grid(12, 16) + flow
        got, got_valid = bilinear_sample_t(t64(src)[None, None], t64(xy)[None])
        got = got[0, 0].numpy()
        got_valid = got_valid[0].numpy()
        assert np.array_equal(got_valid, want_valid)
        assert np.max(np.abs((got - want)[want_valid])) <= 1e-12

    def test_reproject_matches_numpy(self, rng):
        k = Intrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)
        depth = rng.uniform(2.0, 5.0, size=(12, 16))
        pa = Pose.from_rt(se3_exp(rng.normal(size=6) * 0.1).r, rng.normal(size=3) * 0.2)
        pb = Pose.from_rt(se3_exp(rng.normal(size=6) * 0.1).r, rng.normal(size=3) * 0.2)
        want_xy, want_z, want_valid = reproject(pixel_grid(12, 16), depth, pa, pb, k)
        t_rel = t64((pb @ pa.inverse()).matrix())[None]
        got_xy, got_z, got_front = reproject_t(t64(depth)[None], t_rel, k)
        assert np.max(np.abs(got_xy[0].numpy() - want_xy)) <= 1e-9
        assert np.max(np.abs(got_z[0].numpy() - want_z)) <= 1e-12
        assert np.array_equal(got_front[0].numpy(), want_valid)

    def test_mesh_upsampler_pins_corners_and_is_linear(self, rng):
        up = MeshUpsampler(3, 4, 7, 10)
        m1 = t64(rng.normal(size=(1, 3, 4)))
        m2 = t64(rng.normal(size=(1, 3, 4)))
        f1 = up(m1)
        assert f1.shape == (1, 7, 10)
        assert abs(float(f1[0, 0, 0] - m1[0, 0, 0])) <= 1e-15
        assert abs(float(f1[0, -1, -1] - m1[0, -1, -1])) <= 1e-15
        combo = up(2.5 * m1 + m2) - (2.5 * up(m1) + up(m2))
        assert float(combo.abs().max()) <= 1e-12
        const = up(torch.full((1, 3, 4), 0.7, dtype=torch.float64))
        assert float((const - 0.7).abs().max()) <= 1e-12

    def test_single_vertex_bump_peaks_at_vertex(self):
        up = MeshUpsampler(3, 4, 7, 10)
        mesh = torch.zeros(1, 3, 4, dtype=torch.float64)
        mesh[0, 1, 2] = 1.0
        field = up(mesh)[0]
        # vertex (row 1, col 2) pins to pixel (y=3, x=6) on this grid
        peak = field.flatten().argmax()
        assert (int(peak) // 10, int(peak) % 10) == (3, 6)

    def test_mesh_grid_shape(self):
        assert mesh_grid_shape(72, 96) == (13, 17)
        assert mesh_grid_shape(96, 72) == (17, 13)
        assert mesh_grid_shape(64, 64) == (17, 17)


class TestDepthFromParams:
    def _nrm(self, scene, t):
        return normalize_log_prior(scene.prior_depths[t], scene.masks[t])

    def test_mu_sigma_reproduce_prior(self, clean_scene):
        np_prior = clean_scene.prior_depths[0]
        np_ = self._nrm(clean_scene, 0)
        up = MeshUpsampler(2, 2, *np_prior.shape)
        d = depth_from_params(
            t64([np_.mu]),
            t64([np_.sigma]),
            t64(np_.n)[None],
            torch.zeros(1, 2, 2, dtype=torch.float64),
            up,
        )
        rel = np.abs(d[0].numpy() / np_prior - 1.0)
        assert rel.max() <= 1e-12

    def test_unit_params_power_form(self, clean_scene):
        prior = clean_scene.prior_depths[1]
        np_ = self._nrm(clean_scene, 1)
        up = MeshUpsampler(2, 2, *prior.shape)
        d = depth_from_params(
            t64([0.0]),
            t64([1.0]),
            t64(np_.n)[None],
            torch.zeros(1, 2, 2, dtype=torch.float64),
            up,
        )
        gmean = math.exp(np_.mu)
        want = (prior / gmean) ** (1.0 / np_.sigma)
        assert np.max(np.abs(d[0].numpy() / want - 1.0)) <= 1e-12

    def test_constant_depth(self):
        up = MeshUpsampler(2, 2, 5, 5)
        nrm = t64(np.random.default_rng(0).normal(size=(1, 5, 5)))
        d = depth_from_params(
            t64([math.log(2.0)]),
            t64([0.0]),
            nrm,
            torch.zeros(1, 2, 2, dtype=torch.float64),
            up,
        )
        assert float((d - 2.0).abs().max()) <= 1e-14


def _gt_pair(scene, a, b):
    """Tensors for one ground-truth pair at full resolution."""
    k = scene.intrinsics
    depth_a = t64(scene.gt_depths[a])[None]
    t_rel = t64(
        (scene.gt_poses[b] @ scene.gt_poses[a].inverse()).matrix()
    )[None]
    img_a = t64(scene.images[a])[None]
    img_b = t64(scene.images[b])[None]
    mask_a = torch.ones_like(img_a, dtype=torch.bool)
    return k, img_a, img_b, depth_a, t_rel, mask_a


class TestPhotometric:
    def test_identical_frames_zero(self, rng):
        img = t64(rng.random((10, 14)))[None]
        depth = t64(rng.uniform(1.0, 3.0, size=(10, 14)))[None]
        k = Intrinsics(14.0, 14.0, 6.5, 4.5, 14, 10)
        eye = torch.eye(4, dtype=torch.float64)[None]
        mask = torch.ones(1, 10, 14, dtype=torch.bool)
        loss, n = photometric_terms(img, img, depth, eye, k, mask)
        assert float(loss[0]) <= 1e-12
        # identity round-trip can push border pixels an ulp out of bounds
        assert 12 * 8 <= int(n[0]) <= 140

    def test_ground_truth_pair_bound(self, clean_scene):
        k, img_a, img_b, depth_a, t_rel, mask_a = _gt_pair(clean_scene, 0, 1)
        loss, n = photometric_terms(img_a, img_b, depth_a, t_rel, k, mask_a)
        assert float(loss[0]) <= 5e-3
        assert int(n[0]) > 0.5 * 96 * 72

    def test_translation_perturbation_increases_loss(self, clean_scene):
        k, img_a, img_b, depth_a, t_rel, mask_a = _gt_pair(clean_scene, 0, 1)
        base, _ = photometric_terms(img_a, img_b, depth_a, t_rel, k, mask_a)
        bumped = t_rel.clone()
        bumped[0, 0, 3] += 0.05 * float(depth_a.mean())
        worse, _ = photometric_terms(img_a, img_b, depth_a, bumped, k, mask_a)
        assert float(worse[0]) > float(base[0])

    def test_empty_mask_gives_zero(self, clean_scene):
        k, img_a, img_b, depth_a, t_rel, _ = _gt_pair(clean_scene, 0, 1)
        mask = torch.zeros_like(img_a, dtype=torch.bool)
        loss, n = photometric_terms(img_a, img_b, depth_a, t_rel, k, mask)
        assert float(loss[0]) == 0.0
        assert int(n[0]) == 0


class TestFlowTerms:
    def test_equal_flows_zero(self, rng):
        f = t64(rng.normal(size=(1, 8, 9, 2)))
        loss, n = flow_terms(f, f.clone(), torch.ones(1, 8, 9, dtype=torch.bool))
        assert float(loss[0]) == 0.0
        assert int(n[0]) == 72

    def test_unit_x_offset_gives_one(self):
        a = torch.zeros(1, 8, 9, 2, dtype=torch.float64)
        b = a.clone()
        b[..., 0] += 1.0
        loss, _ = flow_terms(a, b, torch.ones(1, 8, 9, dtype=torch.bool))
        assert float(loss[0]) == pytest.approx(1.0, abs=1e-15)

    def test_excluded_pixels_do_not_count(self):
        a = torch.zeros(1, 8, 9, 2, dtype=torch.float64)
        b = a.clone()
        valid = torch.ones(1, 8, 9, dtype=torch.bool)
        b[0, :4, :, 0] = 2.0
        valid[0, :4, :] = False
        loss, n = flow_terms(a, b, valid)
        assert float(loss[0]) == 0.0
        assert int(n[0]) == 36


class TestConsistencyTerms:
    def test_double_scale_identity_pose(self, rng):
        d = t64(rng.uniform(1.0, 4.0, size=(1, 10, 12)))
        k = Intrinsics(12.0, 12.0, 5.5, 4.5, 12, 10)
        eye = torch.eye(4, dtype=torch.float64)[None]
        loss, n = consistency_terms(d, 2.0 * d, eye, k)
        assert float(loss[0]) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert 10 * 8 <= int(n[0]) <= 120

    def test_same_depth_zero(self, rng):
        d = t64(rng.uniform(1.0, 4.0, size=(1, 10, 12)))
        k = Intrinsics(12.0, 12.0, 5.5, 4.5, 12, 10)
        eye = torch.eye(4, dtype=torch.float64)[None]
        loss, _ = consistency_terms(d, d.clone(), eye, k)
        assert float(loss[0]) <= 1e-12

    def test_ground_truth_pair_bound(self, clean_scene):
        k, _, _, depth_a, t_rel, _ = _gt_pair(clean_scene, 1, 2)
        depth_b = t64(clean_scene.gt_depths[2])[None]
        loss, n = consistency_terms(depth_a, depth_b, t_rel, k)
        assert float(loss[0]) <= 1e-3
        assert int(n[0]) > 0

    def test_all_behind_camera_empty(self, rng):
        d = t64(rng.uniform(1.0, 2.0, size=(1, 6, 6)))
        k = Intrinsics(6.0, 6.0, 2.5, 2.5, 6, 6)
        t_rel = torch.eye(4, dtype=torch.float64)[None].clone()
        t_rel[0, 2, 3] = -10.0
        loss, n = consistency_terms(d, d.clone(), t_rel, k)
        assert float(loss[0]) == 0.0
        assert int(n[0]) == 0


class TestGradientLoss:
    def test_orthogonal_ramps_give_three(self):
        ys, xs = np.mgrid[0:24, 0:20].astype(np.float64)
        d = t64(1.0 + 0.1 * xs)[None]
        p = t64(1.0 + 0.1 * ys)[None]
        loss = gradient_terms(d, p)
        assert float(loss[0]) == pytest.approx(3.0, abs=1e-13)

    def test_scaled_prior_is_zero(self, rng):
        base = np.exp(
            0.3 * np.cos(np.linspace(0, 4, 24))[:, None]
            + 0.2 * np.sin(np.linspace(0, 5, 20))[None, :]
        )
        for c in (0.37, 2.0, 64.0):
            loss = gradient_terms(t64(c * base)[None], t64(base)[None])
            assert float(loss[0]) <= 1e-20

    def test_constant_prior_skips_everything(self, rng):
        d = t64(rng.uniform(1.0, 3.0, size=(1, 16, 16)))
        p = torch.full((1, 16, 16), 2.0, dtype=torch.float64)
        assert float(gradient_terms(d, p)[0]) == 0.0

    def test_derivative_wrt_global_offset_is_zero(self, clean_scene):
        prior = clean_scene.prior_depths[0]
        np_ = normalize_log_prior(prior, clean_scene.masks[0])
        up = MeshUpsampler(3, 4, *prior.shape)
        a = torch.tensor([np_.mu + 0.07], dtype=torch.float64, requires_grad=True)
        mesh = torch.zeros(1, 3, 4, dtype=torch.float64)
        mesh[0, 1, 1] = 0.05
        d = depth_from_params(a, t64([np_.sigma * 0.9]), t64(np_.n)[None], mesh, up)
        loss = gradient_terms(d, t64(prior)[None]).sum()
        loss.backward()
        assert float(a.grad.abs().max()) <= 1e-12


class TestDeform:
    def test_constant_mesh_zero(self):
        m = torch.full((1, 4, 5), 1.3, dtype=torch.float64)
        sv = torch.ones(1, 4, 5, dtype=torch.bool)
        assert float(deform_terms(m, sv, 4.0)[0]) == 0.0

    def test_checkerboard_static(self):
        h = 0.25
        ys, xs = np.mgrid[0:4, 0:5]
        m = t64(h * (-1.0) ** (ys + xs))[None]
        sv = torch.ones(1, 4, 5, dtype=torch.bool)
        loss = deform_terms(m, sv, 4.0)
        assert float(loss[0]) == pytest.approx((2 * h) ** 2, abs=1e-14)

    def test_doubling_wdyn_doubles_dynamic_contribution(self):
        # only pairs touching dynamic vertices have nonzero differences
        m = torch.zeros(1, 3, 3, dtype=torch.float64)
        m[0, 0, 0] = 1.0
        sv = torch.ones(1, 3, 3, dtype=torch.bool)
        sv[0, 0, 0] = False
        l4 = float(deform_terms(m, sv, 4.0)[0])
        l8 = float(deform_terms(m, sv, 8.0)[0])
        assert l8 == pytest.approx(2.0 * l4, rel=1e-12)

    def test_manual_enumeration(self):
        m = t64(np.array([[0.0, 1.0, 3.0], [2.0, 2.0, 0.0]]))[None]
        sv = torch.tensor([[[True, True, False], [True, True, True]]])
        w = 4.0
        pairs = [
            ((0, 0), (0, 1)),
            ((0, 1), (0, 2)),
            ((1, 0), (1, 1)),
            ((1, 1), (1, 2)),
            ((0, 0), (1, 0)),
            ((0, 1), (1, 1)),
            ((0, 2), (1, 2)),
        ]
        want = 0.0
        for u, v in pairs:
            weight = 1.0 if (sv[0][u] and sv[0][v]) else w
            want += weight * float(m[0][u] - m[0][v]) ** 2
        want /= len(pairs)
        assert float(deform_terms(m, sv, w)[0]) == pytest.approx(want, rel=1e-12)


def _perfect_batch(scene, a, b):
    """PairBatch + frame tensors for the exact synthetic state of (a, b)."""
    h, w = scene.images[a].shape
    images = t64(np.stack([scene.images[a], scene.images[b]]))
    masks = torch.ones(2, h, w, dtype=torch.bool)
    priors = t64(np.stack([scene.prior_depths[a], scene.prior_depths[b]]))
    depths = t64(np.stack([scene.gt_depths[a], scene.gt_depths[b]]))
    poses = t64(np.stack([scene.gt_poses[a].matrix(), scene.gt_poses[b].matrix()]))
    gh, gw = 3, 4
    meshes = torch.zeros(2, gh, gw, dtype=torch.float64)
    static_vertex = torch.ones(2, gh, gw, dtype=torch.bool)
    flow_ab = scene.flow_fwd[a] if b == a + 1 else scene.flow_bwd[a]
    flow_ba = scene.flow_bwd[b] if b == a + 1 else scene.flow_fwd[b]
    batch = PairBatch(
        ref=torch.tensor([0, 1]),
        src=torch.tensor([1, 0]),
        weight=torch.ones(2, dtype=torch.float64),
        adjacent=torch.ones(2, dtype=torch.bool),
        flow_prior=t64(np.stack([flow_ab, flow_ba])),
        fb_valid=torch.ones(2, h, w, dtype=torch.bool),
    )
    return images, masks, priors, static_vertex, depths, poses, meshes, batch


class TestTotalLoss:
    def test_perfect_state_small(self, clean_scene):
        tensors = _perfect_batch(clean_scene, 2, 3)
        total, breakdown, diag = total_loss(
            *tensors, clean_scene.intrinsics, LossWeights()
        )
        assert float(total) <= 1e-2
        assert float(breakdown["grad"]) <= 1e-18
        assert float(breakdown["deform"]) == 0.0
        assert diag["photo_empty"] == 0 and diag["flow_empty"] == 0

    def test_breakdown_sums_to_total(self, clean_scene):
        tensors = _perfect_batch(clean_scene, 0, 1)
        total, breakdown, _ = total_loss(
            *tensors, clean_scene.intrinsics, LossWeights()
        )
        assert float(sum(breakdown.values()) - total) == pytest.approx(0.0, abs=1e-12)

    def test_zero_weights_zero_total(self, clean_scene):
        tensors = _perfect_batch(clean_scene, 0, 1)
        zero = LossWeights(photo=0.0, flow=0.0, const=0.0, grad=0.0, deform=0.0)
        total, _, _ = total_loss(*tensors, clean_scene.intrinsics, zero)
        assert float(total) == 0.0

    def test_matches_standalone_terms(self, clean_scene):
        images, masks, priors, sv, depths, poses, meshes, batch = _perfect_batch(
            clean_scene, 1, 2
        )
        k = clean_scene.intrinsics
        weights = LossWeights()
        total, _, _ = total_loss(
            images, masks, priors, sv, depths, poses, meshes, batch, k, weights
        )
        manual = torch.zeros((), dtype=torch.float64)
        grid = pixel_grid_t(images.shape[1], images.shape[2])
        for r in range(2):
            i, j = int(batch.ref[r]), int(batch.src[r])
            t_rel = (poses[j] @ torch.linalg.inv(poses[i]))[None]
            ph, _ = photometric_terms(
                images[i][None], images[j][None], depths[i][None], t_rel, k,
                masks[i][None],
            )
            xy, _, in_front = reproject_t(depths[i][None], t_rel, k)
            _, in_b = bilinear_sample_t(images[j][None, None], xy)
            fl, _ = flow_terms(
                xy - grid,
                batch.flow_prior[r][None],
                in_front & in_b & batch.fb_valid[r][None],
            )
            co, _ = consistency_terms(depths[i][None], depths[j][None], t_rel, k)
            manual = manual + batch.weight[r] * (
                weights.photo * ph[0] + weights.flow * fl[0] + weights.const * co[0]
            )
        manual = manual + weights.grad * gradient_terms(depths, priors).sum()
        manual = manual + weights.deform * deform_terms(meshes, sv, weights.w_dyn).sum()
        assert float((manual - total).abs()) <= 1e-12

    def test_empty_masks_flagged(self, clean_scene):
        images, _, priors, sv, depths, poses, meshes, batch = _perfect_batch(
            clean_scene, 0, 1
        )
        masks = torch.zeros_like(images, dtype=torch.bool)
        total, breakdown, diag = total_loss(
            images, masks, priors, sv, depths, poses, meshes, batch,
            clean_scene.intrinsics, LossWeights(),
        )
        assert diag["photo_empty"] == 2
        assert float(breakdown["photo"]) == 0.0
        assert torch.isfinite(total)


class TestWindowState:
    def _states(self, rng, gh=3, gw=4):
        out = []
        for _ in range(2):
            out.append(
                FrameState(
                    a=float(rng.normal(1.2, 0.1)),
                    b=float(abs(rng.normal(0.2, 0.05)) + 0.05),
                    mesh=rng.normal(0, 0.05, size=(gh, gw)),
                    pose=se3_exp(rng.normal(size=6) * 0.1),
                )
            )
        return out

    def test_export_roundtrip(self, rng):
        states = self._states(rng)
        nrm = t64(rng.normal(size=(2, 10, 12)))
        ws = WindowState(
            [0, 1], states, nrm, MeshUpsampler(3, 4, 10, 12),
            [True, True], [True, True], pose_scale=3.7, mesh_gain=5.0,
        )
        back = ws.export()
        for orig, got in zip(states, back):
            assert got.a == pytest.approx(orig.a, abs=1e-15)
            assert np.max(np.abs(got.mesh - orig.mesh)) <= 1e-12
            assert np.max(np.abs(got.pose.matrix() - orig.pose.matrix())) <= 1e-12

    def test_depths_use_effective_mesh(self, rng):
        states = self._states(rng)
        nrm = t64(rng.normal(size=(2, 10, 12)))
        up = MeshUpsampler(3, 4, 10, 12)
        ws = WindowState(
            [0, 1], states, nrm, up, [True, True], [True, True],
            pose_scale=1.0, mesh_gain=5.0,
        )
        want = depth_from_params(
            t64([s.a for s in states]),
            t64([s.b for s in states]),
            nrm,
            t64(np.stack([s.mesh for s in states])),
            up,
        )
        assert float((ws.depths().detach() / want - 1.0).abs().max()) <= 1e-12

    def test_frozen_rows_get_zero_grads(self, rng):
        states = self._states(rng)
        nrm = t64(rng.normal(size=(2, 10, 12)))
        ws = WindowState(
            [0, 1], states, nrm, MeshUpsampler(3, 4, 10, 12),
            pose_free=[False, True], depth_free=[True, False],
        )
        loss = ws.depths().sum() + (ws.poses() ** 2).sum()
        loss.backward()
        ws.mask_frozen_grads()
        assert float(ws.xi.grad[0].abs().max()) == 0.0
        assert float(ws.xi.grad[1].abs().max()) > 0.0
        assert float(ws.a.grad[1].abs().max()) == 0.0
        assert float(ws.a.grad[0].abs().max()) > 0.0
        assert float(ws.mesh.grad[1].abs().max()) == 0.0

    def test_checkpoint_roundtrip(self, rng, tmp_path):
        state = FrameState(
            a=1.234567,
            b=0.23456,
            mesh=rng.normal(0, 0.1, size=(3, 4)),
            pose=se3_exp(rng.normal(size=6) * 0.2),
        )
        save_frame_state(tmp_path, 17, state)
        back = load_frame_state(tmp_path, 17, 3, 4)
        assert back.a == pytest.approx(state.a, rel=1e-6)
        assert np.allclose(back.mesh, state.mesh, atol=1e-6)
        err = se3_log(back.pose @ state.pose.inverse())
        assert np.max(np.abs(err)) <= 1e-6

    def test_interpolate_pose_endpoints_and_midpoint(self, rng):
        p0 = se3_exp(rng.normal(size=6) * 0.3)
        p1 = se3_exp(rng.normal(size=6) * 0.3)
        assert np.max(np.abs(interpolate_pose(p0, p1, 0.0).matrix() - p0.matrix())) <= 1e-12
        assert np.max(np.abs(interpolate_pose(p0, p1, 1.0).matrix() - p1.matrix())) <= 1e-9
        mid = interpolate_pose(p0, p1, 0.5)
        d0 = np.linalg.norm(se3_log(mid @ p0.inverse()))
        d1 = np.linalg.norm(se3_log(p1 @ mid.inverse()))
        assert d0 == pytest.approx(d1, rel=1e-9)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64, requires_grad=True)
        before = p.detach().clone()
        p.grad = torch.zeros_like(p)
        Adam([p], lr=0.1).step()
        assert torch.equal(p.detach(), before)

    def test_first_step_magnitude(self):
        p = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        p.grad = torch.tensor([0.3, -0.02, 5.0], dtype=torch.float64)
        lr = 1e-3
        Adam([p], lr=lr).step()
        want = -lr * torch.sign(p.grad)
        assert float((p.detach() - want).abs().max()) <= 1e-6 * lr

    def test_bitwise_determinism(self):
        def run():
            p = torch.tensor([0.5, -0.5], dtype=torch.float64, requires_grad=True)
            opt = Adam([p], lr=0.01)
            for _ in range(50):
                opt.zero_grad()
                loss = ((p - torch.tensor([2.0, -1.0])) ** 2).sum() + p.prod()
                loss.backward()
                opt.step()
            return p.detach().clone()

        assert torch.equal(run(), run())


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def _smooth_field(rng, h, w, lo, hi):
    u = np.arange(w, dtype=np.float64)[None, :] / w
    v = np.arange(h, dtype=np.float64)[:, None] / h
    f = np.zeros((h, w))
    for _ in range(3):
        f += rng.uniform(0.3, 1.0) * np.cos(
            2 * math.pi * (rng.uniform(0.3, 1.4) * u + rng.uniform(0.3, 1.4) * v)
            + rng.uniform(0, 2 * math.pi)
        )
    f = (f - f.min()) / max(f.max() - f.min(), 1e-9)
    return lo + (hi - lo) * f


def _make_instance(seed):
    rng = np.random.default_rng(seed)
    h, w, gh, gw = 12, 16, 3, 4
    k = Intrinsics(18.0, 18.0, 7.5, 5.5, 16, 12)
    images = np.stack([_smooth_field(rng, h, w, 0.1, 0.9) for _ in range(2)])
    priors = np.exp(
        np.stack([_smooth_field(rng, h, w, math.log(2.5), math.log(4.0)) for _ in range(2)])
    )
    masks = np.ones((2, h, w), dtype=bool)
    y0, x0 = rng.integers(0, h - 3), rng.integers(0, w - 4)
    masks[0, y0 : y0 + 3, x0 : x0 + 4] = False

    states, nrms = [], []
    for t in range(2):
        np_ = normalize_log_prior(priors[t], masks[t])
        nrms.append(np_.n)
        states.append(
            FrameState(
                a=np_.mu + rng.normal() * 0.05,
                b=np_.sigma * (1 + rng.normal() * 0.05),
                mesh=rng.normal(0, 0.03, size=(gh, gw)),
                pose=(
                    se3_exp(np.concatenate([rng.normal(size=3) * 0.05,
                                            rng.normal(size=3) * 0.01]))
                    if t else Pose.identity()
                ),
            )
        )
    ws = WindowState(
        [0, 1], states, t64(np.stack(nrms)), MeshUpsampler(gh, gw, h, w),
        [True, True], [True, True], pose_scale=3.1, mesh_gain=5.0,
    )
    with torch.no_grad():
        ws.xi.copy_(t64(rng.normal(size=(2, 6)) * 0.01))

    flow01, _ = rigid_flow(priors[0], states[0].pose, states[1].pose, k)
    flow10, _ = rigid_flow(priors[1], states[1].pose, states[0].pose, k)
    flows = np.stack([flow01, flow10]) + rng.normal(0, 0.05, size=(2, h, w, 2))
    fb = rng.random((2, h, w)) < 0.85
    batch = PairBatch(
        ref=torch.tensor([0, 1]),
        src=torch.tensor([1, 0]),
        weight=t64([0.7, 0.7]),
        adjacent=torch.ones(2, dtype=torch.bool),
        flow_prior=t64(flows),
        fb_valid=torch.as_tensor(fb),
    )
    static_vertex = torch.as_tensor(
        np.stack([area_resize(m.astype(np.float64), gh, gw) >= 0.5 for m in masks])
    )
    frames = (
        t64(images),
        torch.as_tensor(masks),
        t64(priors),
        static_vertex,
    )
    return ws, frames, batch, k


def _eval_total(ws, frames, batch, k):
    images, masks, priors, sv = frames
    return total_loss(
        images, masks, priors, sv, ws.depths(), ws.poses(), ws.effective_meshes(),
        batch, k, LossWeights(),
    )[0]


def _signature(ws, frames, batch, k):
    """Discrete structure of the loss: cells, validity, L1 signs, skip masks.

    The loss is piecewise smooth; finite differences are only trusted when
    none of these discrete selectors change across the probe interval.
    """
    import torch.nn.functional as tf

    images, masks, priors, sv = frames
    sig = []
    with torch.no_grad():
        depths = ws.depths()
        poses = ws.poses()
        w_img = images.shape[2]
        h_img = images.shape[1]
        grid = pixel_grid_t(h_img, w_img)
        t_rel = poses.index_select(0, batch.src) @ torch.linalg.inv(
            poses.index_select(0, batch.ref)
        )
        xy, z, in_front = reproject_t(depths.index_select(0, batch.ref), t_rel, k)
        x0 = torch.clamp(torch.floor(xy[..., 0]), 0, w_img - 2)
        y0 = torch.clamp(torch.floor(xy[..., 1]), 0, h_img - 2)
        warped_img, in_b = bilinear_sample_t(
            images.index_select(0, batch.src).unsqueeze(1), xy
        )
        warped_img = warped_img.squeeze(1)
        warped_depth, _ = bilinear_sample_t(
            depths.index_select(0, batch.src).unsqueeze(1), xy
        )
        warped_depth = warped_depth.squeeze(1)
        proj = in_front & in_b
        valid_p = proj & masks.index_select(0, batch.ref)
        sig += [x0.numpy(), y0.numpy(), proj.numpy(), valid_p.numpy()]
        sig.append(
            np.sign((warped_img - images.index_select(0, batch.ref)).numpy())
            * valid_p.numpy()
        )
        flow_resid = (xy - grid) - batch.flow_prior
        valid_f = (proj & batch.fb_valid).numpy()
        sig.append(np.sign(flow_resid.numpy()) * valid_f[..., None])
        sig.append(np.sign((z - warped_depth).numpy()) * proj.numpy())
        d, p = depths, priors
        for s in range(3):
            if s > 0:
                d = tf.avg_pool2d(d.unsqueeze(1), 2, 2).squeeze(1)
                p = tf.avg_pool2d(p.unsqueeze(1), 2, 2).squeeze(1)
            if d.shape[1] < 2 or d.shape[2] < 2:
                break
            gx = d[:, :-1, 1:] - d[:, :-1, :-1]
            gy = d[:, 1:, :-1] - d[:, :-1, :-1]
            px = p[:, :-1, 1:] - p[:, :-1, :-1]
            py = p[:, 1:, :-1] - p[:, :-1, :-1]
            keep = ((gx**2 + gy**2) >= 1e-16) & ((px**2 + py**2) >= 1e-16)
            sig.append(keep.numpy())
    return sig


def _same_signature(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestGradientOracle:
    def test_finite_difference_agreement(self):
        start = time.monotonic()
        h_fd = 1e-5
        tested = skipped = 0
        worst = 0.0
        for seed in range(20):
            ws, frames, batch, k = _make_instance(1000 + seed)
            total = _eval_total(ws, frames, batch, k)
            total.backward()
            grads = {
                "a": ws.a.grad.clone(),
                "b": ws.b.grad.clone(),
                "mesh": ws.mesh.grad.clone(),
                "xi": ws.xi.grad.clone(),
            }
            rng = np.random.default_rng(seed)
            entries = [("a", (i,)) for i in range(2)]
            entries += [("b", (i,)) for i in range(2)]
            entries += [("xi", (i, j)) for i in range(2) for j in range(6)]
            mesh_picks = rng.choice(24, size=6, replace=False)
            entries += [("mesh", (int(p) // 12, (int(p) % 12) // 4, int(p) % 4))
                        for p in mesh_picks]
            params = {"a": ws.a, "b": ws.b, "mesh": ws.mesh, "xi": ws.xi}
            inst_tested = 0
            for name, idx in entries:
                p = params[name]
                orig = float(p.data[idx])
                probes = {}
                sigs = {}
                for sgn in (+1, -1):
                    with torch.no_grad():
                        p.data[idx] = orig + sgn * h_fd
                    probes[sgn] = float(_eval_total(ws, frames, batch, k).detach())
                    sigs[sgn] = _signature(ws, frames, batch, k)
                with torch.no_grad():
                    p.data[idx] = orig
                if not _same_signature(sigs[+1], sigs[-1]):
                    skipped += 1
                    continue
                fd = (probes[+1] - probes[-1]) / (2 * h_fd)
                ag = float(grads[name][idx])
                denom = max(abs(fd), abs(ag))
                if denom < 1e-8:
                    tested += 1
                    inst_tested += 1
                    continue
                rel = abs(fd - ag) / denom
                worst = max(worst, rel)
                assert rel <= 1e-3, (
                    f"seed {seed} {name}{idx}: fd={fd:.6e} ag={ag:.6e} rel={rel:.2e}"
                )
                tested += 1
                inst_tested += 1
            assert inst_tested >= 10, f"seed {seed}: only {inst_tested} generic entries"
        elapsed = time.monotonic() - start
        assert tested >= 250
        assert elapsed < 30.0, f"oracle took {elapsed:.1f}s"

    def test_zero_loss_state_has_zero_smooth_gradient(self, clean_scene):
        # identical frames at identity relative pose: photometric/const terms
        # sit at an exact stationary point
        img = t64(clean_scene.images[0])[None]
        depth = t64(clean_scene.gt_depths[0])[None].requires_grad_(True)
        k = clean_scene.intrinsics
        eye = torch.eye(4, dtype=torch.float64)[None]
        mask = torch.ones_like(img, dtype=torch.bool)
        loss, _ = photometric_terms(img, img.clone(), depth, eye, k, mask)
        loss[0].backward()
        assert float(depth.grad.abs().max()) <= 1e-10
