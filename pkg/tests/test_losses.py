"""Tests for the attack objectives."""
import numpy as np
import pytest

from advmesh import autodiff as ad
from advmesh.geom import Box3D, iou_3d
from advmesh.losses import (
    LossConfig,
    ProposalSet,
    SegmentationOutput,
    loss_epnet,
    loss_fpn_pc,
    loss_objectness_2d,
    total_loss,
)
from advmesh.meshes import laplacian_loss, make_icosphere

GT = Box3D(center=np.zeros(3), dims=np.array([2.0, 2.0, 2.0]), yaw=0.0)
# same footprint, half the height, same center: 3D IoU is exactly 0.5
HALF = Box3D(center=np.zeros(3), dims=np.array([2.0, 2.0, 1.0]), yaw=0.0)


def seg_with(scores, mask=None, box=GT):
    scores = np.asarray(scores, dtype=float)
    if mask is None:
        mask = np.ones(len(scores), dtype=bool)
    return SegmentationOutput(scores=scores, mask=np.asarray(mask), box=box)


def test_half_box_iou_is_half():
    assert iou_3d(GT, HALF) == pytest.approx(0.5, abs=1e-12)


class TestSegmentationLoss:
    def test_fixture_m_half_iou_one(self):
        loss, suppressed = loss_fpn_pc(seg_with([0.2, 0.5, 0.1]), GT)
        assert not suppressed
        assert loss.values == pytest.approx(0.6931, abs=1e-4)

    def test_fixture_m_09_iou_half(self):
        loss, suppressed = loss_fpn_pc(seg_with([0.9, 0.3], box=HALF), GT)
        assert not suppressed
        assert loss.values == pytest.approx(1.1513, abs=1e-4)

    def test_all_scores_near_zero_gives_near_zero(self):
        loss, _ = loss_fpn_pc(seg_with([1e-9, 1e-9]), GT)
        assert loss.values == pytest.approx(0.0, abs=1e-6)

    def test_no_car_points_is_success(self):
        loss, suppressed = loss_fpn_pc(
            seg_with([0.9, 0.9], mask=[False, False]), GT)
        assert suppressed
        assert loss.values == 0.0

    def test_mask_excludes_scores(self):
        # masked-out 0.99 must not drive the max
        loss, _ = loss_fpn_pc(seg_with([0.5, 0.99], mask=[True, False]), GT)
        assert loss.values == pytest.approx(-np.log(0.5), abs=1e-12)

    def test_monotone_in_max_score(self):
        prev = -1.0
        for m in [0.1, 0.3, 0.5, 0.7, 0.9]:
            loss, _ = loss_fpn_pc(seg_with([m]), GT)
            assert loss.values > prev
            prev = loss.values

    def test_gradient_flows_to_max_only(self):
        tape = ad.Tape()
        s = tape.watch("s", ad.Tensor(np.array([0.2, 0.6, 0.4])))
        with ad.active_tape(tape):
            seg = SegmentationOutput(scores=s, mask=np.ones(3, dtype=bool), box=GT)
            loss, _ = loss_fpn_pc(seg, GT)
        grads = ad.backward(tape, loss)
        g = grads["s"].values
        assert g[0] == 0.0 and g[2] == 0.0
        assert g[1] == pytest.approx(1.0 / 0.4, rel=1e-12)

    def test_finite_difference(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            s0 = rng.uniform(0.05, 0.95, size=6)

            def f(params):
                seg = SegmentationOutput(
                    scores=params["s"], mask=np.ones(6, dtype=bool), box=HALF)
                loss, _ = loss_fpn_pc(seg, GT)
                return loss

            report = ad.finite_diff_check(f, {"s": s0})
            assert report["max_rel_err"] < 1e-6


class TestProposalLoss:
    def test_single_proposal_fixture(self):
        props = ProposalSet(scores=np.array([0.5]), boxes=[GT])
        loss, suppressed = loss_epnet(props, GT)
        assert not suppressed
        assert loss.values == pytest.approx(0.6931, abs=1e-4)

    def test_two_proposal_fixture(self):
        props = ProposalSet(scores=np.array([0.5, 0.9]), boxes=[GT, HALF])
        loss, _ = loss_epnet(props, GT)
        assert loss.values == pytest.approx(0.9222, abs=1e-4)

    def test_empty_relevant_set_is_success(self):
        props = ProposalSet(scores=np.array([0.05, 0.1]), boxes=[GT, GT])
        loss, suppressed = loss_epnet(props, GT)
        assert suppressed
        assert loss.values == 0.0

    def test_threshold_excludes_low_scores(self):
        # sub-threshold proposal must not enter the mean
        a = ProposalSet(scores=np.array([0.5, 0.05]), boxes=[GT, GT])
        b = ProposalSet(scores=np.array([0.5]), boxes=[GT])
        la, _ = loss_epnet(a, GT)
        lb, _ = loss_epnet(b, GT)
        assert la.values == pytest.approx(lb.values, abs=1e-15)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        scores = rng.uniform(0.2, 0.9, size=8)
        boxes = [GT if i % 2 == 0 else HALF for i in range(8)]
        base, _ = loss_epnet(ProposalSet(scores=scores, boxes=boxes), GT)
        for _ in range(5):
            perm = rng.permutation(8)
            shuffled = ProposalSet(
                scores=scores[perm], boxes=[boxes[i] for i in perm])
            loss, _ = loss_epnet(shuffled, GT)
            assert loss.values == pytest.approx(base.values, rel=1e-12)

    def test_finite_difference(self):
        rng = np.random.default_rng(11)
        boxes = [GT, HALF, GT, HALF, GT]
        for _ in range(20):
            s0 = rng.uniform(0.15, 0.95, size=5)

            def f(params):
                loss, _ = loss_epnet(
                    ProposalSet(scores=params["s"], boxes=boxes), GT)
                return loss

            report = ad.finite_diff_check(f, {"s": s0})
            assert report["max_rel_err"] < 1e-6


class TestObjectness2D:
    def test_sums_car_only(self):
        dets = [("Car", 0.8), ("Pedestrian", 0.9), ("Car", 0.1)]
        assert loss_objectness_2d(dets).values == pytest.approx(0.9)

    def test_empty(self):
        assert loss_objectness_2d([]).values == 0.0

    def test_tensor_path_gradient(self):
        dets = [("Car", 0.8), ("Cyclist", 0.5), ("Car", 0.1)]
        tape = ad.Tape()
        s = tape.watch("s", ad.Tensor(np.array([0.8, 0.5, 0.1])))
        with ad.active_tape(tape):
            loss = loss_objectness_2d(dets, scores=s)
        assert loss.values == pytest.approx(0.9)
        g = ad.backward(tape, loss)["s"].values
        assert np.array_equal(g, np.array([1.0, 0.0, 1.0]))


class TestTotalLoss:
    def test_adds_weighted_laplacian(self):
        mesh = make_icosphere(0.4, 1)
        rng = np.random.default_rng(5)
        mesh = mesh.with_params(
            displacements=rng.normal(0, 0.02, mesh.displacements.shape))
        lap = laplacian_loss(mesh)
        cfg = LossConfig(lap_weight=0.001)
        total = total_loss(2.0, mesh, cfg)
        assert total.values == pytest.approx(2.0 + 0.001 * lap, rel=1e-12)

    def test_zero_weight_is_base(self):
        mesh = make_icosphere(0.4, 1)
        total = total_loss(1.5, mesh, LossConfig(lap_weight=0.0))
        assert total.values == 1.5

    def test_differentiable_combination(self):
        mesh = make_icosphere(0.4, 1)
        rng = np.random.default_rng(9)
        d0 = rng.normal(0, 0.02, mesh.displacements.shape)
        cfg = LossConfig(lap_weight=0.5)

        def f(params):
            d = params["d"]
            base = ad.sum_(ad.mul(d, d))
            return total_loss(base, mesh, cfg, displacements=d)

        report = ad.finite_diff_check(f, {"d": d0})
        assert report["max_rel_err"] < 1e-6

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            LossConfig(lap_weight=-1.0)
        with pytest.raises(ValueError):
            LossConfig(iou_kind="volumetric")
