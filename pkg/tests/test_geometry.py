import numpy as np
import pytest
import torch

from relightlab.config import EstimatorConfig
from relightlab.geometry import (
    EstimatorTrainingError,
    GeometryEstimator,
    GeometryMaps,
    estimate,
    load_estimator,
    mean_normal_angle_deg,
    physics_loss,
    save_estimator,
    train_estimator,
)


def random_maps(seed=0, frames=2, h=8, w=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    depth = torch.rand(frames, h, w, generator=g, dtype=dtype) + 0.5
    normals = torch.randn(frames, h, w, 3, generator=g, dtype=dtype)
    normals = normals / normals.norm(dim=-1, keepdim=True)
    return GeometryMaps(depth=depth, normals=normals)


def center_mask(frames=2, h=8, w=8):
    mask = np.zeros((frames, h, w), dtype=np.uint8)
    mask[:, 2:6, 2:6] = 1
    return mask


class TestPhysicsLoss:
    def test_zero_iff_equal_on_mask(self):
        ref = random_maps(0)
        mask = center_mask()
        fb = physics_loss(ref, ref, mask)
        assert float(fb.value) == 0.0

    def test_depth_doubling_gives_unit_depth_term(self):
        ref = random_maps(1)
        pred = GeometryMaps(depth=2.0 * ref.depth, normals=ref.normals.clone())
        mask = center_mask()
        fb = physics_loss(pred, ref, mask)
        assert float(fb.value) == pytest.approx(1.0, rel=1e-6)  # |2D - D| / |D| = 1 per frame

    def test_invariant_to_values_outside_mask(self):
        ref = random_maps(2)
        pred = random_maps(3)
        mask = center_mask()
        base = physics_loss(pred, ref, mask).value
        outside = ~torch.as_tensor(mask).bool()
        tampered = GeometryMaps(depth=pred.depth.clone(), normals=pred.normals.clone())
        tampered.depth[outside] += 100.0
        tampered.normals[outside] *= -3.0
        assert torch.equal(physics_loss(tampered, ref, mask).value, base)

    def test_mask_locality_of_gradient(self):
        ref = random_maps(4)
        mask = center_mask()
        depth = ref.depth.clone() + 0.3
        depth.requires_grad_(True)
        normals = ref.normals.clone() * 1.1
        normals.requires_grad_(True)
        fb = physics_loss(GeometryMaps(depth=depth, normals=normals), ref, mask)
        fb.value.backward()
        outside = ~torch.as_tensor(mask).bool()
        assert torch.all(depth.grad[outside] == 0.0)
        assert torch.all(normals.grad[outside] == 0.0)

    def test_depth_scale_invariance(self):
        ref = random_maps(5)
        pred = random_maps(6)
        mask = center_mask()
        base = physics_loss(pred, ref, mask, use_normal=False).value
        scaled = physics_loss(
            GeometryMaps(depth=3.0 * pred.depth, normals=pred.normals),
            GeometryMaps(depth=3.0 * ref.depth, normals=ref.normals),
            mask,
            use_normal=False,
        ).value
        assert torch.allclose(base, scaled, rtol=1e-9)

    def test_empty_frames_skipped_with_counter(self):
        ref = random_maps(7)
        pred = random_maps(8)
        mask = center_mask()
        mask[1] = 0
        fb = physics_loss(pred, ref, mask)
        assert fb.skipped_frames == 1 and not fb.all_empty
        all_empty = physics_loss(pred, ref, np.zeros_like(mask))
        assert all_empty.all_empty and float(all_empty.value) == 0.0

    def test_normals_renormalized_before_loss(self):
        ref = random_maps(9)
        pred = GeometryMaps(depth=ref.depth.clone(), normals=5.0 * ref.normals)
        fb = physics_loss(pred, ref, center_mask())
        assert float(fb.value) < 1e-6  # same directions, different lengths

    def test_term_switches(self):
        ref = random_maps(10)
        pred = GeometryMaps(depth=2.0 * ref.depth, normals=ref.normals.clone())
        mask = center_mask()
        depth_only = physics_loss(pred, ref, mask, use_normal=False).value
        normal_only = physics_loss(pred, ref, mask, use_depth=False).value
        assert float(depth_only) == pytest.approx(1.0, rel=1e-6)
        assert float(normal_only) == 0.0

    def test_global_scope_matches_single_frame(self):
        ref = random_maps(11, frames=1)
        pred = random_maps(12, frames=1)
        mask = center_mask(frames=1)
        a = physics_loss(pred, ref, mask, norm_scope="per_frame").value
        b = physics_loss(pred, ref, mask, norm_scope="global").value
        assert torch.allclose(a, b, rtol=1e-9)


class TestEstimate:
    def test_output_shapes_and_determinism(self):
        est = GeometryEstimator(channels=8)
        video = np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32)
        maps_a = estimate(est, video)
        maps_b = estimate(est, video)
        assert maps_a.depth.shape == (3, 16, 16)
        assert maps_a.normals.shape == (3, 16, 16, 3)
        assert torch.equal(maps_a.depth, maps_b.depth)
        assert torch.equal(maps_a.normals, maps_b.normals)

    def test_gradient_wrt_input_matches_finite_differences(self):
        torch.manual_seed(0)
        est = GeometryEstimator(channels=4).double()
        g = torch.Generator().manual_seed(1)
        video = torch.rand(1, 8, 8, 3, generator=g, dtype=torch.float64, requires_grad=True)
        out = estimate(est, video)
        scalar = out.depth.sum() + out.normals.mul(0.3).sum()
        scalar.backward()
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(5):
            direction = torch.as_tensor(rng.standard_normal(video.shape))
            direction /= direction.norm()
            with torch.no_grad():
                plus = estimate(est, video + eps * direction)
                minus = estimate(est, video - eps * direction)
                fd = float(
                    (plus.depth.sum() + plus.normals.mul(0.3).sum()
                     - minus.depth.sum() - minus.normals.mul(0.3).sum()) / (2 * eps)
                )
            analytic = float((video.grad * direction).sum())
            assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestTraining:
    def test_trained_beats_untrained(self, tiny_records):
        cfg = EstimatorConfig(iterations=120, channels=8, enforce_thresholds=False, seed=0)
        trained, report = train_estimator(tiny_records, cfg)
        untrained = GeometryEstimator(channels=8)
        rec = tiny_records[0]
        ref = GeometryMaps.from_numpy(rec.depth, rec.normals)
        def err(model):
            with torch.no_grad():
                maps = estimate(model, rec.tuple.v_real)
            return float(physics_loss(maps, ref, rec.tuple.mask).value)
        assert err(trained) < 0.5 * err(untrained)

    def test_frozen_after_training(self, quick_estimator):
        assert quick_estimator.frozen
        assert all(not p.requires_grad for p in quick_estimator.parameters())

    def test_threshold_enforcement_raises_with_curve(self, tiny_records):
        cfg = EstimatorConfig(iterations=5, channels=4, enforce_thresholds=True, seed=0)
        with pytest.raises(EstimatorTrainingError) as excinfo:
            train_estimator(tiny_records, cfg)
        assert len(excinfo.value.loss_curve) == 5

    def test_checkpoint_round_trip(self, quick_estimator, tiny_records, tmp_path):
        from relightlab.geometry import EstimatorReport

        report = EstimatorReport(0.1, 10.0, [1.0])
        save_estimator(tmp_path / "est", quick_estimator, EstimatorConfig(channels=8), report)
        loaded, meta = load_estimator(tmp_path / "est")
        assert loaded.frozen
        video = tiny_records[0].tuple.v_real
        with torch.no_grad():
            a = estimate(quick_estimator, video)
            b = estimate(loaded, video)
        assert torch.equal(a.depth, b.depth)
        assert torch.equal(a.normals, b.normals)
        assert meta["val_rel_depth_error"] == 0.1

    def test_lighting_invariance_pairs(self, tiny_records, quick_estimator):
        # paired renders of one scene stay close even for the cheap fixture model
        groups = {}
        for rec in tiny_records:
            groups.setdefault(rec.scene_id, []).append(rec)
        pair = next(g for g in groups.values() if len(g) >= 2)
        with torch.no_grad():
            a = estimate(quick_estimator, pair[0].tuple.v_real)
            b = estimate(quick_estimator, pair[1].tuple.v_real)
        fa = torch.cat([a.depth.flatten(), a.normals.flatten()])
        fb = torch.cat([b.depth.flatten(), b.normals.flatten()])
        rel = float((fa - fb).norm() / fa.norm())
        assert rel < 0.5  # the real bound (0.05) is asserted on the acceptance estimator
