import copy
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from relightlab import flowcore
from relightlab.config import ModelConfig, TrainConfig
from relightlab.geometry import GeometryMaps, estimate, physics_loss
from relightlab.model import init_model, tensor_to_video
from relightlab.trainer import (
    LossReport,
    NonFiniteLossError,
    TrainState,
    UnknownSceneError,
    augment_degraded,
    compute_losses,
    learning_rate_at,
    load_checkpoint,
    make_batch,
    make_optimizer,
    partition_batch,
    rng_streams,
    round_half_up,
    save_checkpoint,
    torch_rng_from,
    train,
    training_step,
    write_loss_csv,
)

MODEL_CFG = ModelConfig(frames=5, height=32, width=32, hidden=8, blocks=1)


def quick_cfg(**kw) -> TrainConfig:
    base = dict(
        iterations=3, batch_size=8, learning_rate=1e-3, seed=0, k_max=3,
        dtype="float32", deterministic=False,
    )
    base.update(kw)
    return TrainConfig(**base)


def fresh_state(cfg, records, estimator=None, seed=11) -> TrainState:
    model = init_model(MODEL_CFG, seed=seed).to(
        torch.float64 if cfg.dtype == "float64" else torch.float32
    )
    return TrainState(
        model=model, optimizer=make_optimizer(model, cfg.learning_rate), cfg=cfg,
        estimator=estimator,
    )


class TestPartition:
    def test_exact_counts_b10(self):
        fast, flow, phy = partition_batch(np.random.default_rng(0), 10)
        assert (len(fast), len(flow), len(phy)) == (2, 8, 4)
        assert set(fast) | set(flow) == set(range(10))
        assert set(phy) <= set(flow)

    def test_exact_counts_b5_round_half_up(self):
        fast, flow, phy = partition_batch(np.random.default_rng(1), 5)
        assert (len(fast), len(flow), len(phy)) == (1, 4, 2)
        assert round_half_up(0.5) == 1 and round_half_up(1.5) == 2

    def test_membership_frequencies(self):
        counts_fast = np.zeros(10)
        counts_phy = np.zeros(10)
        n = 3000
        for it in range(n):
            rng = np.random.default_rng(it)
            fast, flow, phy = partition_batch(rng, 10)
            counts_fast[fast] += 1
            counts_phy[phy] += 1
        assert np.all(np.abs(counts_fast / n - 0.2) <= 0.02)
        assert np.all(np.abs(counts_phy / n - 0.4) <= 0.02)  # 0.5 of the 0.8 flow share


class TestLossComputation:
    def test_report_finite_and_decomposed(self, tiny_records, quick_estimator):
        cfg = quick_cfg()
        state = fresh_state(cfg, tiny_records, estimator=quick_estimator)
        batch = make_batch(tiny_records, np.arange(8), torch.float32)
        total, report = compute_losses(state, batch, rng_streams(cfg.seed, 0))
        for value in (report.loss0, report.loss_fast, report.loss_phy, report.total):
            assert math.isfinite(value) and value >= 0.0
        recomposed = (
            cfg.lambda0 * report.loss0
            + cfg.lambda_fast * report.loss_fast
            + cfg.lambda_phy * report.loss_phy
        )
        assert report.total == pytest.approx(recomposed, rel=1e-9)
        assert (report.n_fast, report.n_flow, report.n_phy) == (2, 6, 3)

    def test_lambda_zero_equals_pure_flow_step(self, tiny_records):
        # oracle: an independent L0-only update using the same stream draws
        cfg = quick_cfg(iterations=1, disable_fast=True, disable_phy=True)
        state = fresh_state(cfg, tiny_records)
        reference = copy.deepcopy(state.model)
        ref_opt = make_optimizer(reference, cfg.learning_rate)

        batch = make_batch(tiny_records, np.arange(8), torch.float32)
        training_step(state, batch)

        streams = rng_streams(cfg.seed, 0)
        fast_idx, flow_idx, phy_idx = partition_batch(
            streams["partition"], 8, cfg.fast_fraction, cfg.phy_fraction_of_flow
        )
        x0 = torch.randn(batch.x1.shape, generator=torch_rng_from(streams["noise"]))
        t_all = flowcore.sample_time(torch_rng_from(streams["time"]), 8)
        t = t_all[flow_idx]
        x_t = flowcore.interpolate(x0[flow_idx], batch.x1[flow_idx], t)
        v_hat = reference.velocity(x_t, t, torch.zeros_like(t), batch.cond(flow_idx))
        loss = cfg.lambda0 * ((v_hat - (batch.x1[flow_idx] - x0[flow_idx])) ** 2).mean()
        ref_opt.zero_grad()
        loss.backward()
        ref_opt.step()

        for pa, pb in zip(state.model.parameters(), reference.parameters()):
            assert torch.equal(pa, pb)

    def test_disabled_branches_do_not_shift_flow_draws(self, tiny_records, quick_estimator):
        batch = make_batch(tiny_records, np.arange(8), torch.float32)
        full = fresh_state(quick_cfg(), tiny_records, estimator=quick_estimator)
        bare = fresh_state(quick_cfg(disable_fast=True, disable_phy=True), tiny_records)
        _, report_full = compute_losses(full, batch, rng_streams(0, 0))
        _, report_bare = compute_losses(bare, batch, rng_streams(0, 0))
        assert report_full.loss0 == report_bare.loss0

    def test_gradient_matches_finite_differences(self, tiny_records, quick_estimator):
        # frozen-target total loss in double precision on a tiny model
        cfg = quick_cfg(dtype="float64", k_max=2, phy_sample_steps=2, batch_size=4)
        state = fresh_state(cfg, tiny_records, estimator=quick_estimator)
        state.estimator = copy.deepcopy(quick_estimator).double()
        batch = make_batch(tiny_records, np.arange(4), torch.float64)
        streams_seed = (cfg.seed, 0)

        def frozen_total(model, frozen):
            streams = rng_streams(*streams_seed)
            fast_idx, flow_idx, phy_idx = partition_batch(
                streams["partition"], 4, cfg.fast_fraction, cfg.phy_fraction_of_flow
            )
            x0 = torch.randn(batch.x1.shape, generator=torch_rng_from(streams["noise"]),
                             dtype=torch.float64)
            t_all = flowcore.sample_time(torch_rng_from(streams["time"]), 4,
                                         dtype=torch.float64)
            t = t_all[flow_idx]
            x_t = flowcore.interpolate(x0[flow_idx], batch.x1[flow_idx], t)
            v = model.velocity(x_t, t, torch.zeros_like(t), batch.cond(flow_idx))
            total = cfg.lambda0 * ((v - (batch.x1[flow_idx] - x0[flow_idx])) ** 2).mean()

            fast_gen = torch_rng_from(streams["fast"])
            d = flowcore.sample_stepsize(fast_gen, fast_idx.size, cfg.k_max, min_k=1,
                                         dtype=torch.float64)
            t_fast = flowcore.sample_pair_time(fast_gen, d)
            x_tf = flowcore.interpolate(x0[fast_idx], batch.x1[fast_idx], t_fast)
            target = flowcore.shortcut_target(frozen.velocity, x_tf, t_fast, d,
                                              batch.cond(fast_idx))
            pred = model.velocity(x_tf, t_fast, 2.0 * d, batch.cond(fast_idx))
            total = total + cfg.lambda_fast * ((pred - target) ** 2).mean()

            phy_gen = torch_rng_from(streams["phy"])
            x0p = torch.randn((phy_idx.size, *batch.x1.shape[1:]), generator=phy_gen,
                              dtype=torch.float64)
            generated = flowcore.sample(model.velocity, batch.cond(phy_idx),
                                        steps=cfg.phy_sample_steps, x0=x0p, k_max=cfg.k_max)
            terms = []
            for row, sample_index in enumerate(phy_idx):
                video = tensor_to_video(generated[row], MODEL_CFG.frames)
                maps = estimate(state.estimator, video)
                ref = GeometryMaps.from_numpy(batch.depth[sample_index],
                                              batch.normals[sample_index],
                                              dtype=torch.float64)
                terms.append(physics_loss(maps, ref, batch.mask[sample_index]).value)
            return total + cfg.lambda_phy * torch.stack(terms).mean()

        frozen = copy.deepcopy(state.model)
        loss = frozen_total(state.model, frozen)
        state.model.zero_grad()
        loss.backward()
        grads = [p.grad.clone() for p in state.model.parameters()]

        rng = np.random.default_rng(3)
        params = list(state.model.parameters())
        eps = 1e-6
        for _ in range(5):
            direction = [torch.as_tensor(rng.standard_normal(p.shape)) for p in params]
            norm = math.sqrt(sum(float((d ** 2).sum()) for d in direction))
            direction = [d / norm for d in direction]
            with torch.no_grad():
                for p, d in zip(params, direction):
                    p.add_(eps * d)
                plus = float(frozen_total(state.model, frozen))
                for p, d in zip(params, direction):
                    p.add_(-2 * eps * d)
                minus = float(frozen_total(state.model, frozen))
                for p, d in zip(params, direction):
                    p.add_(eps * d)
            fd = (plus - minus) / (2 * eps)
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
            assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_non_finite_loss_aborts_with_dump(self, tiny_records, tmp_path):
        cfg = quick_cfg(disable_fast=True, disable_phy=True)
        state = fresh_state(cfg, tiny_records)
        with torch.no_grad():
            next(state.model.parameters())[0] = float("nan")
        batch = make_batch(tiny_records, np.arange(8), torch.float32)
        with pytest.raises(NonFiniteLossError):
            training_step(state, batch, dump_dir=tmp_path)
        dumps = list(tmp_path.glob("diagnostic_dump_iter*.npz"))
        assert len(dumps) == 1
        data = np.load(dumps[0])
        assert int(data["iteration"]) == 0 and int(data["seed"]) == cfg.seed


class TestAugmentation:
    def test_fields_preserved_and_v_deg_replaced(self, tiny_records):
        bank = {rec.scene_id: rec for rec in tiny_records}
        rec = tiny_records[0]
        out = augment_degraded(np.random.default_rng(0), rec, bank)
        assert np.array_equal(out.tuple.v_real, rec.tuple.v_real)
        assert np.array_equal(out.tuple.mask, rec.tuple.mask)
        assert out.label == rec.label
        outside = ~rec.tuple.mask.astype(bool)
        assert np.array_equal(
            out.tuple.v_deg[outside], rec.tuple.v_real[outside]
        )

    def test_unknown_scene_raises(self, tiny_records):
        rec = tiny_records[0]
        with pytest.raises(UnknownSceneError):
            augment_degraded(np.random.default_rng(0), rec, {})

    def test_many_draws_cover_the_pool(self, tiny_records):
        bank = {rec.scene_id: rec for rec in tiny_records}
        rec = tiny_records[0]
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(100):
            out = augment_degraded(rng, rec, bank)
            seen.add(out.degraded_program.frames)
        assert len(seen) >= 10  # 15-config pool minus the avoided entry


class TestLoop:
    def test_smoke_run_writes_checkpoint_and_csv(self, tiny_records, tmp_path):
        cfg = quick_cfg(iterations=4, disable_fast=False, disable_phy=True,
                        checkpoint_every=2)
        final = train(cfg, tiny_records, out_dir=tmp_path, model_cfg=MODEL_CFG)
        assert final.with_suffix(".npz").exists()
        csv_path = tmp_path / "loss_curve.csv"
        assert csv_path.exists()
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "iteration,loss0,loss_fast,loss_phy,total"
        assert len(lines) == 5

    def test_resume_reproduces_uninterrupted_run(self, tiny_records, tmp_path):
        cfg = quick_cfg(iterations=6, disable_phy=True, checkpoint_every=3)
        final_a = train(cfg, tiny_records, out_dir=tmp_path / "a", model_cfg=MODEL_CFG)
        state_a = load_checkpoint(final_a)

        train(quick_cfg(iterations=3, disable_phy=True), tiny_records,
              out_dir=tmp_path / "b", model_cfg=MODEL_CFG)
        final_b = train(cfg, tiny_records, out_dir=tmp_path / "b2",
                        resume_from=tmp_path / "b" / "checkpoint_final")
        state_b = load_checkpoint(final_b)

        for ka, kb in zip(state_a.model.state_dict().items(),
                          state_b.model.state_dict().items()):
            assert ka[0] == kb[0]
            assert torch.equal(ka[1], kb[1])
        assert state_a.iteration == state_b.iteration == 6

    def test_augmented_run_smoke(self, tiny_records, tmp_path):
        cfg = quick_cfg(iterations=2, disable_phy=True, augment=True)
        final = train(cfg, tiny_records, out_dir=tmp_path, model_cfg=MODEL_CFG)
        assert final.with_suffix(".json").exists()

    def test_phy_requires_estimator(self, tiny_records, tmp_path):
        from relightlab.config import ConfigError

        cfg = quick_cfg(iterations=1)
        with pytest.raises(ConfigError, match="estimator"):
            train(cfg, tiny_records, estimator=None, out_dir=tmp_path,
                  model_cfg=MODEL_CFG)

    def test_learning_rate_schedule(self):
        cfg = quick_cfg(iterations=100, learning_rate=1e-3, learning_rate_min=1e-4)
        assert learning_rate_at(cfg, 0) == pytest.approx(1e-3)
        assert learning_rate_at(cfg, 100) == pytest.approx(1e-4)
        assert learning_rate_at(cfg, 50) == pytest.approx((1e-3 + 1e-4) / 2, rel=1e-6)

    def test_checkpoint_preserves_optimizer_state(self, tiny_records, tmp_path):
        cfg = quick_cfg(iterations=2, disable_phy=True)
        state = fresh_state(cfg, tiny_records)
        batch = make_batch(tiny_records, np.arange(8), torch.float32)
        training_step(state, batch)
        save_checkpoint(tmp_path / "ckpt", state)
        restored = load_checkpoint(tmp_path / "ckpt")
        orig = state.optimizer.state_dict()["state"]
        back = restored.optimizer.state_dict()["state"]
        assert set(orig) == set(back)
        for pid in orig:
            for key in orig[pid]:
                assert torch.equal(
                    torch.as_tensor(orig[pid][key]), torch.as_tensor(back[pid][key])
                )
        assert [r.total for r in restored.history] == [r.total for r in state.history]
