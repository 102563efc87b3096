"""Joint objective and training loop.

Per iteration the batch is split by supervision type: round(20%) of samples get
the consistency loss (three forward passes, one backward), the remaining 80%
get the plain flow loss, and round(50%) of those additionally get geometry
feedback computed on a few-step sampled output. The update optimizes
lambda0*L0 + lambda_fast*L_fast + lambda_phy*L_phy in a single optimizer step
with a momentum-free adaptive optimizer (Adam with beta1 = 0).

All randomness is stateless: every iteration derives independent named streams
from (seed, iteration), so resuming from a checkpoint reproduces the
uninterrupted run bit-for-bit and disabling one loss never shifts the draws of
another.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import flowcore
from .annotation import encode_label
from .config import Camera, ConfigError, ModelConfig, TrainConfig
from .dataset_io import SampleRecord, load_named_arrays, save_named_arrays
from .geometry import GeometryEstimator, GeometryMaps, estimate, physics_loss
from .model import (
    Conditioning,
    VelocityModel,
    init_model,
    load_model,
    model_arch_hash,
    save_model,
    tensor_to_video,
    video_to_tensor,
)
from .scenes import DEFAULT_CAMERA, composite_degraded, degrade, render

_STREAMS = ("batch", "partition", "noise", "time", "fast", "phy", "augment")


class NonFiniteLossError(RuntimeError):
    """A loss component became non-finite; diagnostics were dumped to disk."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class UnknownSceneError(KeyError):
    pass


def rng_streams(seed: int, iteration: int) -> dict[str, np.random.Generator]:
    """Independent named streams for one iteration, pure functions of (seed, iteration)."""

    return {
        name: np.random.default_rng(np.random.SeedSequence([seed, iteration, idx]))
        for idx, name in enumerate(_STREAMS)
    }


def torch_rng_from(np_rng: np.random.Generator) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(np_rng.integers(0, 2**63 - 1)))
    return gen


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_batch(
    rng: np.random.Generator,
    batch_size: int,
    fast_fraction: float = 0.20,
    phy_fraction_of_flow: float = 0.50,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random (fast, flow, phy-subset-of-flow) index split with round-half-up sizes."""

    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = rng.permutation(batch_size)
    n_fast = round_half_up(fast_fraction * batch_size)
    fast = np.sort(perm[:n_fast])
    flow = np.sort(perm[n_fast:])
    n_phy = round_half_up(phy_fraction_of_flow * flow.size)
    phy = np.sort(rng.permutation(flow)[:n_phy])
    return fast, flow, phy


@dataclass(eq=False)
class BatchTensors:
    x1: torch.Tensor  # (B, 3F, H, W)
    x_deg: torch.Tensor
    x_bg: torch.Tensor
    c: torch.Tensor  # (B, 23)
    mask: np.ndarray  # (B, F, H, W) uint8
    depth: np.ndarray  # (B, F, H, W)
    normals: np.ndarray  # (B, F, H, W, 3)

    @property
    def size(self) -> int:
        return self.x1.shape[0]

    def cond(self, idx: np.ndarray | None = None) -> Conditioning:
        if idx is None:
            return Conditioning(self.x_deg, self.x_bg, self.c)
        return Conditioning(self.x_deg[idx], self.x_bg[idx], self.c[idx])


def make_batch(records: list[SampleRecord], indices: np.ndarray, dtype: torch.dtype) -> BatchTensors:
    chosen = [records[i] for i in indices]
    return BatchTensors(
        x1=torch.stack([video_to_tensor(r.tuple.v_real, dtype) for r in chosen]),
        x_deg=torch.stack([video_to_tensor(r.tuple.v_deg, dtype) for r in chosen]),
        x_bg=torch.stack([video_to_tensor(r.tuple.v_bg, dtype) for r in chosen]),
        c=torch.stack([torch.as_tensor(encode_label(r.label), dtype=dtype) for r in chosen]),
        mask=np.stack([r.tuple.mask for r in chosen]),
        depth=np.stack([r.depth for r in chosen]),
        normals=np.stack([r.normals for r in chosen]),
    )


@dataclass
class LossReport:
    iteration: int
    loss0: float
    loss_fast: float
    loss_phy: float
    total: float
    n_fast: int
    n_flow: int
    n_phy: int
    phy_skipped_frames: int = 0


@dataclass(eq=False)
class TrainState:
    model: VelocityModel
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    iteration: int = 0
    history: list[LossReport] = field(default_factory=list)
    estimator: GeometryEstimator | None = None


def make_optimizer(model: VelocityModel, lr: float) -> torch.optim.Optimizer:
    # beta1 = 0: adaptive scaling without momentum
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.0, 0.999))


def _torch_dtype(name: str) -> torch.dtype:
    return torch.float64 if name == "float64" else torch.float32


def compute_losses(
    state: TrainState, batch: BatchTensors, streams: dict[str, np.random.Generator]
) -> tuple[torch.Tensor, LossReport]:
    """The lambda-weighted joint objective for one batch; pure given the streams."""

    cfg = state.cfg
    model = state.model
    dtype = batch.x1.dtype
    B = batch.size

    fast_idx, flow_idx, phy_idx = partition_batch(
        streams["partition"], B, cfg.fast_fraction, cfg.phy_fraction_of_flow
    )

    noise_gen = torch_rng_from(streams["noise"])
    x0 = torch.randn(batch.x1.shape, generator=noise_gen, dtype=dtype)
    time_gen = torch_rng_from(streams["time"])
    t_all = flowcore.sample_time(time_gen, B, cfg.time_mu, cfg.time_sigma, dtype=dtype)

    zero = torch.zeros((), dtype=dtype)
    loss0 = zero
    if flow_idx.size:
        t = t_all[flow_idx]
        x_t = flowcore.interpolate(x0[flow_idx], batch.x1[flow_idx], t)
        v_hat = model.velocity(x_t, t, torch.zeros_like(t), batch.cond(flow_idx))
        target = flowcore.velocity_target(x0[flow_idx], batch.x1[flow_idx])
        loss0 = ((v_hat - target) ** 2).mean()

    loss_fast = zero
    if fast_idx.size and not cfg.disable_fast:
        fast_gen = torch_rng_from(streams["fast"])
        d = flowcore.sample_stepsize(fast_gen, fast_idx.size, cfg.k_max, min_k=1, dtype=dtype)
        t_fast = flowcore.sample_pair_time(fast_gen, d)
        x_t = flowcore.interpolate(x0[fast_idx], batch.x1[fast_idx], t_fast)
        cond = batch.cond(fast_idx)
        target = flowcore.shortcut_target(model.velocity, x_t, t_fast, d, cond)
        pred = model.velocity(x_t, t_fast, 2.0 * d, cond)
        loss_fast = ((pred - target) ** 2).mean()

    loss_phy = zero
    phy_skipped = 0
    if phy_idx.size and not cfg.disable_phy:
        if state.estimator is None:
            raise ConfigError("geometry feedback enabled but no estimator was provided")
        phy_gen = torch_rng_from(streams["phy"])
        shape = (phy_idx.size, *batch.x1.shape[1:])
        x0_phy = torch.randn(shape, generator=phy_gen, dtype=dtype)
        cond = batch.cond(phy_idx)
        generated = flowcore.sample(
            model.velocity, cond, steps=cfg.phy_sample_steps, x0=x0_phy, k_max=cfg.k_max
        )
        terms = []
        for row, sample_index in enumerate(phy_idx):
            video = tensor_to_video(generated[row], model.cfg.frames)
            maps = estimate(state.estimator, video)
            ref = GeometryMaps.from_numpy(
                batch.depth[sample_index], batch.normals[sample_index], dtype=dtype
            )
            feedback = physics_loss(
                maps,
                ref,
                batch.mask[sample_index],
                use_depth=cfg.use_depth,
                use_normal=cfg.use_normal,
                norm_scope=cfg.norm_scope,
            )
            phy_skipped += feedback.skipped_frames
            terms.append(feedback.value)
        loss_phy = torch.stack(terms).mean()

    total = cfg.lambda0 * loss0 + cfg.lambda_fast * loss_fast + cfg.lambda_phy * loss_phy
    l0_val, lf_val, lp_val = float(loss0.detach()), float(loss_fast.detach()), float(loss_phy.detach())
    report = LossReport(
        iteration=state.iteration,
        loss0=l0_val,
        loss_fast=lf_val,
        loss_phy=lp_val,
        # reported in float64 from the reported components so the decomposition
        # identity holds exactly regardless of the training dtype
        total=cfg.lambda0 * l0_val + cfg.lambda_fast * lf_val + cfg.lambda_phy * lp_val,
        n_fast=int(fast_idx.size),
        n_flow=int(flow_idx.size),
        n_phy=int(phy_idx.size),
        phy_skipped_frames=phy_skipped,
    )
    return total, report


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    """Cosine decay from learning_rate to learning_rate_min, stateless in iteration."""

    if cfg.learning_rate_min <= 0.0 or cfg.learning_rate_min >= cfg.learning_rate:
        return cfg.learning_rate
    span = max(1, cfg.iterations)
    frac = min(1.0, iteration / span)
    return cfg.learning_rate_min + 0.5 * (cfg.learning_rate - cfg.learning_rate_min) * (
        1.0 + math.cos(math.pi * frac)
    )


def training_step(
    state: TrainState, batch: BatchTensors, dump_dir: Path | None = None
) -> LossReport:
    """One optimizer update; aborts with a diagnostic dump on a non-finite loss."""

    for group in state.optimizer.param_groups:
        group["lr"] = learning_rate_at(state.cfg, state.iteration)
    total, report = compute_losses(state, batch, rng_streams(state.cfg.seed, state.iteration))
    if not math.isfinite(report.total):
        dump_path = None
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            dump_path = dump_dir / f"diagnostic_dump_iter{state.iteration:06d}.npz"
            np.savez(
                dump_path,
                x1=batch.x1.detach().numpy(),
                x_deg=batch.x_deg.detach().numpy(),
                x_bg=batch.x_bg.detach().numpy(),
                c=batch.c.detach().numpy(),
                iteration=np.array(state.iteration),
                seed=np.array(state.cfg.seed),
                losses=np.array([report.loss0, report.loss_fast, report.loss_phy]),
            )
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}: "
            f"L0={report.loss0} Lfast={report.loss_fast} Lphy={report.loss_phy}",
            dump_path,
        )
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.iteration += 1
    state.history.append(report)
    return report


def augment_degraded(
    rng: np.random.Generator,
    record: SampleRecord,
    scene_bank: dict[str, SampleRecord],
    camera: Camera = DEFAULT_CAMERA,
) -> SampleRecord:
    """Replace v_deg with a fresh degradation draw; every other field is untouched."""

    if record.scene_id not in scene_bank:
        raise UnknownSceneError(f"unknown scene id: {record.scene_id!r}")
    spec = scene_bank[record.scene_id].spec
    n_frames = record.tuple.v_real.shape[0]
    program = degrade(spec, rng, n_frames, avoid=record.real_program)
    deg = render(spec, program, camera)
    # composite against the record's own real video so the background stays its own
    new_v_deg = composite_degraded(record.real_sample(), deg)
    new_tuple = replace(record.tuple, v_deg=new_v_deg)
    return replace(record, tuple=new_tuple, degraded_program=program)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: Path | str, state: TrainState) -> None:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt_state = state.optimizer.state_dict()
    for pid, slots in opt_state["state"].items():
        for key, value in slots.items():
            arrays[f"opt/{pid}/{key}"] = (
                value.detach().cpu().numpy() if torch.is_tensor(value) else np.array(value)
            )
    if state.history:
        arrays["history"] = np.array(
            [
                [r.iteration, r.loss0, r.loss_fast, r.loss_phy, r.total,
                 r.n_fast, r.n_flow, r.n_phy, r.phy_skipped_frames]
                for r in state.history
            ],
            dtype=np.float64,
        )
    meta = {
        "kind": "velocity_model",
        "iteration": state.iteration,
        "seed": state.cfg.seed,
        "arch_hash": model_arch_hash(state.model.cfg),
        "model_config": {k: getattr(state.model.cfg, k) for k in (
            "frames", "height", "width", "hidden", "blocks", "emb_dim", "cond_dim",
            "param_budget", "temporal_3d")},
        "train_config": {k: getattr(state.cfg, k) for k in (
            "lambda0", "lambda_fast", "lambda_phy", "learning_rate", "learning_rate_min",
            "batch_size",
            "iterations", "seed", "fast_fraction", "phy_fraction_of_flow", "k_max",
            "phy_sample_steps", "time_mu", "time_sigma", "augment", "disable_fast",
            "disable_phy", "use_depth", "use_normal", "norm_scope", "dtype",
            "deterministic", "eval_every", "checkpoint_every")},
    }
    save_named_arrays(path, arrays, meta)


def load_checkpoint(
    path: Path | str, estimator: GeometryEstimator | None = None
) -> TrainState:
    arrays, meta = load_named_arrays(path)
    if meta.get("kind") != "velocity_model":
        raise ValueError(f"{path} is not a velocity model checkpoint")
    cfg = TrainConfig(**meta["train_config"])
    model = VelocityModel(ModelConfig(**meta["model_config"]))
    model_state = {
        k.removeprefix("model/"): torch.as_tensor(v)
        for k, v in arrays.items()
        if k.startswith("model/")
    }
    model.load_state_dict(model_state)
    model = model.to(_torch_dtype(cfg.dtype))
    optimizer = make_optimizer(model, cfg.learning_rate)
    opt_slots: dict[int, dict[str, torch.Tensor]] = {}
    for key, value in arrays.items():
        if not key.startswith("opt/"):
            continue
        _, pid, slot = key.split("/", 2)
        opt_slots.setdefault(int(pid), {})[slot] = torch.as_tensor(value)
    if opt_slots:
        base = optimizer.state_dict()
        base["state"] = opt_slots
        optimizer.load_state_dict(base)
    history = []
    if "history" in arrays:
        for row in arrays["history"]:
            history.append(
                LossReport(
                    iteration=int(row[0]), loss0=row[1], loss_fast=row[2], loss_phy=row[3],
                    total=row[4], n_fast=int(row[5]), n_flow=int(row[6]), n_phy=int(row[7]),
                    phy_skipped_frames=int(row[8]),
                )
            )
    return TrainState(
        model=model,
        optimizer=optimizer,
        cfg=cfg,
        iteration=int(meta["iteration"]),
        history=history,
        estimator=estimator,
    )


def write_loss_csv(path: Path | str, history: list[LossReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss0", "loss_fast", "loss_phy", "total"])
        for report in history:
            writer.writerow(
                [report.iteration, repr(report.loss0), repr(report.loss_fast),
                 repr(report.loss_phy), repr(report.total)]
            )


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------


def train(
    cfg: TrainConfig,
    records: list[SampleRecord],
    estimator: GeometryEstimator | None = None,
    out_dir: Path | str = "runs/train",
    model_cfg: ModelConfig | None = None,
    camera: Camera = DEFAULT_CAMERA,
    resume_from: Path | str | None = None,
) -> Path:
    """Run the loop to cfg.iterations; returns the final checkpoint path."""

    cfg.validate()
    if not records:
        raise ConfigError("training needs a non-empty dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)

    dtype = _torch_dtype(cfg.dtype)
    if resume_from is not None:
        state = load_checkpoint(resume_from, estimator=estimator)
        state.cfg = cfg
    else:
        frames, h, w = records[0].tuple.v_real.shape[:3]
        if model_cfg is None:
            model_cfg = ModelConfig(frames=frames, height=h, width=w)
        model = init_model(model_cfg, seed=cfg.seed).to(dtype)
        state = TrainState(
            model=model,
            optimizer=make_optimizer(model, cfg.learning_rate),
            cfg=cfg,
            estimator=estimator,
        )

    needs_phy = cfg.lambda_phy > 0 and not cfg.disable_phy
    if needs_phy and state.estimator is None:
        raise ConfigError("geometry feedback enabled but no estimator was provided")

    scene_bank = {rec.scene_id: rec for rec in records if rec.scene_id is not None}

    while state.iteration < cfg.iterations:
        streams = rng_streams(cfg.seed, state.iteration)
        indices = streams["batch"].integers(0, len(records), size=cfg.batch_size)
        if cfg.augment:
            chosen = [
                augment_degraded(streams["augment"], records[i], scene_bank, camera)
                for i in indices
            ]
            batch = make_batch(chosen, np.arange(len(chosen)), dtype)
        else:
            batch = make_batch(records, indices, dtype)
        training_step(state, batch, dump_dir=out_dir)

        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_iter{state.iteration:06d}", state)
            write_loss_csv(out_dir / "loss_curve.csv", state.history)

    final = out_dir / "checkpoint_final"
    save_checkpoint(final, state)
    write_loss_csv(out_dir / "loss_curve.csv", state.history)
    return final
