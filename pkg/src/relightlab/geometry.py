"""Frozen RGB -> (depth, normals) estimator and the masked relative-L2 feedback loss.

The estimator is a small convolutional encoder-decoder trained on renders with
exact geometry targets; after training it is frozen and used purely as a
supervision channel. Gradients still flow *through* it into whatever produced
the RGB input, which is how the feedback loss supervises a generator. The loss
computes per-frame masked relative L2 errors for depth and normals (normals
renormalized inside the mask first), sums the two terms, and averages over
frames; a config switch restores single global norms over the whole clip.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import EstimatorConfig
from .dataset_io import SampleRecord, load_named_arrays, save_named_arrays

EPS = 1e-8


class EstimatorTrainingError(RuntimeError):
    """Validation error stayed above the configured thresholds."""

    def __init__(self, message: str, loss_curve: list[float]):
        super().__init__(message)
        self.loss_curve = loss_curve


@dataclass(eq=False)
class GeometryMaps:
    """Depth (F, H, W) and normals (F, H, W, 3) as torch tensors."""

    depth: torch.Tensor
    normals: torch.Tensor

    @classmethod
    def from_numpy(cls, depth: np.ndarray, normals: np.ndarray,
                   dtype: torch.dtype = torch.float32) -> "GeometryMaps":
        return cls(
            depth=torch.as_tensor(np.ascontiguousarray(depth)).to(dtype),
            normals=torch.as_tensor(np.ascontiguousarray(normals)).to(dtype),
        )


@dataclass(eq=False)
class PhysicsFeedback:
    """Loss value plus bookkeeping about frames that had to be skipped."""

    value: torch.Tensor
    skipped_frames: int = 0
    all_empty: bool = False

    def __float__(self) -> float:
        return float(self.value.detach())


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class GeometryEstimator(nn.Module):
    """Three-scale conv encoder-decoder with GroupNorm, 3 channels in,
    1 depth + 3 normal channels out.

    GroupNorm is what buys lighting invariance: it normalizes away per-image
    photometric scale, so two renders of the same scene under different light
    programs map to nearly the same geometry.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.channels = c
        self.act = nn.SiLU()
        self.enc1 = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), _group_norm(c))
        self.enc2 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), _group_norm(2 * c))
        self.enc3 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), _group_norm(4 * c))
        self.mid = nn.Sequential(nn.Conv2d(4 * c, 4 * c, 3, padding=1), _group_norm(4 * c))
        self.dec2 = nn.Sequential(nn.Conv2d(4 * c, 2 * c, 3, padding=1), _group_norm(2 * c))
        self.dec1 = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), _group_norm(c))
        self.head = nn.Conv2d(c, 4, 3, padding=1)
        self.frozen = False

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        h1 = self.act(self.enc1(rgb))
        h2 = self.act(self.enc2(h1))
        h3 = self.act(self.enc3(h2))
        h3 = self.act(self.mid(h3))
        u2 = nn.functional.interpolate(h3, size=h2.shape[-2:], mode="nearest")
        h2d = self.act(self.dec2(u2) + h2)
        u1 = nn.functional.interpolate(h2d, size=h1.shape[-2:], mode="nearest")
        h1d = self.act(self.dec1(u1) + h1)
        return self.head(h1d)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()


def _video_to_batch(video: np.ndarray | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(video, np.ndarray):
        video = torch.as_tensor(np.ascontiguousarray(video))
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ValueError(f"expected video (F, H, W, 3), got {tuple(video.shape)}")
    return video.to(dtype).permute(0, 3, 1, 2)


def estimate(est: GeometryEstimator, video: np.ndarray | torch.Tensor) -> GeometryMaps:
    """Run the estimator on a video; differentiable w.r.t. a torch input."""

    dtype = next(est.parameters()).dtype
    batch = _video_to_batch(video, dtype)
    out = est(batch)
    return GeometryMaps(depth=out[:, 0], normals=out[:, 1:4].permute(0, 2, 3, 1))


def _unit(normals: torch.Tensor) -> torch.Tensor:
    return normals / (normals.norm(dim=-1, keepdim=True) + EPS)


def physics_loss(
    pred: GeometryMaps,
    ref: GeometryMaps,
    mask: np.ndarray | torch.Tensor,
    *,
    use_depth: bool = True,
    use_normal: bool = True,
    norm_scope: str = "per_frame",
) -> PhysicsFeedback:
    """Masked relative-L2 geometry feedback.

    Per frame (or globally, per norm_scope): |D_hat - D| / |D| + |N_hat - N| / |N|
    with norms over masked pixels only, both normal maps renormalized to unit
    length inside the mask. Zero iff pred == ref on the mask; exactly invariant
    to values outside it. Frames with an empty mask are skipped and counted;
    an entirely empty mask returns 0 with the all_empty flag set.
    """

    if isinstance(mask, np.ndarray):
        mask = torch.as_tensor(np.ascontiguousarray(mask))
    inside = mask.bool()
    if pred.depth.shape != ref.depth.shape or pred.normals.shape != ref.normals.shape:
        raise ValueError("pred and ref geometry shapes differ")
    if inside.shape != pred.depth.shape:
        raise ValueError(f"mask shape {tuple(inside.shape)} vs depth {tuple(pred.depth.shape)}")

    dtype = pred.depth.dtype
    zero = torch.zeros((), dtype=dtype)

    def frame_terms(sel: torch.Tensor, f: slice | int) -> torch.Tensor:
        total = zero
        if use_depth:
            diff = (pred.depth[f][sel] - ref.depth[f][sel]).norm()
            scale = ref.depth[f][sel].norm() + EPS
            total = total + diff / scale
        if use_normal:
            pn = _unit(pred.normals[f][sel])
            rn = _unit(ref.normals[f][sel])
            total = total + (pn - rn).norm() / (rn.norm() + EPS)
        return total

    if norm_scope == "global":
        sel = inside
        if not bool(sel.any()):
            return PhysicsFeedback(value=zero, skipped_frames=int(mask.shape[0]), all_empty=True)
        return PhysicsFeedback(value=frame_terms(sel, slice(None)))

    terms = []
    skipped = 0
    for f in range(mask.shape[0]):
        sel = inside[f]
        if not bool(sel.any()):
            skipped += 1
            continue
        terms.append(frame_terms(sel, f))
    if not terms:
        return PhysicsFeedback(value=zero, skipped_frames=skipped, all_empty=True)
    return PhysicsFeedback(value=torch.stack(terms).mean(), skipped_frames=skipped)


def relative_depth_error(pred: GeometryMaps, ref: GeometryMaps, mask) -> float:
    fb = physics_loss(pred, ref, mask, use_depth=True, use_normal=False)
    return float(fb.value)


def mean_normal_angle_deg(pred: GeometryMaps, ref: GeometryMaps, mask) -> float:
    if isinstance(mask, np.ndarray):
        mask = torch.as_tensor(np.ascontiguousarray(mask))
    inside = mask.bool()
    if not bool(inside.any()):
        return 0.0
    pn = _unit(pred.normals[inside])
    rn = _unit(ref.normals[inside])
    cos = (pn * rn).sum(dim=-1).clamp(-1.0, 1.0)
    return float(torch.rad2deg(torch.arccos(cos)).mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EstimatorReport:
    val_rel_depth_error: float
    val_normal_angle_deg: float
    loss_curve: list[float] = field(default_factory=list)


def _arch_hash(cfg: EstimatorConfig) -> str:
    return hashlib.sha256(f"geom-enc-dec-gn3:{cfg.channels}".encode()).hexdigest()[:16]


def _variant_pools(records: list[SampleRecord]):
    """Appearance variants grouped by (scene, frame): identical geometry, many lights."""

    pools: dict[tuple[str, int], dict] = {}
    for index, rec in enumerate(records):
        for f in range(rec.tuple.v_real.shape[0]):
            key = (rec.scene_id or f"record_{index}", f)
            pool = pools.setdefault(key, {"variants": [], "geom": None})
            pool["variants"] += [rec.tuple.v_real[f], rec.tuple.v_deg[f]]
            pool["geom"] = (rec.depth[f], rec.normals[f], rec.mask[f])
    return [pools[key] for key in sorted(pools.keys())]


def _eval_estimator(model: GeometryEstimator, pools, indices) -> tuple[float, float]:
    depth_errors, angles = [], []
    with torch.no_grad():
        for i in indices:
            depth, normals, mask = pools[i]["geom"]
            ref = GeometryMaps.from_numpy(depth[None], normals[None])
            for rgb in pools[i]["variants"][:2]:
                maps = estimate(model, rgb[None])
                depth_errors.append(relative_depth_error(maps, ref, mask[None]))
                angles.append(mean_normal_angle_deg(maps, ref, mask[None]))
    return float(np.mean(depth_errors)), float(np.mean(angles))


def train_estimator(
    records: list[SampleRecord], cfg: EstimatorConfig
) -> tuple[GeometryEstimator, EstimatorReport]:
    """Supervised training against exact geometry; freezes the model on success.

    Each step draws pairs of appearance variants with identical geometry and
    optimizes masked depth/normal regression plus an output-consistency
    penalty across the pair (the lighting-invariance pressure). Raises
    EstimatorTrainingError (with the loss curve attached) if the held-out
    masked errors stay above the configured thresholds.
    """

    if not records:
        raise ValueError("estimator training needs a non-empty dataset")
    pools = _variant_pools(records)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pools))
    n_val = max(1, int(round(cfg.val_fraction * len(pools))))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        raise ValueError("not enough frames to split train/val")

    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**63 - 1)))
        model = GeometryEstimator(cfg.channels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.iterations), eta_min=cfg.learning_rate_min
    )
    draw = np.random.default_rng(int(rng.integers(2**63 - 1)))

    curve: list[float] = []
    B = cfg.batch_size
    for _ in range(cfg.iterations):
        rgb_a, rgb_b, depths, normals_list, masks = [], [], [], [], []
        for _ in range(B):
            pool = pools[train_idx[draw.integers(train_idx.size)]]
            variants = pool["variants"]
            i, j = draw.choice(len(variants), size=2, replace=False)
            rgb_a.append(variants[i])
            rgb_b.append(variants[j])
            d, n, m = pool["geom"]
            depths.append(d)
            normals_list.append(n)
            masks.append(m)
        rgb = torch.as_tensor(
            np.concatenate([np.stack(rgb_a), np.stack(rgb_b)])
        ).permute(0, 3, 1, 2)
        depth = torch.as_tensor(np.stack(depths)).repeat(2, 1, 1)
        normals = torch.as_tensor(np.stack(normals_list)).repeat(2, 1, 1, 1)
        mask = torch.as_tensor(np.stack(masks)).repeat(2, 1, 1).bool()

        out = model(rgb)
        pd = out[:, 0]
        pn = out[:, 1:4].permute(0, 2, 3, 1)
        w = mask.to(out.dtype)[..., None]
        pn_unit = pn / (pn.norm(dim=-1, keepdim=True) + EPS)
        cos = (pn_unit * normals).sum(-1)
        masked = mask.to(out.dtype)
        supervised = (
            ((pd - depth) ** 2 * masked).sum() / masked.sum()
            + cfg.normal_weight * (((pn - normals) ** 2) * w).sum() / w.sum()
            + cfg.cosine_weight * ((1.0 - cos) * masked).sum() / masked.sum()
            + cfg.background_weight
            * (((pd - depth) ** 2).mean() + ((pn - normals) ** 2).mean())
        )
        invariance = ((out[:B] - out[B:]) ** 2).mean()
        loss = supervised + cfg.invariance_weight * invariance

        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        curve.append(float(loss.detach()))

    depth_err, angle_err = _eval_estimator(model, pools, val_idx)
    report = EstimatorReport(
        val_rel_depth_error=depth_err, val_normal_angle_deg=angle_err, loss_curve=curve
    )
    if cfg.enforce_thresholds and (
        depth_err > cfg.max_rel_depth_error or angle_err > cfg.max_normal_angle_deg
    ):
        raise EstimatorTrainingError(
            f"estimator did not converge: rel depth {depth_err:.4f} "
            f"(limit {cfg.max_rel_depth_error}), normal angle {angle_err:.2f} deg "
            f"(limit {cfg.max_normal_angle_deg})",
            curve,
        )
    model.freeze()
    return model, report


def save_estimator(path, model: GeometryEstimator, cfg: EstimatorConfig,
                   report: EstimatorReport) -> None:
    arrays = {f"model/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    meta = {
        "kind": "geometry_estimator",
        "channels": model.channels,
        "arch_hash": _arch_hash(cfg),
        "seed": cfg.seed,
        "val_rel_depth_error": report.val_rel_depth_error,
        "val_normal_angle_deg": report.val_normal_angle_deg,
    }
    save_named_arrays(path, arrays, meta)


def load_estimator(path) -> tuple[GeometryEstimator, dict]:
    arrays, meta = load_named_arrays(path)
    if meta.get("kind") != "geometry_estimator":
        raise ValueError(f"{path} is not a geometry estimator checkpoint")
    model = GeometryEstimator(int(meta["channels"]))
    state = {k.removeprefix("model/"): torch.as_tensor(v) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.freeze()
    return model, meta
