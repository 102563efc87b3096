"""Step- and time-conditioned convolutional velocity network.

Frames are stacked along channels (a 3D-convolution variant is available
behind a config flag for temporal ablations). Conditioning enters through
zero-initialized portals: a conv stem over the concatenated [x_deg, x_bg]
channels, a linear projection of the 23-dim attribute vector, sinusoidal
timestep / step-size embeddings, and per-block FiLM (scale, shift) layers
driven by the summed embedding. At initialization every portal is exactly
zero, so the output depends on x_t alone; the plain flow loss conditions on
the d=0 token so one embedding table serves both objectives. The FiLM scale
path matters: the ideal velocity here is (x1_hat - x_t) / (1 - t), a
multiplicative interaction with t that pure bias conditioning cannot express.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ConfigError, ModelConfig
from .dataset_io import load_named_arrays, save_named_arrays


@dataclass(eq=False)
class Conditioning:
    """Channel-stacked degraded/background videos plus the attribute one-hot."""

    x_deg: torch.Tensor  # (B, 3F, H, W)
    x_bg: torch.Tensor  # (B, 3F, H, W)
    c: torch.Tensor  # (B, 23)


def sinusoidal_features(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features of a scalar in [0, 1], geometric frequencies."""

    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=values.dtype, device=values.device)
    )
    angles = values[:, None] * freqs[None, :] * math.pi
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class _ScalarEmbed(nn.Module):
    """Sinusoidal features -> two-layer projection; final layer zero-initialized."""

    def __init__(self, emb_dim: int, out_dim: int):
        super().__init__()
        self.emb_dim = emb_dim
        self.fc1 = nn.Linear(emb_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)
        self.act = nn.SiLU()
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(sinusoidal_features(values, self.emb_dim))))


class _FilmResBlock(nn.Module):
    """Residual conv block modulated by (1 + scale, shift) from the embedding."""

    def __init__(self, channels: int, emb_dim: int, conv3d: bool = False):
        super().__init__()
        conv = nn.Conv3d if conv3d else nn.Conv2d
        self.conv1 = conv(channels, channels, 3, padding=1)
        self.conv2 = conv(channels, channels, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)
        self.act = nn.SiLU()
        self._spatial_dims = 3 if conv3d else 2

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(emb).chunk(2, dim=1)
        view = scale.shape + (1,) * self._spatial_dims
        mid = self.conv1(self.act(h))
        mid = mid * (1.0 + scale.reshape(view)) + shift.reshape(view)
        return h + self.conv2(self.act(mid))


class VelocityModel(nn.Module):
    """v(x_t, t, d, cond) over (B, 3F, H, W) grids."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = 3 * cfg.frames
        conv3d = cfg.temporal_3d
        conv = nn.Conv3d if conv3d else nn.Conv2d
        in_ch = 3 if conv3d else ch
        self.stem = conv(in_ch, cfg.hidden, 3, padding=1)
        self.cond_stem = conv(2 * in_ch, cfg.hidden, 3, padding=1, bias=False)
        nn.init.zeros_(self.cond_stem.weight)
        self.c_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        nn.init.zeros_(self.c_proj.weight)
        nn.init.zeros_(self.c_proj.bias)
        self.t_embed = _ScalarEmbed(cfg.emb_dim, cfg.hidden)
        self.d_embed = _ScalarEmbed(cfg.emb_dim, cfg.hidden)
        self.blocks = nn.ModuleList(
            [_FilmResBlock(cfg.hidden, cfg.hidden, conv3d) for _ in range(cfg.blocks)]
        )
        self.head = conv(cfg.hidden, in_ch, 3, padding=1)

    def _fold(self, x: torch.Tensor) -> torch.Tensor:
        if not self.cfg.temporal_3d:
            return x
        b, _, h, w = x.shape
        return x.reshape(b, self.cfg.frames, 3, h, w).permute(0, 2, 1, 3, 4)

    def _unfold(self, x: torch.Tensor) -> torch.Tensor:
        if not self.cfg.temporal_3d:
            return x
        b, _, f, h, w = x.shape
        return x.permute(0, 2, 1, 3, 4).reshape(b, 3 * f, h, w)

    def velocity(
        self, x_t: torch.Tensor, t: torch.Tensor, d: torch.Tensor, cond: Conditioning
    ) -> torch.Tensor:
        if x_t.shape[1] != 3 * self.cfg.frames:
            raise ValueError(f"expected {3 * self.cfg.frames} channels, got {x_t.shape[1]}")
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        d = torch.as_tensor(d, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_t.shape[0])
        if d.numel() == 1:
            d = d.expand(x_t.shape[0])
        emb = self.t_embed(t) + self.d_embed(d) + self.c_proj(cond.c.to(x_t.dtype))
        h = self.stem(self._fold(x_t))
        h = h + self.cond_stem(self._fold_pair(cond))
        view = emb.shape + (1,) * (h.ndim - 2)
        h = h + emb.reshape(view)
        for block in self.blocks:
            h = block(h, emb)
        return self._unfold(self.head(h))

    def _fold_pair(self, cond: Conditioning) -> torch.Tensor:
        if not self.cfg.temporal_3d:
            return torch.cat([cond.x_deg, cond.x_bg], dim=1)
        return torch.cat([self._fold(cond.x_deg), self._fold(cond.x_bg)], dim=1)

    forward = velocity

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(cfg: ModelConfig, seed: int = 0) -> VelocityModel:
    """Deterministic construction; enforces the parameter budget.

    The trunk uses torch's default (small-variance) initialization; every
    conditioning portal starts at exactly zero, so the initial output is a
    function of x_t alone.
    """

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VelocityModel(cfg)
    count = model.parameter_count()
    if count > cfg.param_budget:
        raise ConfigError(
            f"model has {count} parameters, over the budget of {cfg.param_budget}"
        )
    return model


def predict_velocity(
    model: VelocityModel,
    x_t: torch.Tensor,
    x_deg: torch.Tensor,
    x_bg: torch.Tensor,
    t: torch.Tensor | float,
    d: torch.Tensor | float,
    c: torch.Tensor,
) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x_t.dtype)
    d = torch.as_tensor(d, dtype=x_t.dtype)
    return model.velocity(x_t, t, d, Conditioning(x_deg=x_deg, x_bg=x_bg, c=c))


def model_arch_hash(cfg: ModelConfig) -> str:
    key = (
        f"velocity-film:{cfg.frames}:{cfg.height}:{cfg.width}:{cfg.hidden}:"
        f"{cfg.blocks}:{cfg.emb_dim}:{cfg.cond_dim}:{cfg.temporal_3d}"
    )
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def save_model(path, model: VelocityModel, meta: dict) -> None:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta)
    meta["kind"] = "velocity_model"
    meta["model_config"] = {k: getattr(model.cfg, k) for k in (
        "frames", "height", "width", "hidden", "blocks", "emb_dim", "cond_dim",
        "param_budget", "temporal_3d")}
    meta["arch_hash"] = model_arch_hash(model.cfg)
    save_named_arrays(path, arrays, meta)


def load_model(path) -> tuple[VelocityModel, dict]:
    arrays, meta = load_named_arrays(path)
    if meta.get("kind") != "velocity_model":
        raise ValueError(f"{path} is not a velocity model checkpoint")
    cfg = ModelConfig(**meta["model_config"])
    model = VelocityModel(cfg)
    state = {
        k.removeprefix("model/"): torch.as_tensor(v)
        for k, v in arrays.items()
        if k.startswith("model/")
    }
    model.load_state_dict(state)
    return model, meta


# conversion helpers shared by the trainer and evaluators


def video_to_tensor(video: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(F, H, W, 3) -> (3F, H, W), frame-major channel stacking."""

    f, h, w, _ = video.shape
    t = torch.as_tensor(np.ascontiguousarray(video)).to(dtype)
    return t.permute(0, 3, 1, 2).reshape(3 * f, h, w)


def tensor_to_video(tensor: torch.Tensor, frames: int) -> torch.Tensor:
    """(3F, H, W) -> (F, H, W, 3); stays in torch so gradients can pass through."""

    c, h, w = tensor.shape
    if c != 3 * frames:
        raise ValueError(f"expected {3 * frames} channels, got {c}")
    return tensor.reshape(frames, 3, h, w).permute(0, 2, 3, 1)
