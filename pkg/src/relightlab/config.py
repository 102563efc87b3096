"""Dataclass configs for every stage, plus the flat key=value run-config format.

Config precedence everywhere is: dataclass defaults < config file < command-line
flags. The fully resolved config is echoed to disk before a command does any
work, so a run can always be reproduced from its output directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_FILE_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration value, bounds, or config file."""


@dataclass
class Camera:
    """Orthographic camera looking along -z from z=distance toward the z=0 background plane.

    World frame: x right, y up, z toward the camera. Depth is distance from the
    camera plane and is always positive. One scene unit spans
    min(H, W) / frame_extent pixels.
    """

    distance: float = 4.0
    frame_extent: float = 3.2

    def pixel_scale(self, height: int, width: int) -> float:
        return self.frame_extent / min(height, width)


@dataclass
class SceneBounds:
    """Sampling bounds for synthetic scenes and their light programs."""

    height: int = 32
    width: int = 32
    frames: int = 5  # video length, including the initial frame
    camera: Camera = field(default_factory=Camera)

    geometry_kinds: tuple[str, ...] = ("sphere", "heightfield", "plane")
    sphere_radius: tuple[float, float] = (0.6, 1.05)
    sphere_center_z: tuple[float, float] = (1.2, 1.9)
    heightfield_radius: tuple[float, float] = (0.7, 1.2)
    heightfield_base_z: tuple[float, float] = (0.8, 1.2)
    heightfield_dome: tuple[float, float] = (0.25, 0.6)
    heightfield_ripple_amp: tuple[float, float] = (0.0, 0.12)
    heightfield_ripple_freq: tuple[float, float] = (1.5, 3.0)
    plane_half_size: tuple[float, float] = (0.55, 1.0)
    plane_center_z: tuple[float, float] = (1.0, 1.6)
    plane_tilt: tuple[float, float] = (-0.55, 0.55)

    max_step_per_frame: float = 0.06  # subject motion, scene units
    edge_margin: float = 0.05

    albedo_mode: str = "texture"  # "texture" | "constant"
    albedo_range: tuple[float, float] = (0.35, 0.95)
    albedo_constant: float = 1.0
    albedo_cells: int = 4  # control-grid resolution of the smooth texture

    fog_clear_prob: float = 0.5
    fog_density: tuple[float, float] = (0.05, 0.22)
    mirror_prob: float = 0.25

    # light sampling
    direction_mean: tuple[float, float, float] = (0.0, 0.0, 1.0)
    direction_spread: float = 0.8
    intensity_range: tuple[float, float] = (80.0, 1400.0)  # lumen-analog, log-uniform
    temperature_range: tuple[float, float] = (2000.0, 10000.0)
    ambient_range: tuple[float, float] = (0.05, 0.35)
    source_types: tuple[str, ...] = ("natural", "artificial", "rendering")
    dynamics_kinds: tuple[str, ...] = ("static", "intensity_changing", "moving_source")
    intensity_change_min_rel: float = 0.3  # min relative swing for intensity_changing
    move_angle_deg: tuple[float, float] = (20.0, 70.0)

    def validate(self) -> None:
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"frame size too small: {self.height}x{self.width}")
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if not self.geometry_kinds:
            raise ConfigError("geometry_kinds must be non-empty")
        for kind in self.geometry_kinds:
            if kind not in ("sphere", "heightfield", "plane"):
                raise ConfigError(f"unknown geometry kind: {kind!r}")
        for name in (
            "sphere_radius",
            "sphere_center_z",
            "heightfield_radius",
            "heightfield_base_z",
            "heightfield_dome",
            "heightfield_ripple_amp",
            "heightfield_ripple_freq",
            "plane_half_size",
            "plane_center_z",
            "plane_tilt",
            "intensity_range",
            "temperature_range",
            "ambient_range",
            "fog_density",
            "move_angle_deg",
            "albedo_range",
        ):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ConfigError(f"{name} bounds out of order: ({lo}, {hi})")
        if self.intensity_range[0] <= 0:
            raise ConfigError("intensity must stay positive")
        if not (2000.0 <= self.temperature_range[0] <= self.temperature_range[1] <= 10000.0):
            raise ConfigError("temperature_range must lie within [2000, 10000] K")
        if self.albedo_mode not in ("texture", "constant"):
            raise ConfigError(f"unknown albedo_mode: {self.albedo_mode!r}")
        if not self.dynamics_kinds:
            raise ConfigError("dynamics_kinds must be non-empty")
        for kind in self.dynamics_kinds:
            if kind not in ("static", "intensity_changing", "moving_source"):
                raise ConfigError(f"unknown dynamics kind: {kind!r}")


@dataclass
class DataConfig:
    """Dataset generation: scenes, degradations, and background fill."""

    n_samples: int = 64
    programs_per_scene: int = 1
    fill_mode: str = "gaussian"  # "gaussian" | "pure"
    bounds: SceneBounds = field(default_factory=SceneBounds)

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.programs_per_scene < 1:
            raise ConfigError("programs_per_scene must be >= 1")
        if self.fill_mode not in ("gaussian", "pure"):
            raise ConfigError(f"unknown fill_mode: {self.fill_mode!r}")
        self.bounds.validate()


@dataclass
class EstimatorConfig:
    """Training the frozen RGB -> (depth, normals) regressor.

    batch_size counts appearance-variant pairs; every step sees 2x that many
    frames, with an output-consistency penalty across each pair.
    """

    channels: int = 32
    iterations: int = 2600
    batch_size: int = 8
    learning_rate: float = 3e-3
    learning_rate_min: float = 3e-4
    val_fraction: float = 0.2
    max_rel_depth_error: float = 0.15
    max_normal_angle_deg: float = 15.0
    enforce_thresholds: bool = True
    normal_weight: float = 3.0
    cosine_weight: float = 1.0
    background_weight: float = 0.1
    invariance_weight: float = 6.0
    seed: int = 0


@dataclass
class ModelConfig:
    """Velocity network: conv trunk plus zero-initialized conditioning portals."""

    frames: int = 5
    height: int = 32
    width: int = 32
    hidden: int = 64
    blocks: int = 4
    emb_dim: int = 32
    cond_dim: int = 23
    param_budget: int = 500_000
    temporal_3d: bool = False  # 3D convolutions over (frame, H, W) instead of channel stacking


@dataclass
class TrainConfig:
    """Joint objective weights and loop settings.

    The reference-scale defaults (lr 1e-5, batch 8, 5000 iterations) are kept as
    documentation; desk-scale runs override lr and iterations.
    """

    lambda0: float = 1.0
    lambda_fast: float = 0.1
    lambda_phy: float = 0.1
    learning_rate: float = 1e-5
    learning_rate_min: float = 0.0  # > 0 enables cosine decay toward this floor
    batch_size: int = 8
    iterations: int = 5000
    seed: int = 0
    fast_fraction: float = 0.20
    phy_fraction_of_flow: float = 0.50
    k_max: int = 7
    eval_every: int = 0  # 0 disables
    checkpoint_every: int = 0  # 0 = final only
    phy_sample_steps: int = 4
    time_mu: float = 0.0
    time_sigma: float = 1.0
    augment: bool = False
    disable_fast: bool = False
    disable_phy: bool = False
    use_depth: bool = True
    use_normal: bool = True
    norm_scope: str = "per_frame"  # "per_frame" | "global"
    dtype: str = "float32"
    deterministic: bool = True

    def validate(self) -> None:
        for name in ("lambda0", "lambda_fast", "lambda_phy"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("fast_fraction", "phy_fraction_of_flow"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.phy_sample_steps < 1 or self.phy_sample_steps & (self.phy_sample_steps - 1):
            raise ConfigError("phy_sample_steps must be a power of two")
        if self.norm_scope not in ("per_frame", "global"):
            raise ConfigError(f"unknown norm_scope: {self.norm_scope!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown dtype: {self.dtype!r}")


@dataclass
class BenchConfig:
    """Attribute-controllability benchmark generation and scoring."""

    n_per_attribute: int = 60
    sample_steps: int = 16
    bounds: SceneBounds = field(default_factory=SceneBounds)
    bootstrap_resamples: int = 1000
    seed: int = 0


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    text = raw.strip()
    origin = getattr(annotation, "__origin__", None)
    if annotation is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    if origin is tuple:
        args = annotation.__args__
        items = [part.strip() for part in text.split(",") if part.strip()]
        elem = args[0]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(item, elem, key) for item in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(items)}")
        return tuple(_coerce(item, arg, key) for item, arg in zip(items, args))
    raise ConfigError(f"{key}: unsupported config field type {annotation!r}")


def _annotation_of(obj: Any, name: str) -> Any:
    import typing

    hints = typing.get_type_hints(type(obj))
    return hints[name]


def flatten_config(obj: Any, prefix: str = "") -> dict[str, str]:
    """Flatten a (possibly nested) dataclass into dotted key=value strings."""

    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten_config(value, prefix=f"{key}."))
        elif isinstance(value, tuple):
            out[key] = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            out[key] = repr(value)
        else:
            out[key] = str(value)
    return out


def apply_flat(obj: Any, mapping: dict[str, str], prefix: str = "") -> set[str]:
    """Apply dotted key=value overrides onto a dataclass tree; returns consumed keys."""

    consumed: set[str] = set()
    for f in dataclasses.fields(obj):
        key = f"{prefix}{f.name}"
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            consumed |= apply_flat(value, mapping, prefix=f"{key}.")
        elif key in mapping:
            annotation = _annotation_of(obj, f.name)
            setattr(obj, f.name, _coerce(mapping[key], annotation, key))
            consumed.add(key)
    return consumed


def parse_flat_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""

    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in mapping:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def load_flat_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    mapping = parse_flat_text(text, source=str(path))
    version = mapping.pop("config_version", str(CONFIG_FILE_VERSION))
    if int(version) != CONFIG_FILE_VERSION:
        raise ConfigError(f"{path}: unsupported config_version {version}")
    return mapping


def render_flat(mapping: dict[str, str], header: str = "") -> str:
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append(f"config_version = {CONFIG_FILE_VERSION}")
    for key in sorted(mapping):
        lines.append(f"{key} = {mapping[key]}")
    return "\n".join(lines) + "\n"
