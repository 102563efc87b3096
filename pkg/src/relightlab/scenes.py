"""Synthetic Lambertian scene sampling, rendering, and relighting-pair construction.

Everything here is exact and seeded. Geometry (depth, normals, subject mask) is
an analytic function of the scene alone, so any two light programs rendered
over the same scene share bit-identical geometry. Shading is Lambertian with an
ambient floor, an exponential fog term, and a color-temperature gain:

    I = clip(albedo * gain(kelvin) * (ambient + intensity/1000 * max(0, n.l)) * exp(-fog * depth))

Light directions are unit vectors pointing from the surface toward the source;
the camera axis is +z (scene toward camera). Degraded variants come from
re-rendering the same scene under one of 15 canonical style x direction light
configurations, and background fill replaces background pixels with samples
matching the background's per-frame, per-channel mean and standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import Camera, ConfigError, SceneBounds

GEOMETRY_KINDS = ("sphere", "heightfield", "plane")
DYNAMICS_KINDS = ("static", "intensity_changing", "moving_source")
SOURCE_TYPES = ("natural", "artificial", "rendering")

# Piecewise-linear temperature -> RGB gain, anchored warm / neutral / cool.
# Constant extrapolation outside the anchor range (2000K and 8000..10000K).
GAIN_ANCHORS: tuple[tuple[float, tuple[float, float, float]], ...] = (
    (2000.0, (1.0, 0.72, 0.45)),
    (4500.0, (1.0, 1.0, 1.0)),
    (8000.0, (0.52, 0.78, 1.0)),
)

DEFAULT_CAMERA = Camera()


class EmptyBackgroundError(ValueError):
    """A frame's mask covers every pixel, so background statistics are undefined."""


class GeometryMismatchError(ValueError):
    """Real and degraded renders do not share the same geometry."""


def temperature_gain(kelvin: float) -> np.ndarray:
    """RGB gain for a color temperature, linear between anchors, clamped outside."""

    anchors = GAIN_ANCHORS
    if kelvin <= anchors[0][0]:
        return np.array(anchors[0][1], dtype=np.float64)
    for (k0, g0), (k1, g1) in zip(anchors, anchors[1:]):
        if kelvin <= k1:
            alpha = (kelvin - k0) / (k1 - k0)
            return (1.0 - alpha) * np.array(g0, dtype=np.float64) + alpha * np.array(g1, dtype=np.float64)
    return np.array(anchors[-1][1], dtype=np.float64)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LightSpec:
    """One frame of lighting. `direction` points from the surface toward the source."""

    direction: tuple[float, float, float]
    source_type: str
    intensity: float  # lumen-analog, > 0
    color_temperature: float  # Kelvin, in [2000, 10000]
    ambient: float  # >= 0

    def validate(self) -> None:
        norm = math.sqrt(sum(c * c for c in self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"light direction must be unit length, |d| = {norm!r}")
        if self.source_type not in SOURCE_TYPES:
            raise ValueError(f"unknown source_type: {self.source_type!r}")
        if not self.intensity > 0:
            raise ValueError(f"intensity must be > 0, got {self.intensity!r}")
        if not 2000.0 <= self.color_temperature <= 10000.0:
            raise ValueError(f"color_temperature out of [2000, 10000]: {self.color_temperature!r}")
        if self.ambient < 0:
            raise ValueError(f"ambient must be >= 0, got {self.ambient!r}")


@dataclass(frozen=True)
class LightProgram:
    """A per-frame lighting schedule with a declared dynamics kind."""

    frames: tuple[LightSpec, ...]
    dynamics: str

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if not self.frames:
            raise ValueError("light program needs at least one frame")
        for spec in self.frames:
            spec.validate()
        if self.dynamics not in DYNAMICS_KINDS:
            raise ValueError(f"unknown dynamics: {self.dynamics!r}")
        if len(self.frames) < 2:
            return
        first = self.frames[0]
        if self.dynamics == "static":
            if any(spec != first for spec in self.frames):
                raise ValueError("static program must repeat one LightSpec")
        elif self.dynamics == "intensity_changing":
            if any(spec.direction != first.direction for spec in self.frames):
                raise ValueError("intensity_changing program must keep direction fixed")
            intensities = [spec.intensity for spec in self.frames]
            increasing = all(b >= a for a, b in zip(intensities, intensities[1:]))
            decreasing = all(b <= a for a, b in zip(intensities, intensities[1:]))
            if not (increasing or decreasing):
                raise ValueError("intensity_changing program must be monotone in intensity")
        elif self.dynamics == "moving_source":
            if any(spec.intensity != first.intensity for spec in self.frames):
                raise ValueError("moving_source program must keep intensity fixed")
            if all(spec.direction == first.direction for spec in self.frames):
                raise ValueError("moving_source program must vary direction")


@dataclass(eq=False)
class SceneSpec:
    """Parametric scene: geometry, albedo texture, subject motion, volumetric flags.

    geometry_params layout by kind:
      sphere:      [radius, center_z]
      heightfield: [disk_radius, base_z, dome_height, ripple_amp, ripple_freq,
                    ripple_phase_x, ripple_phase_y]
      plane:       [half_size, center_z, tilt_x, tilt_y]
    """

    geometry_kind: str
    geometry_params: np.ndarray
    albedo_map: np.ndarray  # (H, W, 3) in [0, 1]
    subject_center_path: np.ndarray  # (frames, 2) world-unit (x, y) per frame
    fog_density: float
    mirror_flag: bool

    def validate(self, camera: Camera = DEFAULT_CAMERA) -> None:
        if self.geometry_kind not in GEOMETRY_KINDS:
            raise ValueError(f"unknown geometry kind: {self.geometry_kind!r}")
        if self.albedo_map.ndim != 3 or self.albedo_map.shape[2] != 3:
            raise ValueError(f"albedo_map must be (H, W, 3), got {self.albedo_map.shape}")
        if self.albedo_map.min() < 0 or self.albedo_map.max() > 1:
            raise ValueError("albedo_map values must lie in [0, 1]")
        if self.fog_density < 0:
            raise ValueError(f"fog_density must be >= 0, got {self.fog_density!r}")
        if self.subject_center_path.ndim != 2 or self.subject_center_path.shape[1] != 2:
            raise ValueError("subject_center_path must be (frames, 2)")
        h, w = self.albedo_map.shape[:2]
        scale = camera.pixel_scale(h, w)
        half_x, half_y = 0.5 * w * scale, 0.5 * h * scale
        extent = self.subject_extent()
        for cx, cy in self.subject_center_path:
            if abs(cx) + extent > half_x or abs(cy) + extent > half_y:
                raise ValueError("subject leaves the frame along its path")

    def subject_extent(self) -> float:
        p = self.geometry_params
        if self.geometry_kind == "sphere":
            return float(p[0])
        if self.geometry_kind == "heightfield":
            return float(p[0])
        return float(p[0]) * math.sqrt(2.0)


@dataclass(eq=False)
class RenderedSample:
    """One scene rendered under one light program, with exact geometry maps."""

    video: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (F, H, W) float32, camera-plane distance
    normals: np.ndarray  # (F, H, W, 3) float32, unit inside mask
    mask: np.ndarray  # (F, H, W) uint8, 1 on the subject

    def validate(self) -> None:
        f, h, w = self.mask.shape
        assert self.video.shape == (f, h, w, 3), self.video.shape
        assert self.depth.shape == (f, h, w), self.depth.shape
        assert self.normals.shape == (f, h, w, 3), self.normals.shape
        inside = self.mask.astype(bool)
        if inside.any():
            norms = np.linalg.norm(self.normals[inside], axis=-1)
            assert np.abs(norms - 1.0).max() <= 1e-6, "normals must be unit inside mask"
            assert self.depth[inside].min() > 0, "depth must be positive inside mask"
        assert self.video.min() >= 0.0 and self.video.max() <= 1.0


@dataclass(eq=False)
class TrainingTuple:
    """Supervised unit: (v_deg, v_bg, mask, label) -> v_real."""

    v_real: np.ndarray
    v_deg: np.ndarray
    v_bg: np.ndarray
    mask: np.ndarray
    label: "object"  # annotation.LightingLabel; kept loose to avoid an import cycle
    scene_id: str | None = None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cfg: SceneBounds) -> np.ndarray:
    """Low-frequency random albedo field: a coarse control grid, bilinearly upsampled."""

    cells = max(2, cfg.albedo_cells)
    lo, hi = cfg.albedo_range
    grid = rng.uniform(lo, hi, size=(cells, cells, 3))
    yi = np.linspace(0.0, cells - 1.0, h)
    xi = np.linspace(0.0, cells - 1.0, w)
    y0 = np.clip(np.floor(yi).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xi).astype(int), 0, cells - 2)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    tex = (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)
    return np.clip(tex, 0.0, 1.0)


def sample_scene(rng: np.random.Generator, cfg: SceneBounds) -> SceneSpec:
    """Draw a SceneSpec within bounds; pure function of (rng state, cfg)."""

    cfg.validate()
    kind = str(rng.choice(np.array(cfg.geometry_kinds, dtype=object)))
    if kind == "sphere":
        params = np.array([_uniform(rng, cfg.sphere_radius), _uniform(rng, cfg.sphere_center_z)])
    elif kind == "heightfield":
        params = np.array(
            [
                _uniform(rng, cfg.heightfield_radius),
                _uniform(rng, cfg.heightfield_base_z),
                _uniform(rng, cfg.heightfield_dome),
                _uniform(rng, cfg.heightfield_ripple_amp),
                _uniform(rng, cfg.heightfield_ripple_freq),
                float(rng.uniform(0.0, 2.0 * math.pi)),
                float(rng.uniform(0.0, 2.0 * math.pi)),
            ]
        )
    else:
        params = np.array(
            [
                _uniform(rng, cfg.plane_half_size),
                _uniform(rng, cfg.plane_center_z),
                _uniform(rng, cfg.plane_tilt),
                _uniform(rng, cfg.plane_tilt),
            ]
        )

    if cfg.albedo_mode == "constant":
        albedo = np.full((cfg.height, cfg.width, 3), cfg.albedo_constant, dtype=np.float64)
    else:
        albedo = _smooth_texture(rng, cfg.height, cfg.width, cfg)

    scale = cfg.camera.pixel_scale(cfg.height, cfg.width)
    half_x = 0.5 * cfg.width * scale
    half_y = 0.5 * cfg.height * scale
    extent = {"sphere": params[0], "heightfield": params[0], "plane": params[0] * math.sqrt(2.0)}[kind]
    slack_x = half_x - extent - cfg.edge_margin
    slack_y = half_y - extent - cfg.edge_margin
    if slack_x < 0 or slack_y < 0:
        raise ConfigError("subject bounds exceed the frame; shrink geometry or margins")
    start = np.array([rng.uniform(-slack_x, slack_x), rng.uniform(-slack_y, slack_y)])
    path = [start]
    for _ in range(cfg.frames - 1):
        step = rng.uniform(-cfg.max_step_per_frame, cfg.max_step_per_frame, size=2)
        nxt = np.clip(path[-1] + step, [-slack_x, -slack_y], [slack_x, slack_y])
        path.append(nxt)

    fog = 0.0 if rng.random() < cfg.fog_clear_prob else _uniform(rng, cfg.fog_density)
    mirror = bool(rng.random() < cfg.mirror_prob)

    spec = SceneSpec(
        geometry_kind=kind,
        geometry_params=params,
        albedo_map=albedo,
        subject_center_path=np.stack(path),
        fog_density=fog,
        mirror_flag=mirror,
    )
    spec.validate(cfg.camera)
    return spec


def sample_direction(rng: np.random.Generator, cfg: SceneBounds) -> np.ndarray:
    """Unit surface-to-source direction: the prior mean jittered by a Gaussian."""

    mean = np.array(cfg.direction_mean, dtype=np.float64)
    mean = mean / np.linalg.norm(mean)
    vec = mean + cfg.direction_spread * rng.standard_normal(3)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return mean
    return vec / norm


def _unit_tuple(vec: np.ndarray) -> tuple[float, float, float]:
    vec = np.asarray(vec, dtype=np.float64)
    vec = vec / np.linalg.norm(vec)
    return (float(vec[0]), float(vec[1]), float(vec[2]))


def _slerp(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    theta = math.acos(dot)
    if theta < 1e-9:
        return a
    return (math.sin((1 - alpha) * theta) * a + math.sin(alpha * theta) * b) / math.sin(theta)


def sample_light_program(rng: np.random.Generator, cfg: SceneBounds, n_frames: int) -> LightProgram:
    """Draw a light program with n_frames per-frame specs.

    Source type, color temperature, and ambient are held constant across
    frames; dynamics only ever touch intensity (intensity_changing) or
    direction (moving_source). With a single frame every program is static.
    """

    if n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {n_frames}")
    cfg.validate()
    kinds = cfg.dynamics_kinds if n_frames >= 2 else ("static",)
    dynamics = str(rng.choice(np.array(kinds, dtype=object)))
    source = str(rng.choice(np.array(cfg.source_types, dtype=object)))
    temperature = _uniform(rng, cfg.temperature_range)
    ambient = _uniform(rng, cfg.ambient_range)
    lo_i, hi_i = cfg.intensity_range

    def log_uniform() -> float:
        return float(math.exp(rng.uniform(math.log(lo_i), math.log(hi_i))))

    if dynamics == "static":
        spec = LightSpec(
            direction=_unit_tuple(sample_direction(rng, cfg)),
            source_type=source,
            intensity=log_uniform(),
            color_temperature=temperature,
            ambient=ambient,
        )
        frames = (spec,) * n_frames
    elif dynamics == "intensity_changing":
        direction = _unit_tuple(sample_direction(rng, cfg))
        i0 = log_uniform()
        swing = cfg.intensity_change_min_rel
        i1 = min(hi_i, i0 * (1.0 + swing + rng.uniform(0.0, swing)))
        if i1 / i0 < 1.0 + swing:  # i0 too close to the top of the range; go down instead
            i1 = max(lo_i, i0 / (1.0 + swing + rng.uniform(0.0, swing)))
        if rng.random() < 0.5:
            i0, i1 = i1, i0
        values = np.linspace(i0, i1, n_frames)
        frames = tuple(
            LightSpec(direction, source, float(v), temperature, ambient) for v in values
        )
    else:  # moving_source
        d0 = sample_direction(rng, cfg)
        axis = rng.standard_normal(3)
        axis -= d0 * np.dot(axis, d0)
        norm = np.linalg.norm(axis)
        axis = np.array([0.0, 1.0, 0.0]) if norm < 1e-9 else axis / norm
        angle = math.radians(_uniform(rng, cfg.move_angle_deg))
        d1 = math.cos(angle) * d0 + math.sin(angle) * axis
        intensity = log_uniform()
        frames = tuple(
            LightSpec(
                _unit_tuple(_slerp(d0, d1, i / max(1, n_frames - 1))),
                source,
                intensity,
                temperature,
                ambient,
            )
            for i in range(n_frames)
        )
    program = LightProgram(frames=frames, dynamics=dynamics)
    program.validate()
    return program


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _pixel_coords(h: int, w: int, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    scale = camera.pixel_scale(h, w)
    x = (np.arange(w) - (w - 1) / 2.0) * scale
    y = ((h - 1) / 2.0 - np.arange(h)) * scale
    return np.meshgrid(x, y)  # both (H, W); y decreases with row index


def _frame_geometry(
    spec: SceneSpec, center: np.ndarray, h: int, w: int, camera: Camera
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic (depth, normals, mask) for one frame. Background is the z=0 plane."""

    xx, yy = _pixel_coords(h, w, camera)
    dx = xx - center[0]
    dy = yy - center[1]
    p = spec.geometry_params

    z_surf = np.zeros((h, w))
    normals = np.zeros((h, w, 3))
    normals[..., 2] = 1.0

    if spec.geometry_kind == "sphere":
        radius, cz = float(p[0]), float(p[1])
        rho2 = dx * dx + dy * dy
        mask = rho2 <= radius * radius
        bump = np.sqrt(np.maximum(radius * radius - rho2, 0.0))
        z_surf[mask] = cz + bump[mask]
        normals[mask, 0] = dx[mask] / radius
        normals[mask, 1] = dy[mask] / radius
        normals[mask, 2] = bump[mask] / radius
    elif spec.geometry_kind == "heightfield":
        disk_r, base_z, dome, ramp, freq, phx, phy_ = (float(v) for v in p)
        rho = np.sqrt(dx * dx + dy * dy)
        mask = rho <= disk_r
        dome_term = dome * np.cos(0.5 * math.pi * np.minimum(rho / disk_r, 1.0))
        wx = 2.0 * math.pi * freq
        ripple = ramp * np.sin(wx * dx + phx) * np.sin(wx * dy + phy_)
        z_surf[mask] = (base_z + dome_term + ripple)[mask]
        # analytic partials; the radial dome term vanishes at rho = 0
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = -dome * 0.5 * math.pi / disk_r * np.sin(0.5 * math.pi * np.minimum(rho / disk_r, 1.0))
            gx_dome = np.where(rho > 1e-12, radial * dx / np.maximum(rho, 1e-12), 0.0)
            gy_dome = np.where(rho > 1e-12, radial * dy / np.maximum(rho, 1e-12), 0.0)
        gx = gx_dome + ramp * wx * np.cos(wx * dx + phx) * np.sin(wx * dy + phy_)
        gy = gy_dome + ramp * wx * np.sin(wx * dx + phx) * np.cos(wx * dy + phy_)
        denom = np.sqrt(gx * gx + gy * gy + 1.0)
        normals[mask, 0] = (-gx / denom)[mask]
        normals[mask, 1] = (-gy / denom)[mask]
        normals[mask, 2] = (1.0 / denom)[mask]
    else:  # plane
        half, cz, tx, ty = (float(v) for v in p)
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        n = np.array([-tx, -ty, 1.0])
        n /= np.linalg.norm(n)
        # plane through (cx, cy, cz) with normal n: z = cz - (n_x dx + n_y dy) / n_z
        z_surf[mask] = (cz - (n[0] * dx + n[1] * dy) / n[2])[mask]
        normals[mask] = n

    depth = np.where(mask, camera.distance - z_surf, camera.distance)
    if depth[mask].size and depth[mask].min() <= 0:
        raise ValueError("subject geometry crosses the camera plane")
    return depth, normals, mask


def scene_geometry(
    spec: SceneSpec, n_frames: int, camera: Camera = DEFAULT_CAMERA
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame (depth, normals, mask) stacks in float32/uint8, light-independent."""

    h, w = spec.albedo_map.shape[:2]
    if spec.subject_center_path.shape[0] < n_frames:
        raise ValueError(
            f"subject path has {spec.subject_center_path.shape[0]} positions, need {n_frames}"
        )
    depths, normals, masks = [], [], []
    for f in range(n_frames):
        d, n, m = _frame_geometry(spec, spec.subject_center_path[f], h, w, camera)
        depths.append(d)
        normals.append(n)
        masks.append(m)
    return (
        np.stack(depths).astype(np.float32),
        np.stack(normals).astype(np.float32),
        np.stack(masks).astype(np.uint8),
    )


def render(spec: SceneSpec, program: LightProgram, camera: Camera = DEFAULT_CAMERA) -> RenderedSample:
    """Shade the scene under the program. Depth/normals depend on the scene only."""

    program.validate()
    spec.validate(camera)
    n_frames = len(program.frames)
    depth32, normals32, mask32 = scene_geometry(spec, n_frames, camera)
    albedo = spec.albedo_map.astype(np.float64)

    frames = []
    for f, light in enumerate(program.frames):
        depth = depth32[f].astype(np.float64)
        normals = normals32[f].astype(np.float64)
        l = np.array(light.direction, dtype=np.float64)
        lambert = np.maximum(normals @ l, 0.0)
        gain = temperature_gain(light.color_temperature)
        shade = light.ambient + (light.intensity / 1000.0) * lambert
        fog = np.exp(-spec.fog_density * depth)
        img = albedo * gain[None, None, :] * shade[..., None] * fog[..., None]
        frames.append(np.clip(img, 0.0, 1.0))

    sample = RenderedSample(
        video=np.stack(frames).astype(np.float32),
        depth=depth32,
        normals=normals32,
        mask=mask32,
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

# 5 lighting style presets x 3 canonical directions = 15 degradation configs.
# Deliberately far from the real-program prior so degraded subjects differ hard.
DEGRADATION_STYLES: tuple[tuple[str, str, float, float, float], ...] = (
    ("warm indoor dim", "artificial", 110.0, 2600.0, 0.10),
    ("neutral studio", "artificial", 600.0, 4600.0, 0.12),
    ("cool daylight bright", "natural", 950.0, 7500.0, 0.25),
    ("warm sunset glare", "natural", 1350.0, 2300.0, 0.05),
    ("cool render dim", "rendering", 80.0, 9000.0, 0.30),
)

DEGRADATION_DIRECTIONS: tuple[tuple[str, tuple[float, float, float]], ...] = (
    ("left", _unit_tuple(np.array([-0.77, 0.0, 0.64]))),
    ("right", _unit_tuple(np.array([0.77, 0.0, 0.64]))),
    ("top", _unit_tuple(np.array([0.0, 0.77, 0.64]))),
)


def degradation_pool(n_frames: int) -> tuple[LightProgram, ...]:
    """The 15 static degradation programs, in a fixed (style-major) order."""

    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    pool = []
    for _, source, intensity, kelvin, ambient in DEGRADATION_STYLES:
        for _, direction in DEGRADATION_DIRECTIONS:
            spec = LightSpec(direction, source, intensity, kelvin, ambient)
            pool.append(LightProgram(frames=(spec,) * n_frames, dynamics="static"))
    return tuple(pool)


def degrade(
    spec: SceneSpec,
    rng: np.random.Generator,
    n_frames: int,
    avoid: LightProgram | None = None,
) -> LightProgram:
    """Draw one of the scene's 15 degradation programs uniformly.

    If the draw would reproduce `avoid` (the real program), the next pool entry
    is used so the degradation always differs in at least one attribute.
    """

    pool = degradation_pool(n_frames)
    if not pool:
        raise ConfigError("degradation pool is empty")
    index = int(rng.integers(0, len(pool)))
    if avoid is not None and pool[index].frames == avoid.frames:
        index = (index + 1) % len(pool)
    return pool[index]


# ---------------------------------------------------------------------------
# background fill and tuple assembly
# ---------------------------------------------------------------------------


def background_statistics(video: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame, per-channel mean and population std over background pixels."""

    n_frames = video.shape[0]
    mu = np.zeros((n_frames, 3))
    sigma = np.zeros((n_frames, 3))
    for f in range(n_frames):
        bg = mask[f] == 0
        if not bg.any():
            raise EmptyBackgroundError(f"frame {f} has no background pixels")
        pixels = video[f][bg].astype(np.float64)
        mu[f] = pixels.mean(axis=0)
        sigma[f] = pixels.std(axis=0)
    return mu, sigma


def gaussian_background_fill(
    video: np.ndarray,
    mask: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Replace background pixels with draws matching the background's statistics.

    gaussian mode samples N(mu, sigma^2) per frame and channel; pure mode fills
    the exact mean. Subject pixels pass through untouched; filled values are
    clipped to [0, 1]. Draw order is frame-major then channel-major, so the
    output is a pure function of (video, mask, mode, seed).
    """

    if mode not in ("gaussian", "pure"):
        raise ConfigError(f"unknown fill mode: {mode!r}")
    if mode == "gaussian" and rng is None:
        raise ConfigError("gaussian fill mode needs an rng")
    mu, sigma = background_statistics(video, mask)
    out = video.copy()
    for f in range(video.shape[0]):
        bg = mask[f] == 0
        count = int(bg.sum())
        for c in range(3):
            if mode == "pure":
                values = np.full(count, mu[f, c])
            else:
                values = rng.normal(mu[f, c], sigma[f, c], size=count)
            out[f][bg, c] = np.clip(values, 0.0, 1.0).astype(out.dtype)
    return out


def build_tuple(
    real: RenderedSample,
    deg: RenderedSample,
    label: "object",
    mode: str,
    rng: np.random.Generator | None = None,
    scene_id: str | None = None,
) -> TrainingTuple:
    """Assemble (v_deg, v_bg, mask, label) -> v_real from paired renders.

    v_deg carries the degraded subject over the real background; v_bg is the
    real video with its background replaced by the statistical fill.
    """

    if not np.array_equal(real.mask, deg.mask):
        raise GeometryMismatchError("real and degraded renders have different masks")
    mask3 = real.mask.astype(bool)[..., None]
    v_deg = np.where(mask3, deg.video, real.video)
    v_bg = gaussian_background_fill(real.video, real.mask, mode, rng)
    return TrainingTuple(
        v_real=real.video,
        v_deg=v_deg.astype(np.float32),
        v_bg=v_bg.astype(np.float32),
        mask=real.mask,
        label=label,
        scene_id=scene_id,
    )


def composite_degraded(real: RenderedSample, deg: RenderedSample) -> np.ndarray:
    """Degraded subject over the real background (the v_deg composition rule)."""

    if not np.array_equal(real.mask, deg.mask):
        raise GeometryMismatchError("real and degraded renders have different masks")
    mask3 = real.mask.astype(bool)[..., None]
    return np.where(mask3, deg.video, real.video).astype(np.float32)
