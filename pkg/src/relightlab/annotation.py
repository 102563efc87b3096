"""Six-attribute lighting labels: rule-based labeling, one-hot encoding, and a
closed-form inverse-Lambertian classifier that recovers the same attributes
from rendered pixels.

The classifier solves, per frame and channel, a least-squares system for the
ambient term and the directional term of the shading model (undoing fog with
the known depth map), then applies exactly the same threshold rules as the
program-based labeler. Light source type and the mirror flag are scene
metadata that a Lambertian image cannot reveal; the classifier echoes declared
values for those two inputs, which is a documented limitation.

Threshold conventions (boundary value belongs to the range that starts there):
  intensity   dim < 200 lm; moderate 200..1000 lm inclusive; glare > 1000 lm
  temperature warm [2000, 4000) K; neutral [4000, 5000) K; cool [5000, 10000] K
Direction sectors use the angle between the dominant surface-to-source vector
and the +z camera axis: front < 30 deg, back > 150 deg; "split" when the
masked image's left/right mean-intensity ratio exceeds 3; "ambient" when the
peak diffuse contribution is below a quarter of the ambient term; otherwise
the dominant lateral component picks side / top / bottom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .scenes import (
    GAIN_ANCHORS,
    LightProgram,
    RenderedSample,
    SceneSpec,
    temperature_gain,
)

DIRECTIONS = ("front", "side", "back", "top", "bottom", "split", "ambient")
SOURCE_TYPES = ("natural", "artificial", "rendering")
INTENSITIES = ("glare", "moderate", "dim")
TEMPERATURES = ("cool", "neutral", "warm")
TEMPORALS = ("static", "dynamic_intensity", "dynamic_moving")
OPTICALS = ("transmission", "refraction_reflection", "scattering", "none")

_BLOCKS = (
    ("direction", DIRECTIONS),
    ("source_type", SOURCE_TYPES),
    ("intensity", INTENSITIES),
    ("color_temperature", TEMPERATURES),
    ("temporal", TEMPORALS),
    ("optical", OPTICALS),
)

ENCODING_LENGTH = sum(len(values) for _, values in _BLOCKS)  # 23

# sector / rule constants
FRONT_MAX_DEG = 30.0
BACK_MIN_DEG = 150.0
SPLIT_RATIO = 3.0
AMBIENT_FACTOR = 0.25
FOG_EPS = 0.01
SATURATION_LEVEL = 0.999
DRIFT_MIN_DEG = 5.0
INTENSITY_VAR_MIN_REL = 0.05

_JSON_KEYS = {
    "direction": "Direction of Light",
    "source_type": "Light Source Type",
    "intensity": "Light Intensity",
    "color_temperature": "Color Temperature",
    "temporal": "Light Changes in Time",
    "optical": "Optical Phenomena",
}

_JSON_VALUES = {
    "direction": {
        "front": "Front Light",
        "side": "Side Light",
        "back": "Back Light",
        "top": "Top Light",
        "bottom": "Bottom Light",
        "split": "Split Light",
        "ambient": "Ambient Light Without Clear Direction",
    },
    "source_type": {
        "natural": "Natural Light",
        "artificial": "Artificial Light",
        "rendering": "Rendering Light",
    },
    "intensity": {"glare": "Glare", "moderate": "Moderate", "dim": "Dim"},
    "color_temperature": {"cool": "Cool Tone", "neutral": "Neutral", "warm": "Warm Tone"},
    "temporal": {
        "static": "Static Light",
        "dynamic_intensity": "Dynamic Light (Intensity Changing)",
        "dynamic_moving": "Dynamic Light (Moving Source)",
    },
    "optical": {
        "transmission": "Transmission (Glass)",
        "refraction_reflection": "Refraction/Reflection (Water Surface, Mirror)",
        "scattering": "Scattering (Fog Effect)",
        "none": "None",
    },
}

_JSON_VALUES_INV = {
    attr: {v: k for k, v in values.items()} for attr, values in _JSON_VALUES.items()
}


class DegenerateGeometryError(ValueError):
    """Too few distinct normals for the inverse shading system to be full rank."""


@dataclass(frozen=True)
class LightingLabel:
    """One value per attribute; category counts are 7/3/3/3/3/4."""

    direction: str
    source_type: str
    intensity: str
    color_temperature: str
    temporal: str
    optical: str

    def __post_init__(self) -> None:
        for attr, values in _BLOCKS:
            if getattr(self, attr) not in values:
                raise ValueError(f"invalid {attr}: {getattr(self, attr)!r}")

    def to_json_dict(self) -> dict[str, str]:
        return {
            _JSON_KEYS[attr]: _JSON_VALUES[attr][getattr(self, attr)] for attr, _ in _BLOCKS
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, str]) -> "LightingLabel":
        kwargs = {}
        for attr, _ in _BLOCKS:
            key = _JSON_KEYS[attr]
            if key not in data:
                raise ValueError(f"label JSON missing key {key!r}")
            kwargs[attr] = _JSON_VALUES_INV[attr][data[key]]
        return cls(**kwargs)


ATTRIBUTES = tuple(attr for attr, _ in _BLOCKS)
ATTRIBUTE_VALUES = {attr: values for attr, values in _BLOCKS}


def all_labels() -> list[LightingLabel]:
    """The full 7*3*3*3*3*4 = 2268 label product space."""

    import itertools

    out = []
    for combo in itertools.product(*(values for _, values in _BLOCKS)):
        out.append(LightingLabel(*combo))
    return out


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def encode_label(label: LightingLabel) -> np.ndarray:
    """Concatenated one-hot blocks, length 23, in the fixed attribute order."""

    parts = []
    for attr, values in _BLOCKS:
        block = np.zeros(len(values))
        block[values.index(getattr(label, attr))] = 1.0
        parts.append(block)
    return np.concatenate(parts)


def decode_label(vector: np.ndarray) -> LightingLabel:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (ENCODING_LENGTH,):
        raise ValueError(f"expected a length-{ENCODING_LENGTH} vector, got {vector.shape}")
    kwargs = {}
    offset = 0
    for attr, values in _BLOCKS:
        block = vector[offset : offset + len(values)]
        offset += len(values)
        if not np.all((block == 0.0) | (block == 1.0)) or block.sum() != 1.0:
            raise ValueError(f"{attr} block is not one-hot: {block}")
        kwargs[attr] = values[int(np.argmax(block))]
    return LightingLabel(**kwargs)


# ---------------------------------------------------------------------------
# threshold rules (shared by labeler and classifier)
# ---------------------------------------------------------------------------


def classify_intensity(lumens: float) -> str:
    if lumens < 200.0:
        return "dim"
    if lumens <= 1000.0:
        return "moderate"
    return "glare"


def classify_temperature(kelvin: float) -> str:
    if kelvin < 4000.0:
        return "warm"
    if kelvin < 5000.0:
        return "neutral"
    return "cool"


def _split_ratio(video: np.ndarray, mask: np.ndarray) -> float:
    """Mean over frames of the left/right masked mean-luminance ratio (>= 1)."""

    ratios = []
    for f in range(video.shape[0]):
        inside = mask[f].astype(bool)
        if not inside.any():
            continue
        cols = np.nonzero(inside)[1]
        centroid = cols.mean()
        luminance = video[f].mean(axis=-1)
        left = inside & (np.arange(mask.shape[2])[None, :] < centroid)
        right = inside & (np.arange(mask.shape[2])[None, :] >= centroid)
        if not left.any() or not right.any():
            continue
        lm = float(luminance[left].mean())
        rm = float(luminance[right].mean())
        ratios.append((max(lm, rm) + 1e-9) / (min(lm, rm) + 1e-9))
    return float(np.mean(ratios)) if ratios else 1.0


def classify_direction(
    dominant: np.ndarray,
    intensity_scaled: float,
    ambient: float,
    normals: np.ndarray,
    mask: np.ndarray,
    video: np.ndarray,
) -> str:
    """Sector rules over the dominant surface-to-source direction (camera axis +z)."""

    inside = mask.astype(bool)
    if inside.any():
        lambert = np.maximum(np.einsum("fhwc,c->fhw", normals.astype(np.float64), dominant), 0.0)
        diffuse_peak = intensity_scaled * float(lambert[inside].max())
    else:
        diffuse_peak = 0.0
    if diffuse_peak < AMBIENT_FACTOR * ambient:
        return "ambient"
    theta = math.degrees(math.acos(float(np.clip(dominant[2], -1.0, 1.0))))
    if theta < FRONT_MAX_DEG:
        return "front"
    if theta > BACK_MIN_DEG:
        return "back"
    if _split_ratio(video, mask) > SPLIT_RATIO:
        return "split"
    if abs(dominant[0]) >= abs(dominant[1]):
        return "side"
    return "top" if dominant[1] > 0 else "bottom"


def _classify_temporal(directions: np.ndarray, intensities: np.ndarray) -> str:
    if len(intensities) < 2:
        return "static"
    d0 = directions[0]
    cosines = np.clip(directions @ d0, -1.0, 1.0)
    drift = math.degrees(float(np.arccos(cosines).max()))
    mean_i = float(np.mean(intensities))
    swing = (float(intensities.max()) - float(intensities.min())) / max(mean_i, 1e-9)
    if drift >= DRIFT_MIN_DEG:
        return "dynamic_moving"
    if swing >= INTENSITY_VAR_MIN_REL:
        return "dynamic_intensity"
    return "static"


# ---------------------------------------------------------------------------
# rule-based labeler
# ---------------------------------------------------------------------------


def label_from_program(
    program: LightProgram, spec: SceneSpec, geometry: RenderedSample
) -> LightingLabel:
    """Deterministic label from the generating program, scene, and its render."""

    if not program.frames:
        raise ValueError("program has no frames")
    directions = np.array([f.direction for f in program.frames], dtype=np.float64)
    intensities = np.array([f.intensity for f in program.frames], dtype=np.float64)
    ambients = np.array([f.ambient for f in program.frames], dtype=np.float64)
    kelvins = np.array([f.color_temperature for f in program.frames], dtype=np.float64)

    dominant = directions.mean(axis=0)
    norm = np.linalg.norm(dominant)
    dominant = directions[0] if norm < 1e-12 else dominant / norm

    temporal_map = {
        "static": "static",
        "intensity_changing": "dynamic_intensity",
        "moving_source": "dynamic_moving",
    }

    if spec.fog_density > FOG_EPS:
        optical = "scattering"
    elif spec.mirror_flag:
        optical = "refraction_reflection"
    else:
        optical = "none"

    return LightingLabel(
        direction=classify_direction(
            dominant,
            float(intensities.mean()) / 1000.0,
            float(ambients.mean()),
            geometry.normals,
            geometry.mask,
            geometry.video,
        ),
        source_type=program.frames[0].source_type,
        intensity=classify_intensity(float(intensities.mean())),
        color_temperature=classify_temperature(float(kelvins.mean())),
        temporal=temporal_map[program.dynamics],
        optical=optical,
    )


# ---------------------------------------------------------------------------
# inverse-Lambertian classifier
# ---------------------------------------------------------------------------


def invert_temperature_gain(q: np.ndarray) -> float:
    """Temperature whose gain direction best matches q (closed form per segment).

    Along each linear gain segment g(a) = g0 + a*(g1 - g0), the stationary point
    of <q, g(a)>/|g(a)| is linear in a, so each segment is solved exactly.
    Above the last anchor the gain is constant, so 8000..10000 K all map to the
    anchor; classification is unaffected because that whole range is cool.
    """

    q = np.asarray(q, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn < 1e-12:
        return 4500.0
    q = q / qn
    best_cos, best_kelvin = -np.inf, 4500.0
    for (k0, g0t), (k1, g1t) in zip(GAIN_ANCHORS, GAIN_ANCHORS[1:]):
        g0 = np.array(g0t)
        delta = np.array(g1t) - g0
        a_, b_ = float(q @ g0), float(q @ delta)
        c_, d_ = float(g0 @ g0), float(g0 @ delta)
        e_ = float(delta @ delta)
        denom = b_ * d_ - a_ * e_
        candidates = [0.0, 1.0]
        if abs(denom) > 1e-15:
            candidates.append((a_ * d_ - b_ * c_) / denom)
        for alpha in candidates:
            alpha = float(np.clip(alpha, 0.0, 1.0))
            g = g0 + alpha * delta
            cos = float(q @ g) / float(np.linalg.norm(g))
            if cos > best_cos:
                best_cos = cos
                best_kelvin = k0 + alpha * (k1 - k0)
    return float(best_kelvin)


_FIT_START_DIRECTIONS = (
    np.array([1.0, 0.0, 0.0]),
    np.array([-1.0, 0.0, 0.0]),
    np.array([0.0, 1.0, 0.0]),
    np.array([0.0, -1.0, 0.0]),
    np.array([0.0, 0.0, 1.0]),
    np.array([0.0, 0.0, -1.0]),
)


def _frame_fit(
    pixels: np.ndarray, normals: np.ndarray, max_iters: int = 10
) -> tuple[np.ndarray, np.ndarray, float]:
    """Fit ambient u_c and directional w_c per channel with a clamped-diffuse model.

    pixels: (N, 3) fog-corrected intensities; normals: (N, 3) unit vectors.
    Shadowed pixels (n . l <= 0) contribute the ambient term only, so the lit
    set is latent; the fixed-point iteration (solve -> re-threshold on the
    pooled direction) is run from an all-lit start and from six canonical
    half-space starts, and the minimum-residual solution wins. On clean data
    the start overlapping the true lit set reaches residual ~0.
    Returns (u (3,), w (3, 3) rows per channel, residual sum of squares).
    """

    n_pix = pixels.shape[0]
    ones = np.ones((n_pix, 1))

    def solve(lit: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        design = np.concatenate([ones, normals * lit[:, None]], axis=1)
        sv = np.linalg.svd(design, compute_uv=False)
        if sv[-1] < 1e-9 * sv[0]:
            raise DegenerateGeometryError(
                "masked normals do not span a full-rank shading system"
            )
        coef, *_ = np.linalg.lstsq(design, pixels, rcond=None)
        resid = float(((design @ coef - pixels) ** 2).sum())
        return coef[0], coef[1:].T, resid  # u (3,), w rows per channel (3, 3)

    starts = [np.ones(n_pix)]
    for axis in _FIT_START_DIRECTIONS:
        lit = (normals @ axis > 0.0).astype(np.float64)
        if lit.sum() >= 4:
            starts.append(lit)

    best = None
    degenerate = 0
    for start in starts:
        lit = start
        seen: set[bytes] = set()
        for _ in range(max_iters):
            try:
                u, w, resid = solve(lit)
            except DegenerateGeometryError:
                degenerate += 1
                break
            if best is None or resid < best[2]:
                best = (u, w, resid)
            pooled = w.sum(axis=0)
            norm = np.linalg.norm(pooled)
            if norm < 1e-12:
                break
            new_lit = (normals @ (pooled / norm) > 0.0).astype(np.float64)
            key = new_lit.tobytes()
            if new_lit.sum() < 4 or key in seen:
                break
            seen.add(key)
            lit = new_lit
    if best is None:
        raise DegenerateGeometryError(
            "masked normals do not span a full-rank shading system"
        )
    return best


def _fit_all_frames(
    video: np.ndarray,
    normals: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    sigma: float,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], float]:
    """Per-frame (u, w) fits after undoing fog exp(-sigma * depth); total residual."""

    fits = []
    total = 0.0
    for f in range(video.shape[0]):
        inside = mask[f].astype(bool)
        usable = inside & (video[f].max(axis=-1) < SATURATION_LEVEL)
        if usable.sum() < 4:
            usable = inside
        if usable.sum() < 4:
            raise DegenerateGeometryError("fewer than 4 masked pixels")
        pix = video[f][usable].astype(np.float64)
        pix = pix * np.exp(sigma * depth[f][usable].astype(np.float64))[:, None]
        nrm = normals[f][usable].astype(np.float64)
        u, w, resid = _frame_fit(pix, nrm)
        fits.append((u, w))
        total += resid
    return fits, total


def infer_label(
    video: np.ndarray,
    normals: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    *,
    declared_source_type: str = "artificial",
    declared_mirror: bool = False,
    max_fog: float = 1.0,
) -> LightingLabel:
    """Recover the six-attribute label from pixels, given exact geometry maps.

    On clean renders (constant unit albedo, < 1% saturation, some lit pixels)
    the recovery is exact up to float32 rounding, so the result equals
    label_from_program's output. Source type and the mirror flag are echoed
    from the declared metadata (not inferable from Lambertian pixels).
    """

    if not mask.astype(bool).any():
        raise DegenerateGeometryError("mask is empty")

    def residual(sigma: float) -> float:
        return _fit_all_frames(video, normals, depth, mask, sigma)[1]

    # fog coefficient: coarse grid, then a bounded 1-D refine around the best cell
    grid = np.linspace(0.0, max_fog, 9)
    losses = [residual(float(s)) for s in grid]
    best = int(np.argmin(losses))
    lo = grid[max(0, best - 1)]
    hi = grid[min(len(grid) - 1, best + 1)]
    if hi > lo:
        result = minimize_scalar(residual, bounds=(float(lo), float(hi)), method="bounded",
                                 options={"xatol": 1e-7})
        sigma_hat = float(result.x)
        if residual(sigma_hat) > losses[best]:
            sigma_hat = float(grid[best])
    else:
        sigma_hat = float(grid[best])

    fits, _ = _fit_all_frames(video, normals, depth, mask, sigma_hat)

    dirs, scaled, ambients, q_sum = [], [], [], np.zeros(3)
    for u, w in fits:
        pooled = w.sum(axis=0)
        norm = np.linalg.norm(pooled)
        l_hat = np.array([0.0, 0.0, 1.0]) if norm < 1e-9 else pooled / norm
        m = w @ l_hat  # per-channel directional magnitude g_c * s
        q = u + np.maximum(m, 0.0)
        q_sum += q
        dirs.append(l_hat)
        scaled.append(m)
        ambients.append(u)

    kelvin_hat = invert_temperature_gain(q_sum / len(fits))
    gain = temperature_gain(kelvin_hat)
    s_frames = np.array([float(np.mean(m / gain)) for m in scaled])
    a_frames = np.array([float(np.mean(u / gain)) for u in ambients])
    s_frames = np.maximum(s_frames, 0.0)
    a_frames = np.maximum(a_frames, 0.0)

    directions = np.stack(dirs)
    dominant = directions.mean(axis=0)
    norm = np.linalg.norm(dominant)
    dominant = directions[0] if norm < 1e-12 else dominant / norm

    if sigma_hat > FOG_EPS:
        optical = "scattering"
    elif declared_mirror:
        optical = "refraction_reflection"
    else:
        optical = "none"

    return LightingLabel(
        direction=classify_direction(
            dominant,
            float(s_frames.mean()),
            float(a_frames.mean()),
            normals,
            mask,
            video,
        ),
        source_type=declared_source_type,
        intensity=classify_intensity(float(s_frames.mean()) * 1000.0),
        color_temperature=classify_temperature(kelvin_hat),
        temporal=_classify_temporal(directions, s_frames * 1000.0),
        optical=optical,
    )
