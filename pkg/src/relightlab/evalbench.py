"""Quality metrics, the temporal smoothness proxy, label-consistency scoring,
and the attribute-controllability benchmark.

The benchmark isolates one lighting attribute at a time: each of the six case
families shares a fixed base label and varies only its own attribute, cycling
near-uniformly over that attribute's classes (including the base value, so a
predictor that is independent of the targets scores chance level 1/K). Every
case is constructed by rejection: scene and program are sampled from
class-conditional priors, rendered, and kept only if both the program-side
labeler and the pixel-side classifier reproduce the target label on a clean
(< 1% saturated) render. Per-attribute accuracy is computed on that
attribute's family; the average score weights the six attributes equally.

Temporal smoothness is reported as `temporal_smoothness_proxy` (mean squared
second temporal difference, lower is smoother); it replaces motion-prior
metrics that would need a pretrained interpolation model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import convolve2d

from . import flowcore
from .annotation import (
    ATTRIBUTE_VALUES,
    ATTRIBUTES,
    DegenerateGeometryError,
    LightingLabel,
    encode_label,
    infer_label,
    label_from_program,
)
from .config import Camera, SceneBounds
from .dataset_io import SampleRecord
from .geometry import GeometryEstimator, GeometryMaps, estimate, physics_loss
from .model import Conditioning, VelocityModel, video_to_tensor, tensor_to_video
from .scenes import (
    DEFAULT_CAMERA,
    LightProgram,
    LightSpec,
    RenderedSample,
    SceneSpec,
    TrainingTuple,
    build_tuple,
    degrade,
    render,
)

PSNR_CAP_DB = 100.0
_SSIM_K1, _SSIM_K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """10 * log10(1 / MSE) on unit-range data, capped at 100 dB."""

    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred.astype(np.float64) - ref.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    kernel = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(kernel, kernel)
    return window / window.sum()


def ssim_image(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Gaussian-weighted SSIM (11x11 window, sigma 1.5) over valid windows."""

    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    size = min(11, h if h % 2 else h - 1, w if w % 2 else w - 1)
    if size < 3:
        raise MetricError(f"image {h}x{w} too small for SSIM")
    window = _gaussian_window(size, 1.5)
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    scores = []
    for c in range(a.shape[2]):
        x = a[..., c].astype(np.float64)
        y = b[..., c].astype(np.float64)
        mu_x = convolve2d(x, window, mode="valid")
        mu_y = convolve2d(y, window, mode="valid")
        xx = convolve2d(x * x, window, mode="valid") - mu_x**2
        yy = convolve2d(y * y, window, mode="valid") - mu_y**2
        xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        )
        scores.append(float(ssim_map.mean()))
    return float(np.mean(scores))


def quality_metrics(pred_video: np.ndarray, ref_video: np.ndarray) -> dict[str, float]:
    """Frame-averaged PSNR and SSIM for videos in [0, 1]."""

    if pred_video.shape != ref_video.shape:
        raise MetricError(f"shape mismatch: {pred_video.shape} vs {ref_video.shape}")
    psnrs = [psnr(pred_video[f], ref_video[f]) for f in range(pred_video.shape[0])]
    ssims = [ssim_image(pred_video[f], ref_video[f]) for f in range(pred_video.shape[0])]
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def temporal_smoothness(video: np.ndarray) -> float:
    """Mean squared second temporal difference; 0 for any per-pixel linear ramp."""

    if video.shape[0] < 3:
        raise MetricError(f"need at least 3 frames, got {video.shape[0]}")
    v = video.astype(np.float64)
    second = v[2:] - 2.0 * v[1:-1] + v[:-2]
    return float(np.mean(second**2))


def dense_l2_error(
    est: GeometryEstimator,
    pred_video: np.ndarray,
    ref_maps: GeometryMaps,
    mask: np.ndarray,
    *,
    use_depth: bool = True,
    use_normal: bool = True,
    norm_scope: str = "per_frame",
) -> float:
    """The evaluation metric reuses the training feedback loss definition exactly."""

    with torch.no_grad():
        maps = estimate(est, pred_video)
        feedback = physics_loss(
            maps, ref_maps, mask, use_depth=use_depth, use_normal=use_normal,
            norm_scope=norm_scope,
        )
    return float(feedback.value)


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------


def sample_video(
    model: VelocityModel,
    tup: TrainingTuple,
    steps: int,
    rng: np.random.Generator,
    k_max: int = 7,
) -> np.ndarray:
    """Sample one relit video for a tuple's conditioning; clipped to [0, 1]."""

    dtype = next(model.parameters()).dtype
    cond = Conditioning(
        x_deg=video_to_tensor(tup.v_deg, dtype)[None],
        x_bg=video_to_tensor(tup.v_bg, dtype)[None],
        c=torch.as_tensor(encode_label(tup.label), dtype=dtype)[None],
    )
    shape = (1, *cond.x_deg.shape[1:])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    with torch.no_grad():
        out = flowcore.sample(
            model.velocity, cond, steps=steps, shape=shape, rng=gen, k_max=k_max, dtype=dtype
        )
    frames = tup.v_real.shape[0]
    video = tensor_to_video(out[0], frames).numpy()
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def evaluate_model(
    model: VelocityModel,
    records: list[SampleRecord],
    est: GeometryEstimator | None,
    steps: int = 16,
    seed: int = 0,
    *,
    k_max: int = 7,
) -> dict[str, float]:
    """Held-out metrics plus the copy-the-degraded-input baseline PSNR."""

    if not records:
        raise MetricError("evaluation needs at least one record")
    psnrs, ssims, smooth, dense, base_psnr = [], [], [], [], []
    for index, rec in enumerate(records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        pred = sample_video(model, rec.tuple, steps, rng, k_max=k_max)
        q = quality_metrics(pred, rec.tuple.v_real)
        psnrs.append(q["psnr"])
        ssims.append(q["ssim"])
        if pred.shape[0] >= 3:
            smooth.append(temporal_smoothness(pred))
        if est is not None:
            ref = GeometryMaps.from_numpy(rec.depth, rec.normals)
            dense.append(dense_l2_error(est, pred, ref, rec.tuple.mask))
        base_psnr.append(psnr(rec.tuple.v_deg, rec.tuple.v_real))
    out = {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "psnr_baseline_copy_degraded": float(np.mean(base_psnr)),
        "steps": float(steps),
    }
    if smooth:
        out["temporal_smoothness_proxy"] = float(np.mean(smooth))
    if dense:
        out["dense_l2_error"] = float(np.mean(dense))
    return out


# ---------------------------------------------------------------------------
# benchmark construction
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class BenchCase:
    tuple: TrainingTuple
    target_label: LightingLabel
    varied_attribute: str
    spec: SceneSpec
    program: LightProgram
    depth: np.ndarray
    normals: np.ndarray


@dataclass(eq=False)
class BenchSuite:
    cases: list[BenchCase]
    base_labels: dict[str, LightingLabel]
    n_per_attribute: int
    seed: int


@dataclass
class BenchReport:
    per_attribute: dict[str, float]
    avg_score: float
    ci_low: dict[str, float]
    ci_high: dict[str, float]
    quality: dict[str, float]
    temporal_smoothness_proxy: float
    dense_l2_error: float
    degenerate_cases: int
    n_cases: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_attribute": self.per_attribute,
                "avg_score": self.avg_score,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "quality": self.quality,
                "temporal_smoothness_proxy": self.temporal_smoothness_proxy,
                "dense_l2_error": self.dense_l2_error,
                "degenerate_cases": self.degenerate_cases,
                "n_cases": self.n_cases,
            },
            indent=1,
        )

    def write_csv(self, path: Path | str) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                list(ATTRIBUTES) + ["avg_score"]
                + [f"{a}_ci_low" for a in ATTRIBUTES]
                + [f"{a}_ci_high" for a in ATTRIBUTES]
            )
            writer.writerow(
                [repr(self.per_attribute[a]) for a in ATTRIBUTES]
                + [repr(self.avg_score)]
                + [repr(self.ci_low[a]) for a in ATTRIBUTES]
                + [repr(self.ci_high[a]) for a in ATTRIBUTES]
            )

    def to_markdown(self) -> str:
        header = "| " + " | ".join(ATTRIBUTES) + " | avg_score |"
        rule = "|" + "---|" * (len(ATTRIBUTES) + 1)
        row = (
            "| "
            + " | ".join(f"{self.per_attribute[a]:.3f}" for a in ATTRIBUTES)
            + f" | {self.avg_score:.3f} |"
        )
        return "\n".join([header, rule, row]) + "\n"


# class-conditional priors for realizing a target label ---------------------

_DIRECTION_PRIORS = {
    # theta (deg from the +z camera axis), phi mode, ambient range
    "front": ((6.0, 24.0), "any", (0.12, 0.30)),
    "side": ((60.0, 120.0), "lateral", (0.15, 0.35)),
    "back": ((152.0, 172.0), "any", (0.02, 0.08)),
    "top": ((60.0, 120.0), "up", (0.15, 0.35)),
    "bottom": ((60.0, 120.0), "down", (0.15, 0.35)),
    "split": ((78.0, 102.0), "lateral", (0.015, 0.04)),
    "ambient": ((125.0, 165.0), "any", (0.55, 0.80)),
}

_INTENSITY_PRIORS = {
    "dim": (90.0, 180.0),
    "moderate": (350.0, 750.0),
    "glare": (1020.0, 1160.0),
}

_TEMPERATURE_PRIORS = {
    "warm": (2400.0, 3800.0),
    "neutral": (4100.0, 4900.0),
    "cool": (5200.0, 9200.0),
}

BENCH_BASE_LABELS = {
    "direction": LightingLabel("front", "artificial", "dim", "neutral", "static", "none"),
    "source_type": LightingLabel("side", "natural", "moderate", "warm", "static", "none"),
    "intensity": LightingLabel("side", "artificial", "moderate", "neutral", "static", "scattering"),
    "color_temperature": LightingLabel("side", "natural", "moderate", "neutral", "static", "none"),
    "temporal": LightingLabel("front", "artificial", "moderate", "warm", "static", "none"),
    "optical": LightingLabel("side", "artificial", "moderate", "cool", "static", "none"),
}

# transmission needs transparent materials, which the Lambertian world cannot
# realize; the optical family cycles the three reachable classes
BENCH_VARIED_VALUES = {
    attr: tuple(v for v in values if not (attr == "optical" and v == "transmission"))
    for attr, values in ATTRIBUTE_VALUES.items()
}


def _direction_from_prior(rng: np.random.Generator, target: str) -> tuple[np.ndarray, float]:
    theta_range, phi_mode, ambient_range = _DIRECTION_PRIORS[target]
    theta = math.radians(rng.uniform(*theta_range))
    if phi_mode == "lateral":
        phi = rng.uniform(-0.45, 0.45) + (0.0 if rng.random() < 0.5 else math.pi)
    elif phi_mode == "up":
        phi = math.pi / 2 + rng.uniform(-0.35, 0.35)
    elif phi_mode == "down":
        phi = -math.pi / 2 + rng.uniform(-0.35, 0.35)
    else:
        phi = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array(
        [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
    )
    return direction / np.linalg.norm(direction), float(rng.uniform(*ambient_range))


def _rotate_in_cone(rng: np.random.Generator, d0: np.ndarray, max_deg: float, n: int) -> list[np.ndarray]:
    axis = rng.standard_normal(3)
    axis -= d0 * np.dot(axis, d0)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = math.radians(rng.uniform(0.6 * max_deg, max_deg))
    out = []
    for i in range(n):
        a = angle * (i / max(1, n - 1) - 0.5)
        out.append(math.cos(a) * d0 + math.sin(a) * axis)
    return out


def program_from_label(
    rng: np.random.Generator, label: LightingLabel, n_frames: int
) -> LightProgram:
    """Sample a light program consistent with a target label (pre-verification)."""

    direction, ambient = _direction_from_prior(rng, label.direction)
    lo, hi = _INTENSITY_PRIORS[label.intensity]
    kelvin = float(rng.uniform(*_TEMPERATURE_PRIORS[label.color_temperature]))
    source = label.source_type

    def spec_for(d: np.ndarray, lumens: float) -> LightSpec:
        d = d / np.linalg.norm(d)
        return LightSpec(
            direction=(float(d[0]), float(d[1]), float(d[2])),
            source_type=source,
            intensity=float(lumens),
            color_temperature=kelvin,
            ambient=ambient,
        )

    if label.temporal == "static" or n_frames < 2:
        lumens = float(rng.uniform(lo, hi))
        frames = (spec_for(direction, lumens),) * n_frames
        return LightProgram(frames=frames, dynamics="static")
    if label.temporal == "dynamic_intensity":
        mean = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
        swing = 0.4 * mean
        values = np.linspace(mean - swing, mean + swing, n_frames)
        if rng.random() < 0.5:
            values = values[::-1]
        frames = tuple(spec_for(direction, float(v)) for v in values)
        return LightProgram(frames=frames, dynamics="intensity_changing")
    lumens = float(rng.uniform(lo, hi))
    dirs = _rotate_in_cone(rng, direction, 28.0, n_frames)
    frames = tuple(spec_for(d, lumens) for d in dirs)
    return LightProgram(frames=frames, dynamics="moving_source")


def scene_from_label(
    rng: np.random.Generator, label: LightingLabel, bounds: SceneBounds
) -> SceneSpec:
    """Clean annotated scene: unit albedo, sphere/heightfield geometry, flags per label."""

    from .scenes import sample_scene
    from dataclasses import replace as dc_replace

    if label.optical == "scattering":
        fog_range = (0.17, 0.24)
        clear_prob = 0.0
    else:
        fog_range = (0.0, 0.0)
        clear_prob = 1.0
    clean = dc_replace(
        bounds,
        geometry_kinds=("sphere", "heightfield"),
        albedo_mode="constant",
        albedo_constant=1.0,
        fog_clear_prob=clear_prob,
        fog_density=fog_range,
        mirror_prob=1.0 if label.optical == "refraction_reflection" else 0.0,
    )
    return sample_scene(rng, clean)


def saturation_fraction(video: np.ndarray, mask: np.ndarray) -> float:
    inside = mask.astype(bool)
    if not inside.any():
        return 0.0
    return float((video[inside].max(axis=-1) >= 0.999).mean())


def realize_case(
    rng: np.random.Generator,
    label: LightingLabel,
    bounds: SceneBounds,
    camera: Camera = DEFAULT_CAMERA,
    max_attempts: int = 60,
    check_inference: bool = True,
) -> tuple[SceneSpec, LightProgram, RenderedSample]:
    """Rejection-sample a (scene, program) whose clean render realizes the label."""

    for _ in range(max_attempts):
        spec = scene_from_label(rng, label, bounds)
        program = program_from_label(rng, label, bounds.frames)
        rendered = render(spec, program, camera)
        if saturation_fraction(rendered.video, rendered.mask) >= 0.01:
            continue
        if label_from_program(program, spec, rendered) != label:
            continue
        if check_inference:
            try:
                inferred = infer_label(
                    rendered.video,
                    rendered.normals,
                    rendered.depth,
                    rendered.mask,
                    declared_source_type=label.source_type,
                    declared_mirror=spec.mirror_flag,
                )
            except DegenerateGeometryError:
                continue
            if inferred != label:
                continue
        return spec, program, rendered
    raise RuntimeError(f"could not realize label {label} in {max_attempts} attempts")


def bench_generate(
    rng: np.random.Generator,
    n_per_attribute: int,
    bounds: SceneBounds | None = None,
    camera: Camera = DEFAULT_CAMERA,
    fill_mode: str = "gaussian",
) -> BenchSuite:
    """Six case families; every case differs from its family base only in the
    varied attribute (which cycles near-uniformly over all of its classes)."""

    if n_per_attribute < 1:
        raise MetricError("n_per_attribute must be >= 1")
    bounds = bounds or SceneBounds()
    master_seed = int(rng.integers(0, 2**31 - 1))
    cases: list[BenchCase] = []
    for attr_index, attr in enumerate(ATTRIBUTES):
        base = BENCH_BASE_LABELS[attr]
        values = BENCH_VARIED_VALUES[attr]
        for case_index in range(n_per_attribute):
            target = LightingLabel(
                **{**base.__dict__, attr: values[case_index % len(values)]}
            )
            case_rng = np.random.default_rng(
                np.random.SeedSequence([master_seed, attr_index, case_index])
            )
            spec, program, rendered = realize_case(case_rng, target, bounds, camera)
            deg_program = degrade(spec, case_rng, bounds.frames, avoid=program)
            deg = render(spec, deg_program, camera)
            tup = build_tuple(
                rendered, deg, target, fill_mode, case_rng,
                scene_id=f"bench_{attr}_{case_index:04d}",
            )
            cases.append(
                BenchCase(
                    tuple=tup,
                    target_label=target,
                    varied_attribute=attr,
                    spec=spec,
                    program=program,
                    depth=rendered.depth,
                    normals=rendered.normals,
                )
            )
    return BenchSuite(
        cases=cases,
        base_labels=dict(BENCH_BASE_LABELS),
        n_per_attribute=n_per_attribute,
        seed=master_seed,
    )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def attribute_accuracy(
    cases: list[BenchCase], predicted: list[LightingLabel | None]
) -> tuple[dict[str, float], float]:
    """Per-attribute accuracy over each attribute's own family; equal-weight average."""

    if not cases:
        raise MetricError("empty case list")
    if len(cases) != len(predicted):
        raise MetricError("cases and predictions differ in length")
    per_attribute = {}
    for attr in ATTRIBUTES:
        hits, total = 0, 0
        for case, label in zip(cases, predicted):
            if case.varied_attribute != attr:
                continue
            total += 1
            if label is not None and getattr(label, attr) == getattr(case.target_label, attr):
                hits += 1
        if total == 0:
            raise MetricError(f"no cases vary attribute {attr!r}")
        per_attribute[attr] = hits / total
    avg = float(np.mean([per_attribute[a] for a in ATTRIBUTES]))
    return per_attribute, avg


def _bootstrap_ci(
    hits: np.ndarray, rng: np.random.Generator, resamples: int
) -> tuple[float, float]:
    n = hits.size
    stats = np.empty(resamples)
    for i in range(resamples):
        stats[i] = hits[rng.integers(0, n, size=n)].mean()
    return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


def infer_case_label(case: BenchCase, video: np.ndarray) -> LightingLabel | None:
    """Classify a generated video against the case's exact geometry; None if degenerate."""

    try:
        return infer_label(
            video,
            case.normals,
            case.depth,
            case.tuple.mask,
            declared_source_type=case.program.frames[0].source_type,
            declared_mirror=case.spec.mirror_flag,
        )
    except DegenerateGeometryError:
        return None


def bench_run(
    model,
    est: GeometryEstimator | None,
    suite: BenchSuite,
    *,
    steps: int = 16,
    seed: int = 0,
    bootstrap_resamples: int = 1000,
    k_max: int = 7,
) -> BenchReport:
    """Sample each case, classify the output, and score all metrics.

    `model` is either a VelocityModel (sampled at `steps` Euler steps) or a
    callable (case, rng) -> video for oracle / stub evaluations.
    """

    if not suite.cases:
        raise MetricError("benchmark suite has no cases")

    def sampler(case: BenchCase, rng: np.random.Generator) -> np.ndarray:
        if isinstance(model, VelocityModel):
            return sample_video(model, case.tuple, steps, rng, k_max=k_max)
        return model(case, rng)

    predicted: list[LightingLabel | None] = []
    psnrs, ssims, smooth, dense = [], [], [], []
    degenerate = 0
    for index, case in enumerate(suite.cases):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        video = np.clip(np.asarray(sampler(case, rng), dtype=np.float32), 0.0, 1.0)
        label = infer_case_label(case, video)
        if label is None:
            degenerate += 1
        predicted.append(label)
        q = quality_metrics(video, case.tuple.v_real)
        psnrs.append(q["psnr"])
        ssims.append(q["ssim"])
        if video.shape[0] >= 3:
            smooth.append(temporal_smoothness(video))
        if est is not None:
            ref = GeometryMaps.from_numpy(case.depth, case.normals)
            dense.append(dense_l2_error(est, video, ref, case.tuple.mask))

    per_attribute, avg = attribute_accuracy(suite.cases, predicted)
    ci_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1]))
    ci_low, ci_high = {}, {}
    for attr in ATTRIBUTES:
        hits = np.array(
            [
                1.0
                if p is not None and getattr(p, attr) == getattr(c.target_label, attr)
                else 0.0
                for c, p in zip(suite.cases, predicted)
                if c.varied_attribute == attr
            ]
        )
        lo, hi = _bootstrap_ci(hits, ci_rng, bootstrap_resamples)
        ci_low[attr], ci_high[attr] = lo, hi

    return BenchReport(
        per_attribute=per_attribute,
        avg_score=avg,
        ci_low=ci_low,
        ci_high=ci_high,
        quality={"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))},
        temporal_smoothness_proxy=float(np.mean(smooth)) if smooth else 0.0,
        dense_l2_error=float(np.mean(dense)) if dense else 0.0,
        degenerate_cases=degenerate,
        n_cases=len(suite.cases),
    )


def renderer_oracle(case: BenchCase, rng: np.random.Generator) -> np.ndarray:
    """Perfect model: returns the render of the case's target program."""

    return case.tuple.v_real


def random_output_model(case: BenchCase, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=case.tuple.v_real.shape).astype(np.float32)
