"""Dataset generation: scenes -> paired renders -> labeled training tuples.

Each sample owns an independent seed stream derived from (seed, scene index),
so generation is embarrassingly parallel and order-independent. A scene can
host several light programs (programs_per_scene > 1), which gives the geometry
estimator paired renders of identical geometry under different lighting.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .annotation import label_from_program
from .config import Camera, DataConfig, SceneBounds
from .dataset_io import SampleRecord
from .scenes import (
    build_tuple,
    degrade,
    render,
    sample_light_program,
    sample_scene,
)


def generate_dataset(cfg: DataConfig, seed: int) -> list[SampleRecord]:
    cfg.validate()
    camera = cfg.bounds.camera
    n_scenes = math.ceil(cfg.n_samples / cfg.programs_per_scene)
    records: list[SampleRecord] = []
    for scene_index in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, scene_index]))
        spec = sample_scene(rng, cfg.bounds)
        scene_id = f"scene_{scene_index:05d}"
        for _ in range(cfg.programs_per_scene):
            if len(records) >= cfg.n_samples:
                break
            program = sample_light_program(rng, cfg.bounds, cfg.bounds.frames)
            real = render(spec, program, camera)
            label = label_from_program(program, spec, real)
            deg_program = degrade(spec, rng, cfg.bounds.frames, avoid=program)
            deg = render(spec, deg_program, camera)
            tup = build_tuple(real, deg, label, cfg.fill_mode, rng, scene_id=scene_id)
            records.append(
                SampleRecord(
                    scene_id=scene_id,
                    spec=spec,
                    real_program=program,
                    degraded_program=deg_program,
                    label=label,
                    tuple=tup,
                    depth=real.depth,
                    normals=real.normals,
                )
            )
    return records


def clean_annotation_bounds(bounds: SceneBounds | None = None) -> SceneBounds:
    """Bounds for clean annotated renders: unit albedo and rank-safe geometry.

    Planes are excluded (their single normal makes the inverse shading system
    rank-deficient by construction) and the direction prior is widened so every
    sector appears.
    """

    bounds = bounds or SceneBounds()
    return replace(
        bounds,
        geometry_kinds=("sphere", "heightfield"),
        albedo_mode="constant",
        albedo_constant=1.0,
        direction_spread=1.2,
    )


def sample_clean_annotated(
    rng: np.random.Generator,
    bounds: SceneBounds,
    camera: Camera | None = None,
    max_attempts: int = 40,
    min_lit_fraction: float = 0.02,
):
    """One clean render: under 1% of subject pixels saturate and every frame
    keeps some directly lit pixels.

    Returns (spec, program, rendered). The lit-pixel gate excludes renders
    whose light points entirely away from every visible normal (then the
    pixels carry no evidence about the source at all); labeling agreement is
    never consulted here, so agreement tests stay honest.
    """

    camera = camera or bounds.camera
    for _ in range(max_attempts):
        spec = sample_scene(rng, bounds)
        program = sample_light_program(rng, bounds, bounds.frames)
        rendered = render(spec, program, camera)
        inside = rendered.mask.astype(bool)
        if not inside.any():
            continue
        saturated = (rendered.video[inside].max(axis=-1) >= 0.999).mean()
        if saturated >= 0.01:
            continue
        lit_ok = True
        for f, light in enumerate(program.frames):
            m = rendered.mask[f].astype(bool)
            lambert = rendered.normals[f].astype(np.float64) @ np.array(light.direction)
            if (lambert[m] > 0).mean() < min_lit_fraction:
                lit_ok = False
                break
        if lit_ok:
            return spec, program, rendered
    raise RuntimeError(f"no clean render found in {max_attempts} attempts")
