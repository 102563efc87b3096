"""Dataset and checkpoint persistence.

A dataset directory holds one .npz container per sample (little-endian float32
and uint8 arrays: video, depth, normals, mask, v_deg, v_bg, albedo), a JSON
sidecar with the scene spec, light programs, and lighting label, plus a
top-level manifest recording counts, shapes, seed, camera, and the temperature
gain table. Checkpoints reuse the same idea: named arrays in a .npz next to a
JSON metadata file.
"""

from __future__ import annotations

import dataclasses
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import LightingLabel
from .config import Camera
from .scenes import (
    GAIN_ANCHORS,
    LightProgram,
    LightSpec,
    RenderedSample,
    SceneSpec,
    TrainingTuple,
)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

_ARRAY_KEYS = ("video", "depth", "normals", "mask", "v_deg", "v_bg", "albedo")


class DatasetFormatError(ValueError):
    """A dataset directory, sample container, or manifest failed to parse."""


@dataclass(eq=False)
class SampleRecord:
    """Everything known about one training sample, including exact geometry."""

    scene_id: str
    spec: SceneSpec
    real_program: LightProgram
    degraded_program: LightProgram
    label: LightingLabel
    tuple: TrainingTuple
    depth: np.ndarray
    normals: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.tuple.mask

    def real_sample(self) -> RenderedSample:
        return RenderedSample(
            video=self.tuple.v_real, depth=self.depth, normals=self.normals, mask=self.tuple.mask
        )


def _light_spec_to_json(spec: LightSpec) -> dict:
    return {
        "direction": list(spec.direction),
        "source_type": spec.source_type,
        "intensity": spec.intensity,
        "color_temperature": spec.color_temperature,
        "ambient": spec.ambient,
    }


def _light_spec_from_json(data: dict) -> LightSpec:
    return LightSpec(
        direction=tuple(data["direction"]),
        source_type=data["source_type"],
        intensity=data["intensity"],
        color_temperature=data["color_temperature"],
        ambient=data["ambient"],
    )


def _program_to_json(program: LightProgram) -> dict:
    return {
        "dynamics": program.dynamics,
        "frames": [_light_spec_to_json(f) for f in program.frames],
    }


def _program_from_json(data: dict) -> LightProgram:
    return LightProgram(
        frames=tuple(_light_spec_from_json(f) for f in data["frames"]),
        dynamics=data["dynamics"],
    )


def _spec_to_json(spec: SceneSpec) -> dict:
    return {
        "geometry_kind": spec.geometry_kind,
        "geometry_params": [float(v) for v in spec.geometry_params],
        "subject_center_path": [[float(a), float(b)] for a, b in spec.subject_center_path],
        "fog_density": spec.fog_density,
        "mirror_flag": spec.mirror_flag,
    }


def _spec_from_json(data: dict, albedo: np.ndarray) -> SceneSpec:
    return SceneSpec(
        geometry_kind=data["geometry_kind"],
        geometry_params=np.array(data["geometry_params"], dtype=np.float64),
        albedo_map=albedo,
        subject_center_path=np.array(data["subject_center_path"], dtype=np.float64),
        fog_density=data["fog_density"],
        mirror_flag=data["mirror_flag"],
    )


def _sample_name(index: int) -> str:
    return f"sample_{index:05d}"


def persist_dataset(
    records: list[SampleRecord],
    path: str | Path,
    *,
    seed: int,
    camera: Camera = Camera(),
    fill_mode: str = "gaussian",
    extra_meta: dict | None = None,
) -> dict:
    """Write records plus a manifest; returns the manifest dict."""

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not records:
        raise DatasetFormatError("refusing to persist an empty dataset")
    for index, rec in enumerate(records):
        name = _sample_name(index)
        arrays = {
            "video": rec.tuple.v_real.astype("<f4"),
            "depth": rec.depth.astype("<f4"),
            "normals": rec.normals.astype("<f4"),
            "mask": rec.tuple.mask.astype(np.uint8),
            "v_deg": rec.tuple.v_deg.astype("<f4"),
            "v_bg": rec.tuple.v_bg.astype("<f4"),
            "albedo": rec.spec.albedo_map.astype("<f4"),
        }
        np.savez(path / f"{name}.npz", **arrays)
        sidecar = {
            "scene_id": rec.scene_id,
            "scene": _spec_to_json(rec.spec),
            "real_program": _program_to_json(rec.real_program),
            "degraded_program": _program_to_json(rec.degraded_program),
            "label": rec.label.to_json_dict(),
        }
        (path / f"{name}.json").write_text(json.dumps(sidecar, indent=1))

    first = records[0]
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(records),
        "shapes": {
            "video": list(first.tuple.v_real.shape),
            "depth": list(first.depth.shape),
            "normals": list(first.normals.shape),
            "mask": list(first.tuple.mask.shape),
        },
        "seed": seed,
        "fill_mode": fill_mode,
        "camera": dataclasses.asdict(camera),
        "gain_table": [[k, list(g)] for k, g in GAIN_ANCHORS],
    }
    if extra_meta:
        manifest.update(extra_meta)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetFormatError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format_version {manifest.get('format_version')!r}"
        )
    return manifest


def load_dataset(path: str | Path) -> tuple[list[SampleRecord], dict]:
    """Load every sample named by the manifest; bit-exact inverse of persist."""

    path = Path(path)
    manifest = load_manifest(path)
    records = []
    for index in range(manifest["count"]):
        name = _sample_name(index)
        npz_path = path / f"{name}.npz"
        json_path = path / f"{name}.json"
        try:
            with np.load(npz_path) as data:
                arrays = {key: data[key] for key in _ARRAY_KEYS}
        except FileNotFoundError as exc:
            raise DatasetFormatError(f"sample {name}: missing container {npz_path}") from exc
        except (ValueError, OSError, KeyError, zipfile.BadZipFile) as exc:
            raise DatasetFormatError(f"sample {name}: unreadable container: {exc}") from exc
        try:
            sidecar = json.loads(json_path.read_text())
        except FileNotFoundError as exc:
            raise DatasetFormatError(f"sample {name}: missing sidecar {json_path}") from exc
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"sample {name}: sidecar is not valid JSON: {exc}") from exc
        try:
            spec = _spec_from_json(sidecar["scene"], arrays["albedo"].astype(np.float64))
            label = LightingLabel.from_json_dict(sidecar["label"])
            record = SampleRecord(
                scene_id=sidecar["scene_id"],
                spec=spec,
                real_program=_program_from_json(sidecar["real_program"]),
                degraded_program=_program_from_json(sidecar["degraded_program"]),
                label=label,
                tuple=TrainingTuple(
                    v_real=arrays["video"],
                    v_deg=arrays["v_deg"],
                    v_bg=arrays["v_bg"],
                    mask=arrays["mask"],
                    label=label,
                    scene_id=sidecar["scene_id"],
                ),
                depth=arrays["depth"],
                normals=arrays["normals"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"sample {name}: malformed sidecar: {exc}") from exc
        records.append(record)
    return records, manifest


# ---------------------------------------------------------------------------
# named-array checkpoints
# ---------------------------------------------------------------------------


def save_named_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write `<path>.npz` with named arrays and `<path>.json` with metadata."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **arrays)
    meta = dict(meta)
    meta.setdefault("checkpoint_format_version", CHECKPOINT_FORMAT_VERSION)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_named_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    npz_path = path.with_suffix(".npz")
    json_path = path.with_suffix(".json")
    if not npz_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {npz_path}")
    with np.load(npz_path) as data:
        arrays = {key: data[key] for key in data.files}
    meta = json.loads(json_path.read_text()) if json_path.exists() else {}
    return arrays, meta
