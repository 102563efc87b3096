"""Desk-scale lab for flow-matching video relighting with geometric feedback.

Synthetic Lambertian scenes with exact depth/normal/mask ground truth feed a
conditional flow-matching model trained with a path-consistency objective and
a masked relative-L2 geometry feedback loss; a rule-based six-attribute
lighting annotation doubles as the scoring oracle for the controllability
benchmark.
"""

from .config import (
    BenchConfig,
    Camera,
    ConfigError,
    DataConfig,
    EstimatorConfig,
    ModelConfig,
    SceneBounds,
    TrainConfig,
)
from .scenes import (
    LightProgram,
    LightSpec,
    RenderedSample,
    SceneSpec,
    TrainingTuple,
    build_tuple,
    degrade,
    gaussian_background_fill,
    render,
    sample_light_program,
    sample_scene,
)
from .annotation import (
    LightingLabel,
    decode_label,
    encode_label,
    infer_label,
    label_from_program,
)
from .dataset_io import SampleRecord, load_dataset, persist_dataset

__version__ = "0.1.0"

__all__ = [
    "BenchConfig",
    "Camera",
    "ConfigError",
    "DataConfig",
    "EstimatorConfig",
    "LightProgram",
    "LightSpec",
    "LightingLabel",
    "ModelConfig",
    "RenderedSample",
    "SampleRecord",
    "SceneBounds",
    "SceneSpec",
    "TrainConfig",
    "TrainingTuple",
    "build_tuple",
    "decode_label",
    "degrade",
    "encode_label",
    "gaussian_background_fill",
    "infer_label",
    "label_from_program",
    "load_dataset",
    "persist_dataset",
    "render",
    "sample_light_program",
    "sample_scene",
    "__version__",
]
