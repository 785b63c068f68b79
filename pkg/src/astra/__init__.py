"""Action spotting with a multimodal hierarchical transformer encoder-decoder."""

from .core import (
    AblationFlags,
    ClipSample,
    Detection,
    GroundTruthAction,
    MatchAnnotations,
    PipelineConfig,
    PredictionGrid,
    TargetGrid,
    anchor_time,
    build_targets,
    validate_grid,
)

__version__ = "0.1.0"
