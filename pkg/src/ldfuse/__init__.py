"""Depth-driven, language-guided infrared/visible image fusion at desk scale."""

__version__ = "0.1.0"

from . import autodiff, guidance, imageio, losses, metrics, models, pipeline, schedule
from .errors import (ConfigError, DomainError, FormatError, LdfuseError,
                     ParameterError, ShapeError, SizeError, StateError)
from .imageio import DepthMap, RasterImage, ScenePair, concat_modalities, luminance, synth_scene
from .pipeline import FusionStack, RunConfig, evaluate, run_pipeline
from .schedule import ScheduleTable, make_linear_schedule

__all__ = [
    "__version__", "autodiff", "guidance", "imageio", "losses", "metrics",
    "models", "pipeline", "schedule", "LdfuseError", "FormatError",
    "ShapeError", "ParameterError", "SizeError", "DomainError", "StateError",
    "ConfigError", "RasterImage", "DepthMap", "ScenePair", "synth_scene",
    "concat_modalities", "luminance", "RunConfig", "FusionStack", "evaluate",
    "run_pipeline", "ScheduleTable", "make_linear_schedule",
]
