"""Sparse rank-based continual learning with quantized activation replay."""
from .config import RunConfig, preset
from .driver import SharpLearner, build_stream, run_reference, run_sharp
from .engine import ConfigurationError

__all__ = ["RunConfig", "preset", "SharpLearner", "build_stream", "run_reference", "run_sharp",
           "ConfigurationError"]
__version__ = "0.1.0"
