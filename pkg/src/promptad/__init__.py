"""Prompt-guided zero-/few-shot anomaly detection and localization."""

from .config import Config, load_config, save_config
from .pipeline import AnomalyDetector, InferenceResult, load_bundle
from .evaluate import EvalReport, run_eval
from .synth import SampleRecord, generate_dataset, load_dataset, save_dataset
from .train import train

__all__ = [
    "AnomalyDetector", "Config", "EvalReport", "InferenceResult", "SampleRecord",
    "generate_dataset", "load_bundle", "load_config", "load_dataset", "run_eval",
    "save_config", "save_dataset", "train",
]

__version__ = "0.1.0"
