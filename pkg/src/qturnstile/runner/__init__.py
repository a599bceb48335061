"""Configuration, orchestration, persistence and CLI."""

from .compare import ComparisonResult, IncompatibleInitialStates, compare_to_ssep
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, validate
from .experiment import BackendError, ExperimentResult, LambdaRun, read_csv, run_experiment, write_outputs

__all__ = [
    "BackendError",
    "ComparisonResult",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "IncompatibleInitialStates",
    "LambdaRun",
    "compare_to_ssep",
    "config_from_dict",
    "load_config",
    "read_csv",
    "run_experiment",
    "validate",
    "write_outputs",
]
