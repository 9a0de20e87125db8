"""Configuration, field I/O, error metrics, experiment drivers and the command line."""

from .config import ConfigError, RunConfig  # noqa: F401
from .fieldio import FieldParseError, read_field, write_field  # noqa: F401
from .metrics import ErrorReport, flux_error, saturation_error  # noqa: F401
from .experiments import (ReferenceCache, StaleReferenceError, build_setup, compare_strategies,  # noqa: F401
                          convergence_study, fit_slope, run_experiment)
