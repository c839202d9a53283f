# Utilities Package
from .error_handler import (
    SolverError, ConfigError, NumericalError, UnknownExperimentError, UnsupportedConfigurationError,
    AutodiffError, DomainError, SamplingError, MapConstructionError,
    create_error_response, create_success_response
)
