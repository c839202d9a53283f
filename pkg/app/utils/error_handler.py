from datetime import datetime, timezone
import logging

from app.config import (
    EXIT_FAILURE, EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ABORT, EXIT_UNKNOWN_EXPERIMENT
)

logger = logging.getLogger(__name__)


class SolverError(Exception):
    """Base application error class"""
    def __init__(self, message, exit_code=EXIT_FAILURE, error_code=None, details=None):
        super().__init__(message)
        self.message = message
        self.exit_code = exit_code
        self.error_code = error_code or 'SOLVER_ERROR'
        self.details = details


class ConfigError(SolverError):
    """Config file / schema errors, always naming the offending field"""
    def __init__(self, message, field=None):
        super().__init__(message, EXIT_CONFIG_ERROR, 'CONFIG_ERROR', {'field': field})
        self.field = field


class UnsupportedConfigurationError(SolverError):
    """Valid input that this solver does not handle (e.g. Gaussian on a disk)"""
    def __init__(self, message, details=None):
        super().__init__(message, EXIT_CONFIG_ERROR, 'UNSUPPORTED_CONFIGURATION', details)


class NumericalError(SolverError):
    """Non-finite loss or gradient; keeps the last finite parameter snapshot"""
    def __init__(self, message, last_good=None, details=None):
        super().__init__(message, EXIT_NUMERICAL_ABORT, 'NUMERICAL_ABORT', details)
        self.last_good = last_good


class UnknownExperimentError(SolverError):
    """Experiment id not among the bundled experiments"""
    def __init__(self, experiment_id, valid_ids):
        super().__init__(
            f"Unknown experiment '{experiment_id}'. Valid ids: {', '.join(valid_ids)}",
            EXIT_UNKNOWN_EXPERIMENT, 'UNKNOWN_EXPERIMENT', {'valid_ids': list(valid_ids)}
        )


class AutodiffError(SolverError):
    """Tape misuse: unregistered leaves, stale losses, width mismatches"""
    def __init__(self, message, details=None):
        super().__init__(message, EXIT_FAILURE, 'AUTODIFF_ERROR', details)


class DomainError(SolverError):
    """Invalid geometric support"""
    def __init__(self, message, details=None):
        super().__init__(message, EXIT_CONFIG_ERROR, 'DOMAIN_ERROR', details)


class SamplingError(SolverError):
    """Rejection sampler could not produce the requested points"""
    def __init__(self, message, details=None):
        super().__init__(message, EXIT_FAILURE, 'SAMPLING_ERROR', details)


class MapConstructionError(SolverError):
    """Reference map could not be built as a gradient of a convex potential"""
    def __init__(self, message, details=None):
        super().__init__(message, EXIT_FAILURE, 'MAP_CONSTRUCTION_ERROR', details)


def create_error_response(message, error_code=None, details=None):
    """Standard error payload format"""
    return {
        'status': 'error',
        'error': {
            'code': error_code or 'UNKNOWN_ERROR',
            'message': message,
            'details': details,
            'timestamp': datetime.now(timezone.utc).isoformat()
        }
    }


def create_success_response(data=None, message=None):
    """Standard success payload format"""
    return {
        'status': 'success',
        'data': data,
        'message': message,
        'timestamp': datetime.now(timezone.utc).isoformat()
    }


def handle_solver_error(error):
    """Global handler for SolverError, returns the process exit code"""
    logger.error(f"{error.__class__.__name__}: {error.message} (code: {error.error_code})")
    payload = create_error_response(
        message=error.message,
        error_code=error.error_code,
        details=error.details
    )
    return payload, error.exit_code


def handle_generic_error(error):
    """Global handler for unexpected exceptions"""
    logger.exception(f"Unexpected error: {str(error)}")
    payload = create_error_response(
        message="Internal solver error",
        error_code="INTERNAL_ERROR",
        details=str(error)
    )
    return payload, EXIT_FAILURE
