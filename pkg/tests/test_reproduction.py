"""
Full-scale experiment reproductions. These take minutes to hours and are
deselected by default; run them with ``pytest -m slow``.
"""
import statistics

import pytest

from app.cli import adam_only
from app.solver.evaluation import (
    boundary_image_check, corner_center_ratio, error_field, sensitivity_sweep, transport_histogram
)
from app.solver.training import run, run_ensemble
from app.utils.experiment_config import load_experiment

pytestmark = pytest.mark.slow


def median(values):
    return statistics.median(v for v in values if v is not None)


class TestDiskToEllipse:
    """Test cases for the disk to ellipse ensemble"""

    @pytest.fixture(scope='class')
    def experiment(self):
        return load_experiment('disk-ellipse')

    @pytest.fixture(scope='class')
    def ensemble(self, experiment):
        return run_ensemble(experiment.run, experiment.runs, experiment.seed_base)

    def test_median_test_error(self, ensemble):
        assert median(m.l2_test for m in ensemble.succeeded) <= 0.01

    def test_median_final_loss(self, ensemble):
        assert median(m.final_loss for m in ensemble.succeeded) <= 1e-3

    def test_lbfgs_beats_adam_only(self, experiment, ensemble):
        baseline = adam_only(experiment)
        adam_ensemble = run_ensemble(baseline.run, experiment.runs, experiment.seed_base)

        assert median(m.l2_test for m in adam_ensemble.succeeded) > median(m.l2_test for m in ensemble.succeeded)


class TestEllipseToEllipse:
    """Test cases for the rotated ellipse map"""

    def test_pointwise_error(self):
        experiment = load_experiment('ellipse-ellipse')
        params, _ = run(experiment.run)
        field_ = error_field(params, experiment.run.reference, experiment.run.source.support, resolution=100)

        assert max(field_.max_error) <= 5e-3


class TestHistogramExperiments:
    """Test cases for the density-to-density experiments"""

    def test_gaussian_to_uniform(self):
        experiment = load_experiment('gauss-uniform')
        config = experiment.run
        params, _ = run(config)
        histogram = transport_histogram(params, config.source, 100_000, 80, seed=0,
                                        grid_domain=config.target.support)
        field_ = error_field(params, config.reference, config.source.support, resolution=100)

        assert histogram.max_mean_ratio() <= 2.0
        assert histogram.overflow_fraction <= 0.01
        assert corner_center_ratio(field_, config.source.support) > 1.0

    def test_bimodal_to_uniform(self):
        config = load_experiment('bimodal-uniform').run
        params, _ = run(config)
        histogram = transport_histogram(params, config.source, 100_000, 80, seed=0,
                                        grid_domain=config.target.support)

        assert histogram.max_mean_ratio() <= 2.0

    def test_gaussian_to_gaussian(self):
        config = load_experiment('gauss-gauss').run
        params, _ = run(config)
        histogram = transport_histogram(params, config.source, 100_000, 80, seed=0,
                                        grid_domain=config.target.support)

        assert histogram.mass_deviation(config.target) <= 0.1


class TestCube:
    """Test cases for the three-dimensional cube"""

    def test_boundary_image_and_histogram(self):
        config = load_experiment('cube-3d').run
        params, _ = run(config)
        support = config.target.support
        histogram = transport_histogram(params, config.source, 100_000, 20, seed=0, grid_domain=support)

        assert boundary_image_check(params, config.source.support, support, n=2000) <= 0.1
        assert histogram.max_mean_ratio() <= 2.0


class TestSensitivityTrends:
    """Test cases for the disk to ellipse sensitivity sweeps"""

    @pytest.fixture(scope='class')
    def experiment(self):
        return load_experiment('disk-ellipse')

    def test_more_epochs_lower_error(self, experiment):
        errors = sensitivity_sweep(experiment.run, 'epochs', [10, 100], runs_per_value=5,
                                   seed_base=experiment.seed_base).mean_errors()

        assert errors[100] < errors[10]

    def test_more_collocation_lower_error(self, experiment):
        errors = sensitivity_sweep(experiment.run, 'collocation', [50, 800], runs_per_value=5,
                                   seed_base=experiment.seed_base).mean_errors()

        assert errors[800] < errors[50]

    def test_balanced_ratio_is_best(self, experiment):
        errors = sensitivity_sweep(experiment.run, 'ratio', [0.25, 1.0, 4.0], runs_per_value=10,
                                   seed_base=experiment.seed_base).mean_errors()

        assert min(errors, key=errors.get) == 1.0
