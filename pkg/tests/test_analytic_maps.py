import numpy as np
import pytest

from app.engine.autodiff import eval_with_input_derivatives
from app.problems.analytic_maps import (
    ReferenceMap, disk_to_ellipse_exact, ellipse_to_ellipse_exact, is_cyclically_monotone,
    push_forward_check, separable_rearrangement
)
from app.problems.densities import DensitySpec, GaussianComponent
from app.problems.domains import DomainSpec
from app.utils.error_handler import MapConstructionError, UnsupportedConfigurationError

M_X = np.array([[0.8, 0.0], [0.0, 0.4]])
M_Y = np.array([[0.8, 0.2], [0.2, 0.6]])


@pytest.fixture
def unit_square_uniform():
    return DensitySpec.uniform(DomainSpec.unit_cube(2))


@pytest.fixture
def square_gaussian():
    return DensitySpec.gaussian_mixture(
        DomainSpec.unit_cube(2), [GaussianComponent.isotropic([0.25, 0.75], 0.25)])


class TestDiskToEllipse:
    """Test cases for the closed-form disk to ellipse map"""

    def test_examples(self):
        reference = disk_to_ellipse_exact()

        assert np.array_equal(reference([0.0, 0.0])[0], [3.5, 0.0])
        assert np.array_equal(reference([1.0, 0.0])[0], [5.5, 0.0])
        assert np.array_equal(reference([0.0, 1.0])[0], [3.5, 0.5])

    def test_jacobian_determinant_is_one(self):
        reference = disk_to_ellipse_exact()

        assert np.allclose(reference.jacobian_det(np.zeros((3, 2))), 1.0, atol=1e-15)

    def test_boundary_onto_boundary(self):
        reference = disk_to_ellipse_exact()
        ellipse = DomainSpec.ball_image([[2.0, 0.0], [0.0, 0.5]], [3.5, 0.0])
        images = reference(DomainSpec.unit_ball(2).sample_boundary(200, seed=0).points)

        assert np.all(np.abs(ellipse.implicit(images)) < 1e-12)

    def test_potential_network_gradient(self):
        reference = disk_to_ellipse_exact()
        x = np.random.default_rng(1).uniform(-1, 1, size=(20, 2))
        _, grad, hess = eval_with_input_derivatives(reference.as_network(), x)

        assert np.allclose(grad.numpy(), reference(x), atol=1e-14)
        assert np.allclose(hess.numpy(), reference.jacobian(x), atol=1e-14)


class TestEllipseToEllipse:
    """Test cases for the rotated ellipse map"""

    def test_identity(self):
        reference = ellipse_to_ellipse_exact(M_X, M_X)

        assert np.allclose(reference.matrix, np.eye(2), atol=1e-12)

    def test_scaling(self):
        reference = ellipse_to_ellipse_exact(np.eye(2), np.diag([2.0, 3.0]))

        assert np.allclose(reference.matrix, np.diag([2.0, 3.0]), atol=1e-12)

    def test_symmetric_positive_definite(self):
        reference = ellipse_to_ellipse_exact(M_X, M_Y)

        assert np.allclose(reference.matrix, reference.matrix.T, atol=1e-12)
        assert np.linalg.eigvalsh(reference.matrix).min() > 0

    def test_push_forward(self):
        source = DensitySpec.uniform(DomainSpec.ball_image(M_X, [0.0, 0.0]))
        target = DensitySpec.uniform(DomainSpec.ball_image(M_Y, [0.0, 0.0]))
        reference = ellipse_to_ellipse_exact(M_X, M_Y)

        assert push_forward_check(reference, source, target, 500, seed=0) <= 1e-10

    def test_interior_maps_into_target(self):
        reference = ellipse_to_ellipse_exact(M_X, M_Y)
        source = DomainSpec.ball_image(M_X, [0.0, 0.0])
        target = DomainSpec.ball_image(M_Y, [0.0, 0.0])
        images = reference(source.sample_interior(1000, seed=2).points)

        assert bool(target.contains(images).all())

    def test_non_positive_definite_input(self):
        with pytest.raises(MapConstructionError):
            ellipse_to_ellipse_exact(np.array([[1.0, 0.0], [0.0, -1.0]]), M_Y)


class TestAffine:
    """Test cases for affine reference maps"""

    def test_rejects_non_symmetric(self):
        with pytest.raises(MapConstructionError, match="symmetric"):
            ReferenceMap.affine([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])

    def test_rejects_indefinite(self):
        with pytest.raises(MapConstructionError, match="positive definite"):
            ReferenceMap.affine([[1.0, 0.0], [0.0, -2.0]], [0.0, 0.0])

    def test_potential_matches_map(self):
        reference = ReferenceMap.affine([[2.0, 0.5], [0.5, 1.0]], [1.0, -1.0])
        x = np.array([[0.3, 0.4]])
        h = 1e-6
        numeric = [
            (reference.potential(x + h * e) - reference.potential(x - h * e))[0] / (2 * h)
            for e in np.eye(2)
        ]

        assert np.allclose(numeric, reference(x)[0], atol=1e-8)

    def test_separable_has_no_potential(self, unit_square_uniform):
        reference = separable_rearrangement(unit_square_uniform, unit_square_uniform)

        with pytest.raises(UnsupportedConfigurationError):
            reference.as_network()


class TestSeparableRearrangement:
    """Test cases for per-axis monotone rearrangements"""

    def test_identical_densities_give_identity(self, square_gaussian):
        reference = separable_rearrangement(square_gaussian, square_gaussian)
        x = np.random.default_rng(0).uniform(0, 1, size=(500, 2))

        assert np.allclose(reference(x), x, atol=1e-8)

    def test_uniform_to_uniform(self, unit_square_uniform):
        reference = separable_rearrangement(unit_square_uniform, unit_square_uniform)
        x = np.random.default_rng(1).uniform(0, 1, size=(200, 2))

        assert np.allclose(reference(x), x, atol=1e-8)

    def test_gaussian_to_uniform_is_marginal_cdf(self, square_gaussian, unit_square_uniform):
        """Onto the uniform square each axis map is the source marginal CDF"""
        reference = separable_rearrangement(square_gaussian, unit_square_uniform)
        image = reference(np.array([[0.25, 0.75]]))[0]

        assert image[0] == pytest.approx(float(square_gaussian.marginal_cdf(0, 0.25)), abs=1e-8)
        assert image[1] == pytest.approx(float(square_gaussian.marginal_cdf(1, 0.75)), abs=1e-8)

    def test_push_forward(self, square_gaussian, unit_square_uniform):
        reference = separable_rearrangement(square_gaussian, unit_square_uniform)

        assert push_forward_check(reference, square_gaussian, unit_square_uniform, 1000, seed=4) <= 1e-4

    def test_rejects_non_separable(self, unit_square_uniform):
        disk = DensitySpec.uniform(DomainSpec.unit_ball(2))

        with pytest.raises(UnsupportedConfigurationError):
            separable_rearrangement(disk, unit_square_uniform)

    def test_rejects_mixture_varying_on_two_axes(self, unit_square_uniform):
        mixture = DensitySpec.gaussian_mixture(DomainSpec.unit_cube(2), [
            GaussianComponent.isotropic([0.2, 0.2], 0.1),
            GaussianComponent.isotropic([0.8, 0.8], 0.1),
        ])

        with pytest.raises(UnsupportedConfigurationError):
            separable_rearrangement(mixture, unit_square_uniform)


class TestCyclicMonotonicity:
    """Test cases for monotonicity of every reference map"""

    @pytest.mark.parametrize("builder", [
        disk_to_ellipse_exact,
        lambda: ellipse_to_ellipse_exact(M_X, M_Y),
    ])
    def test_affine_maps(self, builder):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, size=(300, 2))
        b = rng.uniform(-1, 1, size=(300, 2))

        assert bool(is_cyclically_monotone(builder(), a, b).all())

    def test_separable_map(self, square_gaussian, unit_square_uniform):
        reference = separable_rearrangement(square_gaussian, unit_square_uniform)
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, size=(300, 2))
        b = rng.uniform(0, 1, size=(300, 2))

        assert bool(is_cyclically_monotone(reference, a, b).all())
