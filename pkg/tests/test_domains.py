import math

import numpy as np
import pytest
from scipy import stats

from app.problems.domains import DomainSpec, contains, sample_boundary, sample_interior
from app.utils.error_handler import DomainError, SamplingError


@pytest.fixture
def disk():
    return DomainSpec.unit_ball(2)


@pytest.fixture
def ellipse():
    return DomainSpec.ball_image([[2.0, 0.0], [0.0, 0.5]], [3.5, 0.0])


@pytest.fixture
def square():
    return DomainSpec.unit_cube(2)


class TestContains:
    """Test cases for strict interior membership"""

    def test_disk(self, disk):
        assert contains(disk, np.array([0.0, 0.0]))
        assert not contains(disk, np.array([1.0, 0.0]))
        assert not contains(disk, np.array([0.8, 0.8]))

    def test_ellipse(self, ellipse):
        assert contains(ellipse, np.array([3.5, 0.0]))
        assert contains(ellipse, np.array([5.4, 0.0]))
        assert not contains(ellipse, np.array([3.5, 0.6]))

    def test_box_vectorized(self, square):
        result = square.contains(np.array([[0.5, 0.5], [0.0, 0.5], [1.2, 0.3]]))

        assert result.tolist() == [True, False, False]

    def test_dimension_mismatch(self, disk):
        with pytest.raises(DomainError):
            disk.contains(np.zeros((2, 3)))


class TestConstruction:
    """Test cases for domain validation"""

    def test_box_bounds(self):
        with pytest.raises(DomainError):
            DomainSpec.box([0.0, 1.0], [1.0, 1.0])

    def test_ball_not_positive_definite(self):
        with pytest.raises(DomainError, match="positive definite"):
            DomainSpec.ball_image([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])

    def test_ball_not_symmetric(self):
        with pytest.raises(DomainError, match="symmetric"):
            DomainSpec.ball_image([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])

    def test_volume(self, disk, ellipse, square):
        assert disk.volume() == pytest.approx(math.pi)
        assert ellipse.volume() == pytest.approx(math.pi)
        assert square.volume() == 1.0
        assert DomainSpec.unit_ball(3).volume() == pytest.approx(4.0 * math.pi / 3.0)


class TestInteriorSampling:
    """Test cases for rejection sampling of interior points"""

    def test_points_inside(self, disk):
        batch = sample_interior(disk, 100, seed=0)

        assert len(batch) == 100
        assert bool(disk.contains(batch.points).all())
        assert batch.domain_id == 'unit_disk'

    def test_prefix_property(self, ellipse):
        small = ellipse.sample_interior(50, seed=4)
        large = ellipse.sample_interior(5000, seed=4)

        assert np.array_equal(small.points, large.points[:50])

    def test_seed_changes_points(self, disk):
        assert not np.array_equal(disk.sample_interior(10, 0).points, disk.sample_interior(10, 1).points)

    def test_box_mean(self):
        box = DomainSpec.box([0.0, -1.0], [2.0, 3.0])
        points = box.sample_interior(20000, seed=3).points
        stderr = (box.upper - box.lower) / math.sqrt(12.0 * 20000)

        assert np.all(np.abs(points.mean(axis=0) - [1.0, 1.0]) < 4 * stderr)

    def test_uniform_cells(self, square):
        points = square.sample_interior(100_000, seed=7).points
        counts, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=4, range=[[0, 1], [0, 1]])
        _, p_value = stats.chisquare(counts.ravel())

        assert p_value > 1e-3

    def test_degenerate_domain(self):
        """A nearly flat ellipse has no measurable interior for the sampler"""
        a = 0.5 + 0.5e-12
        b = 0.5 - 0.5e-12
        sliver = DomainSpec.ball_image([[a, b], [b, a]], [0.0, 0.0])

        with pytest.raises(SamplingError):
            sliver.sample_interior(10, seed=0)

    def test_nonpositive_count(self, disk):
        with pytest.raises(ValueError):
            disk.sample_interior(0, seed=0)


class TestBoundarySampling:
    """Test cases for boundary samplers"""

    def test_disk_on_circle(self, disk):
        points = sample_boundary(disk, 500, seed=1).points

        assert np.all(np.abs((points ** 2).sum(axis=1) - 1.0) <= 1e-12)

    def test_ellipse_implicit(self, ellipse):
        points = ellipse.sample_boundary(500, seed=2).points

        assert np.all(np.abs(ellipse.implicit(points)) <= 1e-12)

    def test_sphere(self):
        ball = DomainSpec.unit_ball(3)
        points = ball.sample_boundary(300, seed=0).points

        assert np.all(np.abs(np.linalg.norm(points, axis=1) - 1.0) <= 1e-12)

    def test_square_edges_balanced(self, square):
        n = 40_000
        points = square.sample_boundary(n, seed=5).points
        counts = [
            int((points[:, 0] == 0.0).sum()), int((points[:, 0] == 1.0).sum()),
            int((points[:, 1] == 0.0).sum()), int((points[:, 1] == 1.0).sum()),
        ]
        bound = 3 * math.sqrt(n * 0.25 * 0.75)

        assert sum(counts) == n
        assert all(abs(c - n / 4) <= bound for c in counts)

    def test_box_faces_area_weighted(self):
        box = DomainSpec.box([0.0, 0.0], [3.0, 1.0])
        points = box.sample_boundary(20_000, seed=0).points
        on_long_faces = int(((points[:, 1] == 0.0) | (points[:, 1] == 1.0)).sum())

        # faces y = 0 and y = 1 carry 3/4 of the perimeter
        assert abs(on_long_faces / 20_000 - 0.75) < 0.02
