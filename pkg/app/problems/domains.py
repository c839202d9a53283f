"""
Supports of the source and target measures: affine images of the unit ball
{M z + c : |z| < 1} (disks, ellipses, balls) and axis-aligned boxes.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from app.config import SAMPLING_CHUNK, MAX_SAMPLING_ROUNDS
from app.utils.error_handler import DomainError, SamplingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PointBatch:
    """N x d points together with where they came from."""
    points: np.ndarray
    sampler: str
    seed: int
    domain_id: str

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def as_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.points, dtype=torch.float64)


@dataclass(frozen=True, eq=False)
class DomainSpec:
    kind: str
    dim: int
    matrix: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    name: str = "domain"

    @classmethod
    def ball_image(cls, matrix, center, name="ellipse") -> "DomainSpec":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        center = np.asarray(center, dtype=np.float64).reshape(-1)
        d = matrix.shape[0]
        if matrix.shape != (d, d) or center.shape != (d,):
            raise DomainError(f"Ball-image matrix {matrix.shape} and center {center.shape} disagree")
        if not np.allclose(matrix, matrix.T, atol=1e-14):
            raise DomainError("Ball-image matrix must be symmetric", {'matrix': matrix.tolist()})
        if np.linalg.eigvalsh(matrix).min() <= 0:
            raise DomainError("Ball-image matrix must be positive definite", {'matrix': matrix.tolist()})
        return cls('ball', d, matrix=matrix, center=center, name=name)

    @classmethod
    def unit_ball(cls, dim=2, name="unit_disk") -> "DomainSpec":
        return cls.ball_image(np.eye(dim), np.zeros(dim), name=name)

    @classmethod
    def box(cls, lower, upper, name="box") -> "DomainSpec":
        lower = np.asarray(lower, dtype=np.float64).reshape(-1)
        upper = np.asarray(upper, dtype=np.float64).reshape(-1)
        if lower.shape != upper.shape:
            raise DomainError("Box bounds have different dimensions")
        if np.any(lower >= upper):
            raise DomainError("Box needs lower < upper on every axis",
                              {'lower': lower.tolist(), 'upper': upper.tolist()})
        return cls('box', lower.shape[0], lower=lower, upper=upper, name=name)

    @classmethod
    def unit_cube(cls, dim=2, name=None) -> "DomainSpec":
        return cls.box(np.zeros(dim), np.ones(dim), name=name or f"unit_box_{dim}d")

    # -- geometry -----------------------------------------------------------

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == 'box':
            return self.lower, self.upper
        # extent of {Mz : |z| <= 1} along axis i is the norm of row i of M
        half = np.linalg.norm(self.matrix, axis=1)
        return self.center - half, self.center + half

    def volume(self) -> float:
        if self.kind == 'box':
            return float(np.prod(self.upper - self.lower))
        unit_ball = math.pi ** (self.dim / 2) / math.gamma(self.dim / 2 + 1)
        return float(unit_ball * np.linalg.det(self.matrix))

    def implicit(self, x) -> np.ndarray:
        """F(x): negative inside, zero on the boundary, positive outside."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == 'box':
            return np.maximum(self.lower - x, x - self.upper).max(axis=1)
        z = np.linalg.solve(self.matrix, (x - self.center).T).T
        return (z ** 2).sum(axis=1) - 1.0

    def contains(self, x) -> np.ndarray:
        """Strict interior membership, vectorized over rows."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise DomainError(f"Point dimension {x.shape[1]} does not match domain dimension {self.dim}")
        if self.kind == 'box':
            inside = np.all((x > self.lower) & (x < self.upper), axis=1)
        else:
            inside = self.implicit(x) < 0.0
        return bool(inside[0]) if single else inside

    # -- sampling -----------------------------------------------------------

    def sample_interior(self, n: int, seed: int) -> PointBatch:
        """n uniform interior points by rejection from the bounding box.

        Candidates are drawn in fixed-size chunks from one stream, so the first k
        points for a seed do not depend on n.
        """
        if n < 1:
            raise ValueError(f"Sample size must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        low, high = self.bounding_box()
        accepted = []
        count = 0
        for _ in range(MAX_SAMPLING_ROUNDS):
            candidates = rng.uniform(low, high, size=(SAMPLING_CHUNK, self.dim))
            inside = candidates[self.contains(candidates)]
            accepted.append(inside)
            count += inside.shape[0]
            if count >= n:
                points = np.concatenate(accepted)[:n]
                return PointBatch(points, 'uniform_interior', seed, self.name)
        raise SamplingError(
            f"Could not draw {n} interior points of '{self.name}' after "
            f"{MAX_SAMPLING_ROUNDS * SAMPLING_CHUNK} candidates",
            {'accepted': count, 'domain': self.name}
        )

    def sample_boundary(self, n: int, seed: int) -> PointBatch:
        """n points on the boundary: angle/sphere-uniform pre-image for balls, area-weighted faces for boxes."""
        if n < 1:
            raise ValueError(f"Sample size must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        if self.kind == 'ball':
            if self.dim == 2:
                angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
                z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            else:
                z = rng.standard_normal((n, self.dim))
                z /= np.linalg.norm(z, axis=1, keepdims=True)
            points = z @ self.matrix.T + self.center
            return PointBatch(points, 'ball_boundary', seed, self.name)

        extent = self.upper - self.lower
        face_area = np.array([np.prod(np.delete(extent, axis)) for axis in range(self.dim)])
        # faces ordered (axis 0 low, axis 0 high, axis 1 low, ...)
        weights = np.repeat(face_area, 2)
        faces = rng.choice(2 * self.dim, size=n, p=weights / weights.sum())
        points = rng.uniform(self.lower, self.upper, size=(n, self.dim))
        axes = faces // 2
        on_high = faces % 2 == 1
        rows = np.arange(n)
        points[rows, axes] = np.where(on_high, self.upper[axes], self.lower[axes])
        return PointBatch(points, 'box_boundary', seed, self.name)

    def to_dict(self) -> dict:
        if self.kind == 'box':
            return {'kind': 'box', 'lower': self.lower.tolist(), 'upper': self.upper.tolist()}
        return {'kind': 'ball', 'matrix': self.matrix.tolist(), 'center': self.center.tolist()}


def contains(domain: DomainSpec, x) -> bool:
    return domain.contains(x)


def sample_interior(domain: DomainSpec, n: int, seed: int) -> PointBatch:
    return domain.sample_interior(n, seed)


def sample_boundary(domain: DomainSpec, n: int, seed: int) -> PointBatch:
    return domain.sample_boundary(n, seed)
