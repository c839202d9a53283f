"""
Probability densities on a DomainSpec: uniform, and truncated Gaussian mixtures
on boxes (isotropic, anisotropic and bimodal variants).

    f(x) = c0 · Σ_k w_k exp(-Σ_i (x_i - x0_ki)² / (2 σ²_ki)) · χ_support(x)
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
import torch
from scipy import integrate
from scipy.special import ndtr

from app.config import SAMPLING_CHUNK, MAX_SAMPLING_ROUNDS, MIN_ACCEPTANCE_RATE, DENSITY_NORMALIZATION_TOL
from app.problems.domains import DomainSpec, PointBatch
from app.utils.error_handler import SamplingError, UnsupportedConfigurationError, SolverError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    center: np.ndarray
    variances: np.ndarray
    weight: float = 1.0

    @classmethod
    def isotropic(cls, center, variance, weight=1.0) -> "GaussianComponent":
        center = np.asarray(center, dtype=np.float64)
        return cls(center, np.full(center.shape, float(variance)), float(weight))

    def axis_mass(self, axis: int, low: float, high: float) -> float:
        """∫_low^high exp(-(t - x0)² / 2σ²) dt."""
        sigma = math.sqrt(self.variances[axis])
        mu = self.center[axis]
        return sigma * math.sqrt(2 * math.pi) * float(ndtr((high - mu) / sigma) - ndtr((low - mu) / sigma))


@dataclass(frozen=True, eq=False)
class DensitySpec:
    kind: str
    support: DomainSpec
    components: Tuple[GaussianComponent, ...] = ()
    c0: float = field(default=float('nan'))

    @property
    def dim(self) -> int:
        return self.support.dim

    @classmethod
    def uniform(cls, support: DomainSpec) -> "DensitySpec":
        spec = cls('uniform', support)
        return replace(spec, c0=normalize(spec))

    @classmethod
    def gaussian_mixture(cls, support: DomainSpec, components) -> "DensitySpec":
        components = tuple(components)
        if not components:
            raise UnsupportedConfigurationError("Gaussian mixture needs at least one component")
        for component in components:
            if component.center.shape != (support.dim,) or component.variances.shape != (support.dim,):
                raise UnsupportedConfigurationError(
                    f"Component dimension does not match support dimension {support.dim}")
            if np.any(component.variances <= 0) or component.weight <= 0:
                raise UnsupportedConfigurationError("Variances and weights must be positive")
        spec = cls('gaussian_mixture', support, components)
        spec = replace(spec, c0=normalize(spec))
        _verify_normalization(spec)
        return spec

    # -- evaluation ---------------------------------------------------------

    def eval_extended(self, y):
        """Density value extended to all of R^d; torch in, torch out (numpy in, numpy out)."""
        as_numpy = not isinstance(y, torch.Tensor)
        y_t = torch.as_tensor(np.asarray(y) if as_numpy else y, dtype=torch.float64)
        single = y_t.dim() == 1
        y_t = y_t.reshape(-1, self.dim)
        if self.kind == 'uniform':
            values = torch.full((y_t.shape[0],), self.c0, dtype=torch.float64)
        else:
            values = torch.zeros(y_t.shape[0], dtype=torch.float64)
            for component in self.components:
                center = torch.as_tensor(component.center, dtype=torch.float64)
                variances = torch.as_tensor(component.variances, dtype=torch.float64)
                exponent = ((y_t - center) ** 2 / (2.0 * variances)).sum(dim=1)
                values = values + component.weight * torch.exp(-exponent)
            values = self.c0 * values
        if single:
            values = values[0]
        return values.detach().numpy() if as_numpy else values

    def evaluate(self, x) -> np.ndarray:
        """Density including the characteristic function of the support."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.eval_extended(x) * self.support.contains(x)

    def envelope(self) -> float:
        """Upper bound of the density on its support."""
        if self.kind == 'uniform':
            return self.c0
        low, high = self.support.lower, self.support.upper
        bound = 0.0
        for component in self.components:
            nearest = np.clip(component.center, low, high)
            bound += component.weight * math.exp(
                -float(((nearest - component.center) ** 2 / (2.0 * component.variances)).sum()))
        return self.c0 * bound

    # -- separable structure ------------------------------------------------

    def is_separable(self) -> bool:
        """Product of per-axis marginals: uniform boxes, or mixtures differing on <= 1 axis."""
        if self.support.kind != 'box':
            return False
        if self.kind == 'uniform':
            return True
        first = self.components[0]
        differing = set()
        for component in self.components[1:]:
            for axis in range(self.dim):
                if (component.center[axis] != first.center[axis]
                        or component.variances[axis] != first.variances[axis]):
                    differing.add(axis)
        return len(differing) <= 1

    def marginal_pdf(self, axis: int, t) -> np.ndarray:
        """1D marginal density along ``axis`` on the box support."""
        t = np.asarray(t, dtype=np.float64)
        low, high = self.support.lower, self.support.upper
        if self.kind == 'uniform':
            return np.full(t.shape, 1.0 / (high[axis] - low[axis]))
        values = np.zeros(t.shape)
        for component in self.components:
            other = 1.0
            for j in range(self.dim):
                if j != axis:
                    other *= component.axis_mass(j, low[j], high[j])
            values += component.weight * other * np.exp(
                -(t - component.center[axis]) ** 2 / (2.0 * component.variances[axis]))
        return self.c0 * values

    def marginal_cdf(self, axis: int, t) -> np.ndarray:
        """Closed-form marginal CDF on the box support."""
        t = np.asarray(t, dtype=np.float64)
        low, high = self.support.lower, self.support.upper
        clipped = np.clip(t, low[axis], high[axis])
        if self.kind == 'uniform':
            return (clipped - low[axis]) / (high[axis] - low[axis])
        values = np.zeros(t.shape)
        for component in self.components:
            other = 1.0
            for j in range(self.dim):
                if j != axis:
                    other *= component.axis_mass(j, low[j], high[j])
            sigma = math.sqrt(component.variances[axis])
            mu = component.center[axis]
            partial = sigma * math.sqrt(2 * math.pi) * (ndtr((clipped - mu) / sigma) - ndtr((low[axis] - mu) / sigma))
            values += component.weight * other * partial
        return self.c0 * values

    def cell_masses(self, edges) -> np.ndarray:
        """Probability of every cell of a rectilinear grid (one edge array per axis), box supports only."""
        if self.support.kind != 'box':
            raise UnsupportedConfigurationError("Cell masses need a box support")
        low, high = self.support.lower, self.support.upper
        if self.kind == 'uniform':
            per_axis = []
            for axis, e in enumerate(edges):
                clipped = np.clip(np.asarray(e, dtype=np.float64), low[axis], high[axis])
                per_axis.append(np.diff(clipped) / (high[axis] - low[axis]))
            return _outer(per_axis)
        total = 0.0
        for component in self.components:
            per_axis = []
            for axis, e in enumerate(edges):
                clipped = np.clip(np.asarray(e, dtype=np.float64), low[axis], high[axis])
                sigma = math.sqrt(component.variances[axis])
                mu = component.center[axis]
                cdf = sigma * math.sqrt(2 * math.pi) * ndtr((clipped - mu) / sigma)
                per_axis.append(np.diff(cdf))
            total = total + component.weight * _outer(per_axis)
        return self.c0 * total

    # -- sampling -----------------------------------------------------------

    def sample(self, n: int, seed: int) -> PointBatch:
        """n i.i.d. draws from the truncated density."""
        if self.kind == 'uniform':
            return self.support.sample_interior(n, seed)
        if n < 1:
            raise ValueError(f"Sample size must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        low, high = self.support.bounding_box()
        envelope = self.envelope()
        accepted = []
        count = 0
        drawn = 0
        for _ in range(MAX_SAMPLING_ROUNDS):
            candidates = rng.uniform(low, high, size=(SAMPLING_CHUNK, self.dim))
            heights = rng.uniform(0.0, envelope, size=SAMPLING_CHUNK)
            keep = (heights < self.evaluate(candidates))
            accepted.append(candidates[keep])
            count += int(keep.sum())
            drawn += SAMPLING_CHUNK
            if count >= n:
                return PointBatch(np.concatenate(accepted)[:n], 'density_rejection', seed, self.support.name)
            if drawn >= 50 * SAMPLING_CHUNK and count / drawn < MIN_ACCEPTANCE_RATE:
                break
        raise SamplingError(
            f"Rejection sampler acceptance rate {count / drawn:.2e} below {MIN_ACCEPTANCE_RATE:.0e}; "
            f"envelope {envelope:.3e} is too loose",
            {'accepted': count, 'drawn': drawn}
        )

    def to_dict(self) -> dict:
        payload = {'kind': self.kind, 'support': self.support.to_dict(), 'c0': self.c0}
        if self.components:
            payload['components'] = [
                {'center': c.center.tolist(), 'variances': c.variances.tolist(), 'weight': c.weight}
                for c in self.components
            ]
        return payload


def _outer(per_axis):
    result = per_axis[0]
    for factor in per_axis[1:]:
        result = np.multiply.outer(result, factor)
    return result


def normalize_uniform(support: DomainSpec) -> float:
    return 1.0 / support.volume()


def normalize_mixture(support: DomainSpec, components) -> float:
    """c0 from per-axis Gaussian CDF differences of every component."""
    if support.kind != 'box':
        raise UnsupportedConfigurationError(
            "Gaussian densities are only supported on box domains",
            {'support': support.kind}
        )
    mass = 0.0
    for component in components:
        prod = component.weight
        for axis in range(support.dim):
            prod *= component.axis_mass(axis, support.lower[axis], support.upper[axis])
        mass += prod
    return 1.0 / mass


def normalize(spec: DensitySpec) -> float:
    """c0 making the density integrate to one over its support; ignores spec.c0."""
    if spec.kind == 'uniform':
        return normalize_uniform(spec.support)
    return normalize_mixture(spec.support, spec.components)


def _verify_normalization(spec: DensitySpec):
    # per-axis adaptive quadrature of every component against the CDF masses
    low, high = spec.support.lower, spec.support.upper
    total = 0.0
    for component in spec.components:
        prod = component.weight
        for axis in range(spec.dim):
            mu, var = component.center[axis], component.variances[axis]
            value, _ = integrate.quad(lambda t: math.exp(-(t - mu) ** 2 / (2 * var)), low[axis], high[axis],
                                      epsabs=1e-13, epsrel=1e-12)
            prod *= value
        total += prod
    integral = spec.c0 * total
    if abs(integral - 1.0) > DENSITY_NORMALIZATION_TOL:
        raise SolverError(f"Density integrates to {integral:.12f}, expected 1", details={'c0': spec.c0})
    logger.debug("Density normalization verified: integral %.3e off unity", integral - 1.0)


def eval_extended(spec: DensitySpec, y):
    return spec.eval_extended(y)


def sample_density(spec: DensitySpec, n: int, seed: int) -> PointBatch:
    return spec.sample(n, seed)
