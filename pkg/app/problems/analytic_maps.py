"""
Reference transport maps used to measure the error of ∇u_NN.

Affine maps T(x) = A x + t with A symmetric positive definite are gradients of
the convex quadratic ½ xᵀA x + tᵀx. Separable maps are per-axis monotone
rearrangements m_i = G_i⁻¹ ∘ F_i stored as monotone lookup tables.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

from app.config import TABLE_NODES, SIMPSON_PANELS, BISECTION_TOL
from app.engine.autodiff import DTYPE, SecondOrderDual
from app.problems.densities import DensitySpec
from app.utils.error_handler import MapConstructionError, UnsupportedConfigurationError

logger = logging.getLogger(__name__)

ROTATION_J = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class ReferenceMap:
    kind: str
    dim: int
    matrix: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    tables: Tuple[PchipInterpolator, ...] = ()
    domains: Tuple[str, str] = ("source", "target")

    @classmethod
    def affine(cls, matrix, offset, domains=("source", "target")) -> "ReferenceMap":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        offset = np.asarray(offset, dtype=np.float64).reshape(-1)
        if not np.allclose(matrix, matrix.T, atol=1e-12):
            raise MapConstructionError("Affine reference map must be symmetric",
                                       {'matrix': matrix.tolist()})
        matrix = 0.5 * (matrix + matrix.T)
        if np.linalg.eigvalsh(matrix).min() <= 0:
            raise MapConstructionError("Affine reference map must be positive definite",
                                       {'matrix': matrix.tolist()})
        return cls('affine', matrix.shape[0], matrix=matrix, offset=offset, domains=domains)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == 'affine':
            return x @ self.matrix.T + self.offset
        return np.stack([self.tables[i](x[:, i]) for i in range(self.dim)], axis=1)

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == 'affine':
            return np.broadcast_to(self.matrix, (x.shape[0], self.dim, self.dim)).copy()
        jac = np.zeros((x.shape[0], self.dim, self.dim))
        for i in range(self.dim):
            jac[:, i, i] = self.tables[i].derivative()(x[:, i])
        return jac

    def jacobian_det(self, x) -> np.ndarray:
        return np.linalg.det(self.jacobian(x))

    def torch_map(self, x: torch.Tensor) -> torch.Tensor:
        """T(x) for a torch batch (no parameter dependence)."""
        if self.kind == 'affine':
            return x @ torch.as_tensor(self.matrix, dtype=DTYPE).T + torch.as_tensor(self.offset, dtype=DTYPE)
        return torch.as_tensor(self(x.detach().numpy()), dtype=DTYPE)

    def potential(self, x) -> np.ndarray:
        """½ xᵀA x + tᵀx (affine maps only)."""
        self._require_affine()
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return 0.5 * np.einsum('ni,ij,nj->n', x, self.matrix, x) + x @ self.offset

    def potential_dual(self, x: SecondOrderDual) -> SecondOrderDual:
        self._require_affine()
        a = torch.as_tensor(self.matrix, dtype=DTYPE)
        t = torch.as_tensor(self.offset, dtype=DTYPE)
        quadratic = (x * x.linear(a)).sum() * 0.5
        return quadratic + x.linear(t.unsqueeze(0))

    def as_network(self) -> "QuadraticPotential":
        self._require_affine()
        return QuadraticPotential(self)

    def _require_affine(self):
        if self.kind != 'affine':
            raise UnsupportedConfigurationError("Closed-form potential exists for affine maps only")


class QuadraticPotential:
    """Potential of an affine map, callable wherever an ICNN is."""

    def __init__(self, reference: ReferenceMap):
        self.reference = reference
        self.input_dim = reference.dim

    def __call__(self, x):
        if isinstance(x, SecondOrderDual):
            return self.reference.potential_dual(x)
        values = self.reference.potential(torch.as_tensor(x, dtype=DTYPE).detach().numpy())
        return torch.as_tensor(values, dtype=DTYPE)


def disk_to_ellipse_exact() -> ReferenceMap:
    """∇u_ex(x) = (2 x1 + 7/2, x2 / 2) from the unit disk onto the ellipse centred at (3.5, 0)."""
    return ReferenceMap.affine(np.diag([2.0, 0.5]), [3.5, 0.0], domains=("unit_disk", "ellipse"))


def rotation(theta: float) -> np.ndarray:
    return np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])


def ellipse_to_ellipse_exact(m_x, m_y) -> ReferenceMap:
    """T = M_Y R_θ M_X⁻¹ with tan θ = tr(M_X⁻¹M_Y⁻¹J) / tr(M_X⁻¹M_Y⁻¹)."""
    m_x = np.asarray(m_x, dtype=np.float64)
    m_y = np.asarray(m_y, dtype=np.float64)
    for name, m in (('M_X', m_x), ('M_Y', m_y)):
        if m.shape != (2, 2) or not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
            raise MapConstructionError(f"{name} must be a symmetric positive definite 2x2 matrix",
                                       {name: m.tolist()})
    b = np.linalg.inv(m_x) @ np.linalg.inv(m_y)
    theta = math.atan2(np.trace(b @ ROTATION_J), np.trace(b))
    m_x_inv = np.linalg.inv(m_x)
    for candidate in (theta, theta + math.pi):
        t = m_y @ rotation(candidate) @ m_x_inv
        if np.allclose(t, t.T, atol=1e-12) and np.linalg.eigvalsh(0.5 * (t + t.T)).min() > 0:
            logger.debug("Ellipse map angle %.6f rad", candidate)
            return ReferenceMap.affine(t, np.zeros(2), domains=("ellipse_x", "ellipse_y"))
    raise MapConstructionError("No branch of θ gives a symmetric positive definite map",
                               {'theta': theta})


def _cumulative_simpson(values: np.ndarray, h: float) -> np.ndarray:
    """Cumulative Simpson integral at every even node of a uniform grid."""
    pairs = (values[:-2:2] + 4.0 * values[1:-1:2] + values[2::2]) * (h / 3.0)
    return np.concatenate([[0.0], np.cumsum(pairs)])


def _invert_monotone(cdf, targets: np.ndarray, low: float, high: float) -> np.ndarray:
    # vectorized bisection
    a = np.full(targets.shape, low)
    b = np.full(targets.shape, high)
    while np.max(b - a) > BISECTION_TOL:
        mid = 0.5 * (a + b)
        below = cdf(mid) < targets
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    return 0.5 * (a + b)


def _cdf_table(density: DensitySpec, axis: int):
    low, high = density.support.lower[axis], density.support.upper[axis]
    fine = np.linspace(low, high, SIMPSON_PANELS + 1)
    h = (high - low) / SIMPSON_PANELS
    cumulative = _cumulative_simpson(density.marginal_pdf(axis, fine), h)
    nodes = fine[::2]
    cdf = cumulative / cumulative[-1]
    return nodes, np.maximum.accumulate(cdf)


def separable_rearrangement(f: DensitySpec, g: DensitySpec) -> ReferenceMap:
    """Product of 1D monotone rearrangements G_i⁻¹ ∘ F_i between box densities."""
    if f.dim != g.dim:
        raise UnsupportedConfigurationError("Source and target dimensions differ")
    if not (f.is_separable() and g.is_separable()):
        raise UnsupportedConfigurationError(
            "Separable rearrangement needs axis-separable densities on boxes",
            {'source': f.kind, 'target': g.kind}
        )
    node_count = (SIMPSON_PANELS // 2) + 1
    if node_count < TABLE_NODES:
        raise UnsupportedConfigurationError("Simpson grid is coarser than the table resolution")
    tables = []
    for axis in range(f.dim):
        nodes, f_cdf = _cdf_table(f, axis)
        g_nodes, g_cdf = _cdf_table(g, axis)
        g_interp = PchipInterpolator(g_nodes, g_cdf)
        image = _invert_monotone(g_interp, f_cdf, g_nodes[0], g_nodes[-1])
        image = np.maximum.accumulate(image)
        tables.append(PchipInterpolator(nodes, image, extrapolate=True))
    logger.info("Separable rearrangement built with %d nodes per axis", node_count)
    return ReferenceMap('separable', f.dim, tables=tuple(tables),
                        domains=(f.support.name, g.support.name))


def push_forward_check(reference: ReferenceMap, f: DensitySpec, g: DensitySpec, n: int, seed: int) -> float:
    """max_i |f(x_i) - g(T(x_i)) det ∇T(x_i)| over n uniform points of the source support."""
    points = f.support.sample_interior(n, seed).points
    source = f.eval_extended(points)
    target = g.eval_extended(reference(points)) * reference.jacobian_det(points)
    return float(np.max(np.abs(source - target)))


def is_cyclically_monotone(reference: ReferenceMap, a, b) -> np.ndarray:
    """(T(a) - T(b))·(a - b) >= 0 per pair."""
    return ((reference(a) - reference(b)) * (np.asarray(a) - np.asarray(b))).sum(axis=1) >= 0
