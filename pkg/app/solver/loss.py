"""
PINN residuals for det D²u = f / g(∇u) with either Dirichlet data or the
transport boundary condition ∇u(∂X) = ∂Y.

    E_PDE = (1/N_c) Σ |det D²u(p_i) - f(p_i) / g(∇u(p_i))|²
    E_b   = (1/N_b) Σ |u(q_i) - h(q_i)|²
    E_OT  = (1/N_bx) Σ_i min_j |∇u(x_i) - y_j|² + (1/N_by) Σ_i min_j |∇u(x_j) - y_i|²

Every function takes a ``network``: anything that maps a SecondOrderDual of
width d to one of width 1 (IcnnParams, MlpParams, QuadraticPotential, ...).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from app.config import BOUNDARY_WEIGHT
from app.engine.autodiff import DTYPE, eval_with_input_derivatives
from app.problems.analytic_maps import ReferenceMap
from app.problems.densities import DensitySpec
from app.problems.domains import PointBatch
from app.utils.error_handler import ConfigError

logger = logging.getLogger(__name__)

BOUNDARY_MODES = ('transport', 'dirichlet')


def _points(batch) -> torch.Tensor:
    if isinstance(batch, PointBatch):
        return batch.as_tensor()
    return torch.as_tensor(batch, dtype=DTYPE)


def hessian_determinant(hess: torch.Tensor) -> torch.Tensor:
    """det of a batch of symmetric (N, d, d) matrices; closed form for d <= 3."""
    d = hess.shape[-1]
    if d == 1:
        return hess[:, 0, 0]
    if d == 2:
        return hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] * hess[:, 1, 0]
    if d == 3:
        # cofactor expansion along the first row
        a = hess
        return (a[:, 0, 0] * (a[:, 1, 1] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 1])
                - a[:, 0, 1] * (a[:, 1, 0] * a[:, 2, 2] - a[:, 1, 2] * a[:, 2, 0])
                + a[:, 0, 2] * (a[:, 1, 0] * a[:, 2, 1] - a[:, 1, 1] * a[:, 2, 0]))
    return torch.linalg.det(hess)


def pde_residuals(network, f: DensitySpec, g: DensitySpec, collocation) -> torch.Tensor:
    """Pointwise det D²u(p) - f(p)/g(∇u(p))."""
    points = _points(collocation)
    _, grad, hess = eval_with_input_derivatives(network, points, order=2)
    return hessian_determinant(hess) - f.eval_extended(points) / g.eval_extended(grad)


def e_pde(network, f: DensitySpec, g: DensitySpec, collocation) -> torch.Tensor:
    return (pde_residuals(network, f, g, collocation) ** 2).mean()


def e_dirichlet(network, h: Callable[[torch.Tensor], torch.Tensor], boundary) -> torch.Tensor:
    points = _points(boundary)
    u, _, _ = eval_with_input_derivatives(network, points, order=0)
    return ((u - h(points)) ** 2).mean()


def nearest_indices(a: torch.Tensor, b: torch.Tensor):
    """For every row of a the index of its nearest row of b, and vice versa.

    Brute force over all pairs; ties resolve to the lowest index.
    """
    with torch.no_grad():
        squared = ((a.detach().unsqueeze(1) - b.detach().unsqueeze(0)) ** 2).sum(dim=-1)
        return torch.argmin(squared, dim=1), torch.argmin(squared, dim=0)


def e_transport(network, source_boundary, target_boundary) -> torch.Tensor:
    """Discrete two-sided Hausdorff-type loss between ∇u(∂X samples) and ∂Y samples."""
    x = _points(source_boundary)
    y = _points(target_boundary)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("Transport loss needs nonempty source and target boundary batches")
    _, images, _ = eval_with_input_derivatives(network, x, order=1)
    to_target, to_image = nearest_indices(images, y)
    injectivity = ((images - y[to_target]) ** 2).sum(dim=1).mean()
    surjectivity = ((images[to_image] - y) ** 2).sum(dim=1).mean()
    return injectivity + surjectivity


def dirichlet_from_reference(reference: ReferenceMap) -> Callable[[torch.Tensor], torch.Tensor]:
    """Boundary data h = potential of an affine reference map."""
    potential = reference.as_network()

    def h(points: torch.Tensor) -> torch.Tensor:
        return potential(points)

    return h


def map_mismatch(network, reference: ReferenceMap, points) -> torch.Tensor:
    """(1/n) Σ |∇u(x_i) - T(x_i)|²."""
    x = _points(points)
    _, grad, _ = eval_with_input_derivatives(network, x, order=1)
    return ((grad - reference.torch_map(x)) ** 2).sum(dim=1).mean()


def map_l2_error(network, reference: ReferenceMap, points, volume: float) -> float:
    """Monte Carlo ‖∇u - T‖_{L²(X)} from uniform samples of X with measure ``volume``."""
    with torch.no_grad():
        mean_square = float(map_mismatch(network, reference, points))
    return (volume * mean_square) ** 0.5


@dataclass(frozen=True)
class LossBreakdown:
    e_pde: float
    e_boundary: float
    total: float
    weight: float
    mode: str
    n_collocation: int
    n_source_boundary: int
    n_target_boundary: int = 0

    def to_dict(self):
        return {
            'e_pde': self.e_pde,
            'e_boundary': self.e_boundary,
            'total': self.total,
            'C': self.weight,
            'mode': self.mode,
            'n_collocation': self.n_collocation,
            'n_source_boundary': self.n_source_boundary,
            'n_target_boundary': self.n_target_boundary,
        }


@dataclass(frozen=True)
class Problem:
    """Everything the composite loss needs for one run; point batches are fixed."""
    source: DensitySpec
    target: DensitySpec
    collocation: PointBatch
    source_boundary: Optional[PointBatch] = None
    target_boundary: Optional[PointBatch] = None
    boundary_mode: str = 'transport'
    weight: float = BOUNDARY_WEIGHT
    dirichlet: Optional[Callable] = field(default=None, repr=False)

    def validate(self):
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ConfigError(f"Unknown boundary mode '{self.boundary_mode}', "
                              f"expected one of {BOUNDARY_MODES}", field='problem.boundary_mode')
        if self.weight < 0:
            raise ConfigError(f"Boundary weight must be >= 0, got {self.weight}",
                              field='problem.boundary_weight')
        if self.source_boundary is None or len(self.source_boundary) == 0:
            raise ConfigError("Boundary loss needs source boundary points", field='sampling.n_boundary')
        if self.boundary_mode == 'transport' and (self.target_boundary is None or len(self.target_boundary) == 0):
            raise ConfigError("Transport mode needs a target boundary batch",
                              field='sampling.n_target_boundary')
        if self.boundary_mode == 'dirichlet' and self.dirichlet is None:
            raise ConfigError("Dirichlet mode needs boundary data h", field='problem.reference')
        return self


def total_loss(network, problem: Problem):
    """E_PDE + C·E_boundary as a tape scalar, plus its float breakdown."""
    problem.validate()
    pde = e_pde(network, problem.source, problem.target, problem.collocation)
    if problem.boundary_mode == 'transport':
        boundary = e_transport(network, problem.source_boundary, problem.target_boundary)
    else:
        boundary = e_dirichlet(network, problem.dirichlet, problem.source_boundary)
    total = pde + problem.weight * boundary
    breakdown = LossBreakdown(
        e_pde=float(pde),
        e_boundary=float(boundary),
        total=float(total),
        weight=problem.weight,
        mode=problem.boundary_mode,
        n_collocation=len(problem.collocation),
        n_source_boundary=len(problem.source_boundary),
        n_target_boundary=len(problem.target_boundary) if problem.target_boundary is not None else 0,
    )
    return total, breakdown
