"""
Differentiation engine for the Monge-Ampère residual.

Two layers are stacked:

* ``Tape`` owns the parameter leaves. Everything computed from them is a torch
  tensor with a ``grad_fn``, i.e. a node on a reverse-mode tape in θ.
* ``SecondOrderDual`` carries value, input gradient and the upper triangle of the
  input Hessian forward through the network, one batch of points at a time.
  Its entries are tape tensors, so ∂/∂θ of anything built from ∇u or D²u is a
  plain reverse sweep.

All arithmetic is float64.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from app.config import SOFTPLUS_THRESHOLD
from app.utils.error_handler import AutodiffError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def upper_pairs(dim: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Row/column indices (i <= j) of the stored Hessian entries, row-major."""
    rows, cols = torch.triu_indices(dim, dim)
    return rows, cols


def _pair_lookup(dim: int) -> torch.Tensor:
    # (d, d) -> position in the packed upper triangle
    rows, cols = upper_pairs(dim)
    lookup = torch.empty((dim, dim), dtype=torch.long)
    positions = torch.arange(rows.numel())
    lookup[rows, cols] = positions
    lookup[cols, rows] = positions
    return lookup


def softplus(z: torch.Tensor) -> torch.Tensor:
    """Overflow-safe log(1 + e^z): z above the threshold, e^z below minus the threshold."""
    upper = z > SOFTPLUS_THRESHOLD
    lower = z < -SOFTPLUS_THRESHOLD
    middle = torch.clamp(z, -SOFTPLUS_THRESHOLD, SOFTPLUS_THRESHOLD)
    tail = torch.exp(torch.clamp(z, max=-SOFTPLUS_THRESHOLD))
    return torch.where(upper, z, torch.where(lower, tail, torch.log1p(torch.exp(middle))))


@dataclass(frozen=True)
class SecondOrderDual:
    """Batch of K features over N points, differentiated twice w.r.t. a d-dim input.

    value: (N, K); grad: (N, K, d) or None; hess: (N, K, d(d+1)/2) or None.
    ``order`` 0 carries values only, 1 adds gradients, 2 adds Hessians.
    """
    value: torch.Tensor
    grad: Optional[torch.Tensor] = None
    hess: Optional[torch.Tensor] = None
    dim: int = 0

    @property
    def order(self) -> int:
        if self.grad is None:
            return 0
        return 1 if self.hess is None else 2

    @property
    def width(self) -> int:
        return self.value.shape[-1]

    @classmethod
    def seed(cls, x: torch.Tensor, order: int = 2) -> "SecondOrderDual":
        """Seed the input coordinates: d/dx_k x_i = δ_ik, second derivatives zero."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.dim() == 1:
            x = x.unsqueeze(0)
        n, d = x.shape
        if order == 0:
            return cls(x, None, None, d)
        grad = torch.eye(d, dtype=DTYPE).expand(n, d, d)
        hess = None
        if order >= 2:
            hess = torch.zeros((n, d, d * (d + 1) // 2), dtype=DTYPE)
        return cls(x, grad, hess, d)

    @classmethod
    def constant(cls, x: torch.Tensor) -> "SecondOrderDual":
        return cls.seed(x, order=0)

    def _like(self, value, grad, hess) -> "SecondOrderDual":
        return SecondOrderDual(value, grad, hess, self.dim)

    def linear(self, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> "SecondOrderDual":
        """Affine map applied to the feature axis: z = h Wᵀ + b."""
        value = F.linear(self.value, weight, bias)
        grad = hess = None
        if self.grad is not None:
            grad = torch.einsum('hk,nkd->nhd', weight, self.grad)
        if self.hess is not None:
            hess = torch.einsum('hk,nkp->nhp', weight, self.hess)
        return self._like(value, grad, hess)

    def softplus(self) -> "SecondOrderDual":
        z = self.value
        value = softplus(z)
        grad = hess = None
        if self.grad is not None:
            slope = torch.sigmoid(z)
            grad = slope.unsqueeze(-1) * self.grad
            if self.hess is not None:
                curvature = slope * (1.0 - slope)
                rows, cols = upper_pairs(self.dim)
                outer = self.grad[..., rows] * self.grad[..., cols]
                hess = slope.unsqueeze(-1) * self.hess + curvature.unsqueeze(-1) * outer
        return self._like(value, grad, hess)

    def __add__(self, other):
        if isinstance(other, SecondOrderDual):
            grad = None if self.grad is None or other.grad is None else self.grad + other.grad
            hess = None if self.hess is None or other.hess is None else self.hess + other.hess
            return self._like(self.value + other.value, grad, hess)
        return self._like(self.value + other, self.grad, self.hess)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, SecondOrderDual):
            a, b = self, other
            value = a.value * b.value
            grad = hess = None
            if a.grad is not None and b.grad is not None:
                grad = a.value.unsqueeze(-1) * b.grad + b.value.unsqueeze(-1) * a.grad
            if a.hess is not None and b.hess is not None:
                rows, cols = upper_pairs(self.dim)
                cross = a.grad[..., rows] * b.grad[..., cols] + a.grad[..., cols] * b.grad[..., rows]
                hess = a.value.unsqueeze(-1) * b.hess + b.value.unsqueeze(-1) * a.hess + cross
            return self._like(value, grad, hess)
        # scalar or parameter tensor broadcast over the feature axis
        scale = torch.as_tensor(other, dtype=DTYPE)
        tangent_scale = scale.unsqueeze(-1) if scale.dim() else scale
        grad = None if self.grad is None else self.grad * tangent_scale
        hess = None if self.hess is None else self.hess * tangent_scale
        return self._like(self.value * scale, grad, hess)

    __rmul__ = __mul__

    def select(self, k: int) -> "SecondOrderDual":
        """Feature k as a width-1 dual."""
        grad = None if self.grad is None else self.grad[:, k:k + 1]
        hess = None if self.hess is None else self.hess[:, k:k + 1]
        return self._like(self.value[:, k:k + 1], grad, hess)

    def sum(self) -> "SecondOrderDual":
        grad = None if self.grad is None else self.grad.sum(dim=1, keepdim=True)
        hess = None if self.hess is None else self.hess.sum(dim=1, keepdim=True)
        return self._like(self.value.sum(dim=1, keepdim=True), grad, hess)

    def full_hessian(self) -> torch.Tensor:
        """(N, K, d, d) symmetric matrices gathered from the stored upper triangle."""
        if self.hess is None:
            raise AutodiffError("Hessian was not propagated (order < 2)")
        return self.hess[..., _pair_lookup(self.dim)]


class Tape:
    """Registry of parameter leaves for one evaluation; confined to one thread."""

    def __init__(self):
        self._leaves = []
        self._generation = 0

    @property
    def leaves(self):
        return list(self._leaves)

    def leaf(self, value) -> torch.Tensor:
        tensor = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self._leaves.append(tensor)
        return tensor

    def is_registered(self, tensor) -> bool:
        return any(tensor is leaf for leaf in self._leaves)

    def record(self, expression: Callable[..., torch.Tensor], *leaves: torch.Tensor) -> torch.Tensor:
        """Evaluate ``expression`` over registered leaves and return the output node."""
        for position, leaf in enumerate(leaves):
            if not isinstance(leaf, torch.Tensor) or not self.is_registered(leaf):
                raise AutodiffError(
                    f"Leaf #{position} is not registered on this tape",
                    {'generation': self._generation}
                )
        output = expression(*leaves)
        output = torch.as_tensor(output, dtype=DTYPE)
        if output.numel() != 1:
            raise AutodiffError(f"Recorded expression must be scalar, got shape {tuple(output.shape)}")
        return output.reshape(())

    def gradient(self, loss: torch.Tensor, leaves: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        """∂loss/∂leaf for every leaf, concatenated into one flat detached vector."""
        targets = self._leaves if leaves is None else list(leaves)
        if not targets:
            raise AutodiffError("Tape has no registered leaves")
        for leaf in targets:
            if not self.is_registered(leaf):
                raise AutodiffError("Gradient requested for a leaf that is not on this tape")
        if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
            raise AutodiffError("Loss must be a scalar tensor")
        if not loss.requires_grad:
            raise AutodiffError("Loss was not recorded on the active tape")
        grads = torch.autograd.grad(loss.reshape(()), targets, allow_unused=True)
        if all(g is None for g in grads):
            raise AutodiffError("Loss was not recorded on the active tape")
        flat = [
            torch.zeros_like(leaf).reshape(-1) if g is None else g.detach().reshape(-1)
            for leaf, g in zip(targets, grads)
        ]
        return torch.cat(flat)

    def clear(self):
        """Drop all leaves; losses built before this call are no longer on the tape."""
        self._leaves = []
        self._generation += 1


def eval_with_input_derivatives(network, x, order: int = 2):
    """u, ∇u and D²u of a scalar network at points x.

    ``network`` maps a SecondOrderDual of width d to one of width 1 and exposes
    ``input_dim``. Returns (u: (N,), grad: (N, d), hess: (N, d, d)); hess is None
    for order 1.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    expected = getattr(network, 'input_dim', x.shape[-1])
    if x.shape[-1] != expected:
        raise AutodiffError(
            f"Input width {x.shape[-1]} does not match network input width {expected}"
        )
    out = network(SecondOrderDual.seed(x, order=order))
    if out.width != 1:
        raise AutodiffError(f"Network output width must be 1, got {out.width}")
    u = out.value[:, 0]
    grad = out.grad[:, 0] if out.grad is not None else None
    hess = out.full_hessian()[:, 0] if order >= 2 else None
    return u, grad, hess


def flat_gradient(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor):
    """Value and gradient of ``loss_fn`` at a flat parameter vector on a fresh tape."""
    tape = Tape()
    theta = tape.leaf(params)
    loss = loss_fn(theta)
    grad = tape.gradient(loss)
    value = loss.detach()
    tape.clear()
    return value, grad


@dataclass(frozen=True)
class GradientCheck:
    max_relative_error: float
    coordinates: Tuple[int, ...]
    analytic: Tuple[float, ...]
    numeric: Tuple[float, ...]
    step: float

    def passed(self, tol: float) -> bool:
        return self.max_relative_error <= tol

    def to_dict(self):
        return {
            'max_relative_error': self.max_relative_error,
            'coordinates': list(self.coordinates),
            'analytic': list(self.analytic),
            'numeric': list(self.numeric),
            'step': self.step,
        }


def gradient_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor,
                   coordinates: Optional[Sequence[int]] = None, step: float = 1e-5) -> GradientCheck:
    """Tape gradient against central differences (f(p+h) - f(p-h)) / 2h.

    The relative error of a coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    params = torch.as_tensor(params, dtype=DTYPE).detach()
    _, grad = flat_gradient(loss_fn, params)
    coordinates = tuple(range(params.numel())) if coordinates is None else tuple(int(c) for c in coordinates)
    numeric = []
    with torch.no_grad():
        for c in coordinates:
            shift = torch.zeros_like(params)
            shift[c] = step
            numeric.append(float((loss_fn(params + shift) - loss_fn(params - shift)) / (2.0 * step)))
    analytic = [float(grad[c]) for c in coordinates]
    errors = [abs(a - n) / max(1.0, abs(a)) for a, n in zip(analytic, numeric)]
    return GradientCheck(max(errors) if errors else 0.0, coordinates, tuple(analytic), tuple(numeric), step)
