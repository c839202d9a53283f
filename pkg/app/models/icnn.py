# app/models/icnn.py
"""
Input convex neural network potential u_NN: R^d -> R.

    x^1     = σ(L^(0) x + b^(0))
    x^l     = σ(W^(l-1) x^(l-1) + L^(l-1) x + b^(l-1)),   2 <= l <= L
    u_NN(x) = W^(L) x^L + L^(L) x + b^(L)

with σ = softplus and W^(l) = V^(l) ⊙ V^(l). The raw V are the trainable
parameters; the square is taken in every forward pass, so convexity in x holds
for every parameter vector any optimizer can produce.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Tuple

import torch

from app.config import CONVEXITY_TOL, SCHEMA_VERSION
from app.engine.autodiff import DTYPE, SecondOrderDual, eval_with_input_derivatives, flat_gradient
from app.engine.optim import AdamConfig, AdamState, adam_step
from app.utils.error_handler import AutodiffError, ConfigError

logger = logging.getLogger(__name__)


def validate_widths(widths) -> Tuple[int, ...]:
    widths = tuple(int(w) for w in widths)
    if len(widths) < 3:
        raise ConfigError("Network needs an input width, at least one hidden layer and an output",
                          field='network.hidden_widths')
    if any(w < 1 for w in widths):
        raise ConfigError(f"All layer widths must be >= 1, got {widths}", field='network.hidden_widths')
    if widths[-1] != 1:
        raise ConfigError(f"Output width must be 1, got {widths[-1]}", field='network.hidden_widths')
    return widths


def layer_shapes(widths) -> List[Tuple[str, Tuple[int, ...]]]:
    """(tag, shape) of every raw parameter block in flattening order."""
    widths = validate_widths(widths)
    n_in = widths[0]
    shapes = []
    for l in range(len(widths) - 1):
        n_out = widths[l + 1]
        if l >= 1:
            shapes.append((f"V{l}", (n_out, widths[l])))
        shapes.append((f"L{l}", (n_out, n_in)))
        shapes.append((f"b{l}", (n_out,)))
    return shapes


def count_params(widths) -> int:
    return sum(math.prod(shape) for _, shape in layer_shapes(widths))


def _split(widths, flat: torch.Tensor):
    blocks = {}
    offset = 0
    for tag, shape in layer_shapes(widths):
        size = math.prod(shape)
        blocks[tag] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != flat.numel():
        raise ValueError(f"Flat vector has {flat.numel()} entries, widths {tuple(widths)} need {offset}")
    return blocks


@dataclass(frozen=True)
class IcnnParams:
    """Raw ICNN parameters. hidden[l-1] = V^(l), passthrough[l] = L^(l), biases[l] = b^(l)."""
    widths: Tuple[int, ...]
    hidden: Tuple[torch.Tensor, ...]
    passthrough: Tuple[torch.Tensor, ...]
    biases: Tuple[torch.Tensor, ...]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_hidden_layers(self) -> int:
        return len(self.widths) - 2

    @classmethod
    def from_flat(cls, widths, flat: torch.Tensor) -> "IcnnParams":
        widths = validate_widths(widths)
        blocks = _split(widths, flat)
        n_layers = len(widths) - 1
        return cls(
            widths,
            tuple(blocks[f"V{l}"] for l in range(1, n_layers)),
            tuple(blocks[f"L{l}"] for l in range(n_layers)),
            tuple(blocks[f"b{l}"] for l in range(n_layers)),
        )

    def flatten(self) -> torch.Tensor:
        parts = []
        for l in range(len(self.widths) - 1):
            if l >= 1:
                parts.append(self.hidden[l - 1].reshape(-1))
            parts.append(self.passthrough[l].reshape(-1))
            parts.append(self.biases[l].reshape(-1))
        return torch.cat(parts)

    def effective_hidden(self) -> Tuple[torch.Tensor, ...]:
        """W^(l) = V^(l) ⊙ V^(l), nonnegative by construction."""
        return tuple(v * v for v in self.hidden)

    def detach(self) -> "IcnnParams":
        return IcnnParams.from_flat(self.widths, self.flatten().detach().clone())

    def __call__(self, x):
        return icnn_forward(self, x)


def icnn_forward(params: IcnnParams, x):
    """u_NN at x. Plain (N, d) tensors give (N,) values; duals give a width-1 dual."""
    is_dual = isinstance(x, SecondOrderDual)
    x0 = x if is_dual else SecondOrderDual.constant(torch.as_tensor(x, dtype=DTYPE))
    if x0.width != params.input_dim:
        raise AutodiffError(
            f"Input width {x0.width} does not match network input width {params.input_dim}"
        )
    weights = params.effective_hidden()
    h = x0.linear(params.passthrough[0], params.biases[0]).softplus()
    last = len(params.widths) - 2
    for l in range(1, last):
        h = (h.linear(weights[l - 1]) + x0.linear(params.passthrough[l], params.biases[l])).softplus()
    out = h.linear(weights[last - 1]) + x0.linear(params.passthrough[last], params.biases[last])
    if is_dual:
        return out
    value = out.value[:, 0]
    return value[0] if torch.as_tensor(x).dim() == 1 else value


def _glorot(shape, fan_in, fan_out, generator) -> torch.Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * limit


def init_params(widths, seed: int) -> IcnnParams:
    """Glorot-uniform raw parameters, deterministic per seed."""
    widths = validate_widths(widths)
    generator = torch.Generator().manual_seed(int(seed))
    n_in = widths[0]
    parts = []
    for tag, shape in layer_shapes(widths):
        n_out = shape[0]
        if tag.startswith("V"):
            parts.append(_glorot(shape, shape[1], n_out, generator).reshape(-1))
        else:
            parts.append(_glorot(shape, n_in, n_out, generator).reshape(-1))
    return IcnnParams.from_flat(widths, torch.cat(parts))


def identity_objective(params: IcnnParams, points: torch.Tensor) -> torch.Tensor:
    """(1/N) Σ |∇u_NN(p_i) - p_i|²."""
    _, grad, _ = eval_with_input_derivatives(params, points, order=1)
    return ((grad - points) ** 2).sum(dim=1).mean()


def pretrain_identity(params: IcnnParams, collocation, epochs: int, config: AdamConfig = None):
    """Fit ∇u_NN ≈ Id on the collocation points with Adam. Returns (params, final loss)."""
    points = collocation.as_tensor() if hasattr(collocation, 'as_tensor') else torch.as_tensor(collocation, dtype=DTYPE)
    if points.shape[0] == 0:
        raise ValueError("Pretraining needs at least one collocation point")
    widths = params.widths
    if epochs <= 0:
        with torch.no_grad():
            loss = float(identity_objective(params, points))
        return params, loss

    flat = params.flatten().detach().clone()
    state = AdamState.init(flat.numel(), config or AdamConfig())

    def objective(theta):
        return identity_objective(IcnnParams.from_flat(widths, theta), points)

    for epoch in range(epochs):
        value, grad = flat_gradient(objective, flat)
        state, flat = adam_step(state, flat, grad)
        if (epoch + 1) % 100 == 0:
            logger.debug("Pretrain epoch %d: identity loss %.3e", epoch + 1, float(value))

    with torch.no_grad():
        loss = float(objective(flat))
    logger.info("Identity pretraining finished after %d epochs, loss %.3e", epochs, loss)
    return IcnnParams.from_flat(widths, flat), loss


# ---------------------------------------------------------------------------
# Plain feedforward baseline (no sign constraint)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpParams:
    widths: Tuple[int, ...]
    weights: Tuple[torch.Tensor, ...]
    biases: Tuple[torch.Tensor, ...]

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def __call__(self, x):
        return mlp_forward(self, x)


def init_mlp_params(widths, seed: int) -> MlpParams:
    widths = validate_widths(widths)
    generator = torch.Generator().manual_seed(int(seed))
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(_glorot((n_out, n_in), n_in, n_out, generator))
        biases.append(_glorot((n_out,), n_in, n_out, generator))
    return MlpParams(widths, tuple(weights), tuple(biases))


def mlp_forward(params: MlpParams, x):
    is_dual = isinstance(x, SecondOrderDual)
    h = x if is_dual else SecondOrderDual.constant(torch.as_tensor(x, dtype=DTYPE))
    if h.width != params.input_dim:
        raise AutodiffError(
            f"Input width {h.width} does not match network input width {params.input_dim}"
        )
    for weight, bias in zip(params.weights[:-1], params.biases[:-1]):
        h = h.linear(weight, bias).softplus()
    out = h.linear(params.weights[-1], params.biases[-1])
    if is_dual:
        return out
    value = out.value[:, 0]
    return value[0] if torch.as_tensor(x).dim() == 1 else value


# ---------------------------------------------------------------------------
# Convexity audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvexityAudit:
    passed: bool
    n_points: int
    min_trace: float
    min_leading_minor: float
    tolerance: float

    def to_dict(self):
        return {
            'passed': self.passed,
            'n_points': self.n_points,
            'min_trace': self.min_trace,
            'min_leading_minor': self.min_leading_minor,
            'tolerance': self.tolerance,
        }


def audit_convexity(network, points, tol: float = CONVEXITY_TOL) -> ConvexityAudit:
    """Hessian PSD audit: trace and leading principal minors >= -tol at every point."""
    points = torch.as_tensor(points, dtype=DTYPE)
    with torch.no_grad():
        _, _, hess = eval_with_input_derivatives(network, points, order=2)
    d = hess.shape[-1]
    trace = torch.diagonal(hess, dim1=-2, dim2=-1).sum(-1)
    minors = [torch.linalg.det(hess[:, :k, :k]) for k in range(1, d + 1)]
    if d == 2:
        minors = [minors[-1]]
    min_trace = float(trace.min())
    min_minor = float(torch.stack(minors).min())
    passed = min_trace >= -tol and min_minor >= -tol
    if not passed:
        logger.warning("Convexity audit failed: min trace %.3e, min leading minor %.3e",
                       min_trace, min_minor)
    return ConvexityAudit(passed, points.shape[0], min_trace, min_minor, tol)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def params_to_records(params: IcnnParams) -> dict:
    """JSON-ready payload: one (tag, shape, row-major values) record per block."""
    blocks = _split(params.widths, params.flatten().detach())
    return {
        'schema_version': SCHEMA_VERSION,
        'kind': 'icnn',
        'widths': list(params.widths),
        'layers': [
            {'tag': tag, 'shape': list(shape), 'values': blocks[tag].reshape(-1).tolist()}
            for tag, shape in layer_shapes(params.widths)
        ],
    }


def params_from_records(payload: dict) -> IcnnParams:
    if payload.get('schema_version') != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported parameter schema_version {payload.get('schema_version')}",
                          field='schema_version')
    if payload.get('kind') != 'icnn':
        raise ConfigError(f"Unsupported parameter kind {payload.get('kind')}", field='kind')
    widths = validate_widths(payload['widths'])
    by_tag = {record['tag']: record for record in payload['layers']}
    parts = []
    for tag, shape in layer_shapes(widths):
        if tag not in by_tag:
            raise ConfigError(f"Missing parameter block {tag}", field=f'layers.{tag}')
        record = by_tag[tag]
        if tuple(record['shape']) != shape:
            raise ConfigError(f"Block {tag} has shape {record['shape']}, expected {list(shape)}",
                              field=f'layers.{tag}.shape')
        parts.append(torch.tensor(record['values'], dtype=DTYPE).reshape(-1))
    return IcnnParams.from_flat(widths, torch.cat(parts))
