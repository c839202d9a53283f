import math

import pytest
import torch

from app.engine.autodiff import (
    SecondOrderDual, Tape, eval_with_input_derivatives, flat_gradient, gradient_check, softplus
)
from app.models.icnn import IcnnParams, count_params, init_mlp_params, init_params
from app.problems.densities import DensitySpec
from app.problems.domains import DomainSpec
from app.solver.loss import Problem, hessian_determinant, total_loss
from app.utils.error_handler import AutodiffError


def half_square(d):
    return (d * d).sum() * 0.5


def bilinear(d):
    return d.select(0) * d.select(1)


class TestTape:
    """Test cases for reverse-mode recording over parameter leaves"""

    def test_product(self):
        tape = Tape()
        a = tape.leaf(2.0)
        b = tape.leaf(3.0)
        out = tape.record(lambda p, q: p * q, a, b)

        assert float(out) == 6.0
        assert torch.equal(tape.gradient(out), torch.tensor([3.0, 2.0], dtype=torch.float64))

    def test_identity(self):
        """A leaf recorded as its own output has unit gradient"""
        tape = Tape()
        a = tape.leaf(5.0)
        out = tape.record(lambda p: p, a)

        assert float(out) == 5.0
        assert float(tape.gradient(out)[0]) == 1.0

    def test_softplus_at_zero(self):
        tape = Tape()
        a = tape.leaf(0.0)
        out = tape.record(softplus, a)

        assert float(out) == pytest.approx(math.log(2.0), abs=1e-15)
        assert float(tape.gradient(out)[0]) == pytest.approx(0.5, abs=1e-15)

    def test_unregistered_leaf(self):
        tape = Tape()
        stranger = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)

        with pytest.raises(AutodiffError, match="not registered"):
            tape.record(lambda p: p * 2.0, stranger)

    def test_loss_not_on_tape(self):
        tape = Tape()
        tape.leaf(1.0)

        with pytest.raises(AutodiffError):
            tape.gradient(torch.tensor(1.0, dtype=torch.float64))

    def test_stale_loss_after_clear(self):
        """Losses built before clear() cannot be differentiated"""
        tape = Tape()
        a = tape.leaf(1.5)
        out = tape.record(lambda p: p * p, a)
        tape.clear()

        with pytest.raises(AutodiffError):
            tape.gradient(out)

    def test_non_scalar_expression(self):
        tape = Tape()
        a = tape.leaf([1.0, 2.0])

        with pytest.raises(AutodiffError, match="scalar"):
            tape.record(lambda p: p * 2.0, a)

    def test_flat_gradient_square(self):
        value, grad = flat_gradient(lambda p: (p * p).sum(), torch.tensor([3.0], dtype=torch.float64))

        assert float(value) == 9.0
        assert float(grad[0]) == 6.0


class TestInputDerivatives:
    """Test cases for forward propagation of input gradients and Hessians"""

    def test_half_square(self):
        x = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
        u, grad, hess = eval_with_input_derivatives(half_square, x)

        assert float(u[0]) == 2.5
        assert torch.equal(grad[0], torch.tensor([1.0, 2.0], dtype=torch.float64))
        assert torch.equal(hess[0], torch.eye(2, dtype=torch.float64))

    def test_bilinear(self):
        x = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
        u, grad, hess = eval_with_input_derivatives(bilinear, x)

        assert float(u[0]) == 12.0
        assert torch.equal(grad[0], torch.tensor([4.0, 3.0], dtype=torch.float64))
        assert torch.equal(hess[0], torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64))

    def test_hessian_against_finite_differences(self):
        """Hessian of a random softplus network matches differences of its gradient"""
        network = init_mlp_params((2, 5, 5, 1), seed=11)
        x = torch.tensor([[0.3, -0.7], [1.1, 0.4], [-0.2, 0.05]], dtype=torch.float64)
        _, _, hess = eval_with_input_derivatives(network, x)
        h = 1e-4
        numeric = torch.zeros_like(hess)
        for j in range(2):
            shift = torch.zeros(2, dtype=torch.float64)
            shift[j] = h
            _, g_plus, _ = eval_with_input_derivatives(network, x + shift, order=1)
            _, g_minus, _ = eval_with_input_derivatives(network, x - shift, order=1)
            numeric[:, :, j] = (g_plus - g_minus) / (2 * h)

        assert torch.allclose(hess, numeric, rtol=1e-5, atol=1e-7)

    def test_hessian_symmetric(self):
        params = init_params((3, 6, 6, 1), seed=2)
        x = torch.randn(20, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        _, _, hess = eval_with_input_derivatives(params, x)

        assert torch.equal(hess, hess.transpose(1, 2))

    def test_linearity(self):
        """Derivatives of a f + b g equal a ∇f + b ∇g"""
        f = init_params((2, 4, 1), seed=5)
        g = init_mlp_params((2, 4, 1), seed=6)
        x = torch.tensor([[0.2, 0.9], [-1.0, 0.5]], dtype=torch.float64)

        def combined(d):
            return f(d) * 2.0 + g(d) * -3.0

        _, grad, hess = eval_with_input_derivatives(combined, x)
        _, grad_f, hess_f = eval_with_input_derivatives(f, x)
        _, grad_g, hess_g = eval_with_input_derivatives(g, x)

        assert torch.allclose(grad, 2.0 * grad_f - 3.0 * grad_g, atol=1e-13)
        assert torch.allclose(hess, 2.0 * hess_f - 3.0 * hess_g, atol=1e-13)

    def test_width_mismatch(self):
        network = init_mlp_params((2, 3, 1), seed=0)

        with pytest.raises(AutodiffError, match="does not match"):
            eval_with_input_derivatives(network, torch.zeros(4, 3, dtype=torch.float64))

    def test_full_hessian_needs_second_order(self):
        dual = SecondOrderDual.seed(torch.zeros(2, 2, dtype=torch.float64), order=1)

        with pytest.raises(AutodiffError):
            dual.full_hessian()


class TestParameterGradients:
    """Test cases for parameter gradients flowing through input derivatives"""

    def test_determinant_of_scaled_quadratic(self):
        """d/dp det D²(p/2 |x|²) = d/dp p² = 2p"""
        tape = Tape()
        p = tape.leaf(2.0)
        x = torch.tensor([[0.5, -0.25]], dtype=torch.float64)

        def expression(scale):
            _, _, hess = eval_with_input_derivatives(lambda d: half_square(d) * scale, x)
            return hessian_determinant(hess)[0]

        out = tape.record(expression, p)

        assert float(out) == pytest.approx(4.0, abs=1e-14)
        assert float(tape.gradient(out)[0]) == pytest.approx(4.0, abs=1e-14)

    def test_composite_loss_against_finite_differences(self):
        source = DensitySpec.uniform(DomainSpec.unit_ball(2))
        target = DensitySpec.uniform(DomainSpec.ball_image([[2.0, 0.0], [0.0, 0.5]], [3.5, 0.0]))
        problem = Problem(
            source=source,
            target=target,
            collocation=source.support.sample_interior(8, seed=1),
            source_boundary=source.support.sample_boundary(8, seed=2),
            target_boundary=target.support.sample_boundary(8, seed=3),
        )
        widths = (2, 10, 10, 10, 10, 1)
        params = init_params(widths, seed=7)

        def loss_fn(theta):
            loss, _ = total_loss(IcnnParams.from_flat(widths, theta), problem)
            return loss

        coordinates = list(range(0, count_params(widths), 7))
        check = gradient_check(loss_fn, params.flatten(), coordinates)

        assert check.passed(1e-4)
        assert len(check.coordinates) == len(coordinates)
