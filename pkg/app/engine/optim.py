"""
Full-batch optimizers over a flat float64 parameter vector.

Both optimizers are functional: a step takes a state and parameters and returns
new ones, nothing is updated in place. The L-BFGS line search follows the
bracketing / zoom scheme with cubic interpolation used by torch.optim.LBFGS.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Tuple

import torch

from app.config import (
    ADAM_LR, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
    LBFGS_LR, LBFGS_HISTORY_SIZE, LBFGS_SUB_ITERATIONS, LBFGS_WOLFE_C1, LBFGS_WOLFE_C2,
    LBFGS_MAX_LINE_SEARCH, LBFGS_TOLERANCE_GRAD, LBFGS_TOLERANCE_CHANGE,
    LBFGS_CURVATURE_EPS, BACKTRACKING_MAX_STEPS
)
from app.utils.error_handler import NumericalError

logger = logging.getLogger(__name__)

Evaluator = Callable[[torch.Tensor], Tuple[float, torch.Tensor]]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


@dataclass(frozen=True)
class AdamState:
    step: int
    m: torch.Tensor
    v: torch.Tensor
    config: AdamConfig = field(default_factory=AdamConfig)

    @classmethod
    def init(cls, n_params: int, config: AdamConfig = None) -> "AdamState":
        zeros = torch.zeros(n_params, dtype=torch.float64)
        return cls(0, zeros, zeros.clone(), config or AdamConfig())


def adam_step(state: AdamState, params: torch.Tensor, grad: torch.Tensor):
    """One bias-corrected Adam update. Returns (state', params')."""
    if params.shape != state.m.shape or grad.shape != params.shape:
        raise ValueError(
            f"Shape mismatch: params {tuple(params.shape)}, grad {tuple(grad.shape)}, "
            f"state {tuple(state.m.shape)}"
        )
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise NumericalError(
            f"Non-finite gradient at Adam step {state.step + 1}",
            details={'non_finite_entries': bad, 'step': state.step + 1}
        )
    cfg = state.config
    t = state.step + 1
    with torch.no_grad():
        m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        new_params = params - cfg.lr * m_hat / (torch.sqrt(v_hat) + cfg.eps)
    return replace(state, step=t, m=m, v=v), new_params


# ---------------------------------------------------------------------------
# L-BFGS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LbfgsConfig:
    lr: float = LBFGS_LR
    history_size: int = LBFGS_HISTORY_SIZE
    sub_iterations: int = LBFGS_SUB_ITERATIONS
    c1: float = LBFGS_WOLFE_C1
    c2: float = LBFGS_WOLFE_C2
    max_line_search: int = LBFGS_MAX_LINE_SEARCH
    tolerance_grad: float = LBFGS_TOLERANCE_GRAD
    tolerance_change: float = LBFGS_TOLERANCE_CHANGE


@dataclass(frozen=True)
class LbfgsState:
    config: LbfgsConfig = field(default_factory=LbfgsConfig)
    history: tuple = ()
    iterations: int = 0
    skipped_pairs: int = 0


@dataclass(frozen=True)
class EpochSummary:
    value: float
    grad_norm: float
    iterations: int
    evaluations: int
    stalled: bool
    fallback_steps: int = 0


def two_loop_direction(grad: torch.Tensor, history) -> torch.Tensor:
    """Search direction -H·g from the stored (s, y) pairs; -g when history is empty."""
    if not history:
        return -grad
    q = grad.clone()
    alphas = []
    for s, y in reversed(history):
        rho = 1.0 / torch.dot(y, s)
        alpha = rho * torch.dot(s, q)
        q = q - alpha * y
        alphas.append((rho, alpha))
    s_last, y_last = history[-1]
    r = q * (torch.dot(s_last, y_last) / torch.dot(y_last, y_last))
    for (s, y), (rho, alpha) in zip(history, reversed(alphas)):
        beta = rho * torch.dot(y, r)
        r = r + s * (alpha - beta)
    return -r


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None):
    # minimizer of the cubic through two points with values and slopes
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)
    if not all(math.isfinite(v) for v in (f1, g1, f2, g2)):
        return (xmin_bound + xmax_bound) / 2.0
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_square = d1 ** 2 - g1 * g2
    if d2_square >= 0:
        d2 = math.sqrt(d2_square)
        denominator = (g2 - g1 + 2 * d2) if x1 <= x2 else (g1 - g2 + 2 * d2)
        if denominator == 0.0:
            # linear along the segment: no interior minimizer
            return (xmin_bound + xmax_bound) / 2.0
        if x1 <= x2:
            min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / denominator)
        else:
            min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / denominator)
        if not math.isfinite(min_pos):
            return (xmin_bound + xmax_bound) / 2.0
        return min(max(min_pos, xmin_bound), xmax_bound)
    return (xmin_bound + xmax_bound) / 2.0


@dataclass
class _Probe:
    t: float
    f: float
    g: torch.Tensor
    gtd: float


def strong_wolfe(evaluator: Evaluator, x, t, d, f, g, gtd, c1, c2, tolerance_change, max_ls):
    """Strong Wolfe line search along d from x.

    Returns (probe, evaluations, found). ``found`` is True only when the returned
    step satisfies both the sufficient-decrease and the curvature condition.
    """
    d_norm = float(d.abs().max())

    def probe(step):
        value, grad = evaluator(x + step * d)
        return _Probe(step, value, grad, float(torch.dot(grad, d)))

    def armijo_fails(p):
        return not math.isfinite(p.f) or p.f > f + c1 * p.t * gtd

    start = _Probe(0.0, f, g, gtd)
    new = probe(t)
    evals = 1
    prev = start
    bracket = None
    found = False
    ls_iter = 0

    # bracketing phase
    while ls_iter < max_ls:
        if armijo_fails(new) or (ls_iter > 1 and new.f >= prev.f):
            bracket = [prev, new]
            break
        if abs(new.gtd) <= -c2 * gtd:
            bracket = [new]
            found = True
            break
        if new.gtd >= 0:
            bracket = [prev, new]
            break
        min_step = new.t + 0.01 * (new.t - prev.t)
        max_step = new.t * 10
        step = _cubic_interpolate(prev.t, prev.f, prev.gtd, new.t, new.f, new.gtd,
                                  bounds=(min_step, max_step))
        prev = new
        new = probe(step)
        evals += 1
        ls_iter += 1

    if bracket is None:
        bracket = [start, new]

    # zoom phase
    insuf_progress = False
    if len(bracket) == 2:
        low, high = (0, 1) if bracket[0].f <= bracket[1].f else (1, 0)
    else:
        low, high = 0, 0
    while not found and ls_iter < max_ls:
        lo_t = min(bracket[0].t, bracket[1].t)
        hi_t = max(bracket[0].t, bracket[1].t)
        if (hi_t - lo_t) * d_norm < tolerance_change:
            break
        step = _cubic_interpolate(bracket[0].t, bracket[0].f, bracket[0].gtd,
                                  bracket[1].t, bracket[1].f, bracket[1].gtd)
        eps = 0.1 * (hi_t - lo_t)
        if min(hi_t - step, step - lo_t) < eps:
            if insuf_progress or step >= hi_t or step <= lo_t:
                step = hi_t - eps if abs(step - hi_t) < abs(step - lo_t) else lo_t + eps
                insuf_progress = False
            else:
                insuf_progress = True
        else:
            insuf_progress = False

        new = probe(step)
        evals += 1
        ls_iter += 1

        if armijo_fails(new) or new.f >= bracket[low].f:
            bracket[high] = new
            low, high = (0, 1) if bracket[0].f <= bracket[1].f else (1, 0)
        else:
            if abs(new.gtd) <= -c2 * gtd:
                found = True
            elif new.gtd * (bracket[high].t - bracket[low].t) >= 0:
                bracket[high] = bracket[low]
            bracket[low] = new

    best = bracket[low]
    if found:
        assert best.f <= f + c1 * best.t * gtd, "accepted step violates sufficient decrease"
        assert abs(best.gtd) <= c2 * abs(gtd), "accepted step violates strong curvature"
    return best, evals, found


def _backtracking_descent(evaluator: Evaluator, x, f, g, t0, c1, max_steps):
    """Steepest-descent step with Armijo backtracking; None if no decrease found."""
    d = -g
    gtd = float(torch.dot(g, d))
    step = t0
    evals = 0
    for _ in range(max_steps):
        value, grad = evaluator(x + step * d)
        evals += 1
        if math.isfinite(value) and value <= f + c1 * step * gtd:
            return _Probe(step, value, grad, float(torch.dot(grad, d))), d, evals
        step *= 0.5
    return None, d, evals


def lbfgs_epoch(state: LbfgsState, evaluator: Evaluator, params: torch.Tensor):
    """Up to ``sub_iterations`` L-BFGS steps. Returns (state', params', EpochSummary)."""
    cfg = state.config
    history = list(state.history)
    iterations = state.iterations
    skipped = state.skipped_pairs
    fallback_steps = 0
    stalled = False

    f, g = evaluator(params)
    evals = 1
    if not math.isfinite(f) or not torch.isfinite(g).all():
        raise NumericalError("Non-finite loss or gradient at L-BFGS epoch start",
                             details={'value': f})

    x = params
    steps_taken = 0
    if float(g.abs().max()) <= cfg.tolerance_grad:
        return state, x, EpochSummary(f, float(g.norm()), 0, evals, False)

    for _ in range(cfg.sub_iterations):
        d = two_loop_direction(g, history)
        gtd = float(torch.dot(g, d))
        if gtd > -cfg.tolerance_change:
            # curvature pairs produced an ascent direction; restart from -g
            history = []
            d = -g
            gtd = float(torch.dot(g, d))

        if iterations == 0:
            t = min(1.0, 1.0 / float(g.abs().sum())) * cfg.lr
        else:
            t = cfg.lr

        best, ls_evals, found = strong_wolfe(
            evaluator, x, t, d, f, g, gtd, cfg.c1, cfg.c2, cfg.tolerance_change, cfg.max_line_search
        )
        evals += ls_evals
        if not found:
            logger.warning("Strong Wolfe search failed after %d evaluations, "
                           "falling back to steepest descent", ls_evals)
            best, d, bt_evals = _backtracking_descent(
                evaluator, x, f, g, t, cfg.c1, BACKTRACKING_MAX_STEPS
            )
            evals += bt_evals
            if best is None:
                logger.warning("Backtracking found no decrease; ending epoch early")
                stalled = True
                break
            fallback_steps += 1

        s = best.t * d
        y = best.g - g
        sy = float(torch.dot(s, y))
        if sy > LBFGS_CURVATURE_EPS * float(s.norm()) * float(y.norm()):
            history.append((s, y))
            if len(history) > cfg.history_size:
                history.pop(0)
        else:
            skipped += 1

        x = x + s
        f_prev = f
        f, g = best.f, best.g
        iterations += 1
        steps_taken += 1

        if float(g.abs().max()) <= cfg.tolerance_grad:
            break
        if float(s.abs().max()) <= cfg.tolerance_change:
            break
        if abs(f - f_prev) < cfg.tolerance_change:
            break

    new_state = replace(state, history=tuple(history), iterations=iterations, skipped_pairs=skipped)
    summary = EpochSummary(f, float(g.norm()), steps_taken, evals, stalled, fallback_steps)
    return new_state, x, summary
