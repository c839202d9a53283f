"""
Training runs: sample fixed point batches, pretrain to the identity map, warm
up with Adam, then run the L-BFGS main phase.
"""
import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from app.config import (
    DEFAULT_HIDDEN_WIDTHS, N_COLLOCATION, N_BOUNDARY, BOUNDARY_WEIGHT,
    PRETRAIN_EPOCHS, PRETRAIN_LR, ADAM_EPOCHS, LBFGS_EPOCHS,
    VALIDATION_POINTS, TEST_POINTS, CONVEXITY_AUDIT_POINTS, LOG_EVERY
)
from app.engine.autodiff import flat_gradient
from app.engine.optim import AdamConfig, AdamState, LbfgsConfig, LbfgsState, adam_step, lbfgs_epoch
from app.models.icnn import IcnnParams, init_params, pretrain_identity, audit_convexity, ConvexityAudit
from app.problems.analytic_maps import ReferenceMap
from app.problems.densities import DensitySpec
from app.solver.loss import Problem, LossBreakdown, total_loss, dirichlet_from_reference, map_l2_error
from app.utils.error_handler import ConfigError, NumericalError, SolverError

logger = logging.getLogger(__name__)

PHASES = ('adam', 'lbfgs')
TRACE_COLUMNS = ['phase', 'epoch', 'effective_epoch', 'total', 'e_pde', 'e_boundary',
                 'grad_norm', 'l2_validation']
TIMING_COLUMNS = ['phase', 'epoch', 'effective_epoch', 'wall_ms']


def derive_seed(base: int, label: str) -> int:
    """Injective-in-practice seed derivation: first 8 bytes of sha256("base:label")."""
    digest = hashlib.sha256(f"{int(base)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], 'big') >> 1


@dataclass(frozen=True)
class RunConfig:
    name: str
    source: DensitySpec
    target: DensitySpec
    boundary_mode: str = 'transport'
    boundary_weight: float = BOUNDARY_WEIGHT
    reference: Optional[ReferenceMap] = field(default=None, repr=False)
    hidden_widths: Tuple[int, ...] = DEFAULT_HIDDEN_WIDTHS
    point_seed: int = 0
    init_seed: int = 1
    n_collocation: int = N_COLLOCATION
    n_boundary: int = N_BOUNDARY
    n_target_boundary: Optional[int] = None
    pretrain_epochs: int = PRETRAIN_EPOCHS
    adam_epochs: int = ADAM_EPOCHS
    lbfgs_epochs: int = LBFGS_EPOCHS
    pretrain: AdamConfig = field(default_factory=lambda: AdamConfig(lr=PRETRAIN_LR))
    adam: AdamConfig = field(default_factory=AdamConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    validation_points: int = VALIDATION_POINTS
    audit_points: int = CONVEXITY_AUDIT_POINTS

    @property
    def dim(self) -> int:
        return self.source.dim

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.dim, *self.hidden_widths, 1)

    @property
    def target_boundary_count(self) -> int:
        return self.n_boundary if self.n_target_boundary is None else self.n_target_boundary

    def validate(self) -> "RunConfig":
        if self.source.dim != self.target.dim:
            raise ConfigError("Source and target dimensions differ", field='problem.target')
        counts = {
            'sampling.n_collocation': self.n_collocation,
            'sampling.n_boundary': self.n_boundary,
            'sampling.n_target_boundary': self.target_boundary_count,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}", field=name)
        for name in ('pretrain_epochs', 'adam_epochs', 'lbfgs_epochs'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", field=f'schedule.{name}')
        if self.boundary_weight < 0:
            raise ConfigError("Boundary weight C must be >= 0", field='problem.boundary_weight')
        if self.boundary_mode == 'dirichlet' and (self.reference is None or self.reference.kind != 'affine'):
            raise ConfigError("Dirichlet mode needs an affine reference map for its boundary data",
                              field='problem.reference')
        return self

    def seed_for(self, label: str) -> int:
        return derive_seed(self.point_seed, label)


@dataclass(frozen=True)
class TrainRow:
    phase: str
    epoch: int
    effective_epoch: int
    total: float
    e_pde: float
    e_boundary: float
    grad_norm: float
    wall_ms: float
    l2_validation: Optional[float] = None


@dataclass
class TrainReport:
    name: str
    point_seed: int
    init_seed: int
    rows: List[TrainRow] = field(default_factory=list)
    pretrain_loss: Optional[float] = None
    stalled_epochs: List[int] = field(default_factory=list)
    audits: Dict[str, ConvexityAudit] = field(default_factory=dict)
    final: Optional[LossBreakdown] = None

    @property
    def final_loss(self) -> float:
        if self.final is not None:
            return self.final.total
        return self.rows[-1].total if self.rows else float('nan')

    def to_frame(self) -> pd.DataFrame:
        """Deterministic trace; wall-clock times live in timing_frame()."""
        return pd.DataFrame([r.__dict__ for r in self.rows], columns=TRACE_COLUMNS)

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.rows], columns=TIMING_COLUMNS)

    def summary(self) -> dict:
        return {
            'name': self.name,
            'point_seed': self.point_seed,
            'init_seed': self.init_seed,
            'epochs_recorded': len(self.rows),
            'pretrain_loss': self.pretrain_loss,
            'final': self.final.to_dict() if self.final else None,
            'stalled_epochs': list(self.stalled_epochs),
            'audits': {phase: audit.to_dict() for phase, audit in self.audits.items()},
        }


def build_problem(config: RunConfig) -> Problem:
    """Fixed point batches of one run: collocation, source and target boundary."""
    source_domain = config.source.support
    target_domain = config.target.support
    collocation = source_domain.sample_interior(config.n_collocation, config.point_seed)
    source_boundary = source_domain.sample_boundary(config.n_boundary, config.seed_for('source_boundary'))
    target_boundary = None
    dirichlet = None
    if config.boundary_mode == 'transport':
        target_boundary = target_domain.sample_boundary(config.target_boundary_count,
                                                        config.seed_for('target_boundary'))
    else:
        dirichlet = dirichlet_from_reference(config.reference)
    return Problem(
        source=config.source,
        target=config.target,
        collocation=collocation,
        source_boundary=source_boundary,
        target_boundary=target_boundary,
        boundary_mode=config.boundary_mode,
        weight=config.boundary_weight,
        dirichlet=dirichlet,
    ).validate()


def _audit(config: RunConfig, params: IcnnParams, phase: str, report: TrainReport):
    points = config.source.support.sample_interior(config.audit_points, config.seed_for('audit'))
    report.audits[phase] = audit_convexity(params, points.points)


def run(config: RunConfig) -> Tuple[IcnnParams, TrainReport]:
    """Pretrain, Adam warm-up, L-BFGS. Deterministic given the config seeds."""
    config.validate()
    widths = config.widths
    report = TrainReport(config.name, config.point_seed, config.init_seed)
    problem = build_problem(config)
    params = init_params(widths, config.init_seed)

    validation = None
    volume = config.source.support.volume()
    if config.reference is not None:
        validation = config.source.support.sample_interior(config.validation_points,
                                                           config.seed_for('validation'))

    def validation_error(p):
        if validation is None:
            return None
        return map_l2_error(p, config.reference, validation, volume)

    latest = {}

    def objective(theta):
        loss, latest['breakdown'] = total_loss(IcnnParams.from_flat(widths, theta), problem)
        return loss

    if config.pretrain_epochs > 0:
        params, report.pretrain_loss = pretrain_identity(params, problem.collocation,
                                                         config.pretrain_epochs, config.pretrain)
        _audit(config, params, 'pretrain', report)

    flat = params.flatten().detach().clone()
    last_good = flat

    def abort(message, phase, epoch, cause=None):
        logger.error("%s (phase %s, epoch %d)", message, phase, epoch)
        error = NumericalError(message, last_good=IcnnParams.from_flat(widths, last_good),
                               details={'phase': phase, 'epoch': epoch, 'run': config.name})
        if cause is not None:
            raise error from cause
        raise error

    # Adam warm-up
    if config.adam_epochs > 0:
        logger.info("[%s] Adam phase: %d epochs", config.name, config.adam_epochs)
    state = AdamState.init(flat.numel(), config.adam)
    for epoch in range(1, config.adam_epochs + 1):
        start = time.perf_counter()
        value, grad = flat_gradient(objective, flat)
        if not torch.isfinite(value):
            abort("Non-finite loss during Adam warm-up", 'adam', epoch)
        breakdown = latest['breakdown']
        try:
            state, new_flat = adam_step(state, flat, grad)
        except NumericalError as exc:
            abort(exc.message, 'adam', epoch, exc)
        # the row describes the iterate the gradient was taken at
        l2 = validation_error(IcnnParams.from_flat(widths, flat))
        last_good = flat
        flat = new_flat
        wall_ms = (time.perf_counter() - start) * 1000.0
        report.rows.append(TrainRow('adam', epoch, epoch, breakdown.total, breakdown.e_pde,
                                    breakdown.e_boundary, float(grad.norm()), wall_ms, l2))
        if epoch % LOG_EVERY == 0 or epoch == config.adam_epochs:
            logger.info("[%s] adam %4d  loss %.4e  E_pde %.3e  E_b %.3e",
                        config.name, epoch, breakdown.total, breakdown.e_pde, breakdown.e_boundary)
    if config.adam_epochs > 0:
        last_good = flat
        _audit(config, IcnnParams.from_flat(widths, flat), 'adam', report)

    # L-BFGS main phase
    def evaluator(theta):
        value, grad = flat_gradient(objective, theta)
        return float(value), grad

    if config.lbfgs_epochs > 0:
        logger.info("[%s] L-BFGS phase: %d epochs x %d sub-iterations",
                    config.name, config.lbfgs_epochs, config.lbfgs.sub_iterations)
    lbfgs_state = LbfgsState(config.lbfgs)
    for epoch in range(1, config.lbfgs_epochs + 1):
        start = time.perf_counter()
        try:
            lbfgs_state, new_flat, summary = lbfgs_epoch(lbfgs_state, evaluator, flat)
        except NumericalError as exc:
            abort(exc.message, 'lbfgs', epoch, exc)
        if not math.isfinite(summary.value) or not torch.isfinite(new_flat).all():
            abort("Non-finite loss during L-BFGS", 'lbfgs', epoch)
        flat = new_flat
        last_good = flat
        if summary.stalled:
            report.stalled_epochs.append(epoch)
            logger.warning("[%s] L-BFGS epoch %d stalled", config.name, epoch)
        current = IcnnParams.from_flat(widths, flat)
        with torch.no_grad():
            _, breakdown = total_loss(current, problem)
        wall_ms = (time.perf_counter() - start) * 1000.0
        report.rows.append(TrainRow('lbfgs', epoch,
                                    config.adam_epochs + epoch * config.lbfgs.sub_iterations,
                                    breakdown.total, breakdown.e_pde, breakdown.e_boundary,
                                    summary.grad_norm, wall_ms, validation_error(current)))
        if epoch % LOG_EVERY == 0 or epoch == config.lbfgs_epochs:
            logger.info("[%s] lbfgs %4d  loss %.4e  |g| %.3e  evals %d",
                        config.name, epoch, breakdown.total, summary.grad_norm, summary.evaluations)

    params = IcnnParams.from_flat(widths, flat.detach().clone())
    if config.adam_epochs + config.lbfgs_epochs > 0:
        with torch.no_grad():
            _, report.final = total_loss(params, problem)
        _audit(config, params, 'final', report)
    logger.info("[%s] run finished: final loss %s", config.name,
                f"{report.final.total:.4e}" if report.final else "n/a")
    return params, report


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class MemberResult:
    index: int
    point_seed: int
    init_seed: int
    status: str
    final_loss: float = float('nan')
    l2_train: float = float('nan')
    l2_test: float = float('nan')
    error: Optional[str] = None
    params: Optional[IcnnParams] = field(default=None, repr=False)
    report: Optional[TrainReport] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == 'ok'


def _stats(values) -> dict:
    values = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if values.size == 0:
        return {'mean': None, 'std': None, 'median': None, 'p05': None, 'p95': None}
    return {
        'mean': float(values.mean()),
        'std': float(values.std()),
        'median': float(np.median(values)),
        'p05': float(np.percentile(values, 5)),
        'p95': float(np.percentile(values, 95)),
    }


@dataclass
class EnsembleReport:
    name: str
    seed_base: int
    members: List[MemberResult]

    @property
    def succeeded(self) -> List[MemberResult]:
        return [m for m in self.members if m.ok]

    def runs_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {'run_id': m.index, 'point_seed': m.point_seed, 'init_seed': m.init_seed,
             'status': m.status, 'final_loss': m.final_loss, 'l2_train': m.l2_train,
             'l2_test': m.l2_test}
            for m in self.members
        ])

    def per_epoch(self) -> pd.DataFrame:
        """Mean, std and 5th-95th percentile band per (phase, epoch) over successful runs."""
        frames = []
        for member in self.succeeded:
            frame = member.report.to_frame()
            frame['run_id'] = member.index
            frames.append(frame)
        if not frames:
            return pd.DataFrame()
        traces = pd.concat(frames, ignore_index=True)
        traces['phase_order'] = traces['phase'].map({p: i for i, p in enumerate(PHASES)})
        grouped = traces.groupby(['phase_order', 'phase', 'epoch', 'effective_epoch'], sort=True)
        rows = []
        for (_, phase, epoch, effective), group in grouped:
            row = {'phase': phase, 'epoch': epoch, 'effective_epoch': effective, 'runs': len(group)}
            for column in ('total', 'l2_validation'):
                values = pd.to_numeric(group[column], errors='coerce').dropna()
                row[f'{column}_mean'] = values.mean() if len(values) else np.nan
                row[f'{column}_std'] = values.std(ddof=0) if len(values) else np.nan
                row[f'{column}_p05'] = values.quantile(0.05) if len(values) else np.nan
                row[f'{column}_p95'] = values.quantile(0.95) if len(values) else np.nan
            rows.append(row)
        return pd.DataFrame(rows)

    def summary(self) -> dict:
        ok = self.succeeded
        return {
            'name': self.name,
            'seed_base': self.seed_base,
            'n_runs': len(self.members),
            'n_succeeded': len(ok),
            'failed': [{'run_id': m.index, 'error': m.error} for m in self.members if not m.ok],
            'final_loss': _stats(m.final_loss for m in ok),
            'l2_train': _stats(m.l2_train for m in ok),
            'l2_test': _stats(m.l2_test for m in ok),
        }


def member_config(config: RunConfig, seed_base: int, index: int) -> RunConfig:
    return replace(config,
                   point_seed=derive_seed(seed_base, f"{index}:points"),
                   init_seed=derive_seed(seed_base, f"{index}:init"))


def _run_member(config: RunConfig, index: int) -> MemberResult:
    try:
        params, report = run(config)
    except (NumericalError, SolverError) as exc:
        logger.warning("[%s] ensemble member %d failed: %s", config.name, index, exc)
        return MemberResult(index, config.point_seed, config.init_seed, 'failed', error=str(exc))
    result = MemberResult(index, config.point_seed, config.init_seed, 'ok',
                          final_loss=report.final_loss, params=params, report=report)
    if config.reference is not None:
        domain = config.source.support
        volume = domain.volume()
        train = domain.sample_interior(config.n_collocation, config.point_seed)
        test = domain.sample_interior(TEST_POINTS, config.seed_for('test'))
        result.l2_train = map_l2_error(params, config.reference, train, volume)
        result.l2_test = map_l2_error(params, config.reference, test, volume)
    return result


def run_ensemble(config: RunConfig, n_runs: int, seed_base: int, threads: int = 1) -> EnsembleReport:
    """n_runs independent runs with seeds derived from seed_base; fails if fewer than half succeed."""
    if n_runs < 1:
        raise ConfigError(f"Ensemble needs at least one run, got {n_runs}", field='runs')
    config.validate()
    configs = [member_config(config, seed_base, i) for i in range(n_runs)]
    logger.info("[%s] ensemble of %d runs, seed base %d, %d thread(s)", config.name, n_runs, seed_base, threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            members = list(pool.map(_run_member, configs, range(n_runs)))
    else:
        members = [_run_member(c, i) for i, c in enumerate(configs)]
    report = EnsembleReport(config.name, seed_base, members)
    n_ok = len(report.succeeded)
    if 2 * n_ok < n_runs:
        raise SolverError(f"Ensemble '{config.name}' failed: only {n_ok} of {n_runs} runs succeeded",
                          details=report.summary())
    return report
