"""
Error metrics for trained potentials: L² map error against a reference map,
pointwise error fields, transported histograms, boundary-image Hausdorff
estimates and ensemble sensitivity sweeps.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch

from app.config import (
    TEST_POINTS, ERROR_FIELD_RESOLUTION, HISTOGRAM_SAMPLES, HISTOGRAM_BINS,
    BOUNDARY_CHECK_POINTS, CONVEXITY_AUDIT_POINTS, SWEEP_RUNS_PER_VALUE
)
from app.engine.autodiff import DTYPE, eval_with_input_derivatives
from app.models.icnn import ConvexityAudit, audit_convexity
from app.problems.analytic_maps import ReferenceMap
from app.problems.densities import DensitySpec
from app.problems.domains import DomainSpec
from app.solver.loss import map_l2_error
from app.solver.training import RunConfig, run_ensemble
from app.utils.error_handler import ConfigError, SolverError, UnsupportedConfigurationError

logger = logging.getLogger(__name__)

SWEEP_AXES = ('epochs', 'collocation', 'ratio')


def transport(network, points) -> np.ndarray:
    """∇u at points, as a numpy array."""
    x = torch.as_tensor(np.asarray(points), dtype=DTYPE)
    with torch.no_grad():
        _, grad, _ = eval_with_input_derivatives(network, x, order=1)
    return grad.numpy()


# ---------------------------------------------------------------------------
# L² error and error fields
# ---------------------------------------------------------------------------

def l2_map_error(network, reference: ReferenceMap, domain: DomainSpec,
                 n_test: int = TEST_POINTS, seed: int = 0) -> float:
    """√(|X|/n Σ |∇u(x_i) - T(x_i)|²) over n uniform samples of the domain."""
    points = domain.sample_interior(n_test, seed)
    return map_l2_error(network, reference, points, domain.volume())


@dataclass
class ErrorField:
    frame: pd.DataFrame
    resolution: int
    max_error: tuple

    @property
    def max_x(self) -> float:
        return self.max_error[0]

    @property
    def max_y(self) -> float:
        return self.max_error[1]


def error_field(network, reference: ReferenceMap, domain: DomainSpec,
                resolution: int = ERROR_FIELD_RESOLUTION) -> ErrorField:
    """|∇u_x - T_x| and |∇u_y - T_y| at the cell centers of a grid over the bounding box.

    Cells whose center lies outside the domain are NaN.
    """
    if domain.dim != 2:
        raise UnsupportedConfigurationError("Error fields are only produced for 2D problems",
                                            {'dim': domain.dim})
    low, high = domain.bounding_box()
    xs = low[0] + (np.arange(resolution) + 0.5) * (high[0] - low[0]) / resolution
    ys = low[1] + (np.arange(resolution) + 0.5) * (high[1] - low[1]) / resolution
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    inside = domain.contains(centers)
    errors = np.full(centers.shape, np.nan)
    if inside.any():
        errors[inside] = np.abs(transport(network, centers[inside]) - reference(centers[inside]))
    frame = pd.DataFrame({
        'x': centers[:, 0], 'y': centers[:, 1], 'err_x': errors[:, 0], 'err_y': errors[:, 1],
    })
    max_error = (float(np.nanmax(errors[:, 0])), float(np.nanmax(errors[:, 1]))) if inside.any() else (0.0, 0.0)
    return ErrorField(frame, resolution, max_error)


def corner_center_ratio(field_: ErrorField, domain: DomainSpec, fraction: float = 0.2) -> float:
    """Mean error magnitude in the four corner regions over the central region of a box."""
    if domain.kind != 'box':
        raise UnsupportedConfigurationError("Corner/center ratio needs a box domain")
    low, high = domain.lower, domain.upper
    u = (field_.frame[['x', 'y']].to_numpy() - low) / (high - low)
    magnitude = np.hypot(field_.frame['err_x'].to_numpy(), field_.frame['err_y'].to_numpy())
    near_edge = (u < fraction) | (u > 1.0 - fraction)
    corner = near_edge.all(axis=1)
    center = (np.abs(u - 0.5) < fraction / 2).all(axis=1)
    center_mean = float(np.nanmean(magnitude[center]))
    corner_mean = float(np.nanmean(magnitude[corner]))
    if center_mean == 0.0:
        return math.inf if corner_mean > 0 else 1.0
    return corner_mean / center_mean


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass
class TransportHistogram:
    edges: tuple
    source_counts: np.ndarray
    image_counts: np.ndarray
    overflow: int
    n_samples: int

    @property
    def overflow_fraction(self) -> float:
        return self.overflow / self.n_samples

    def max_mean_ratio(self) -> float:
        """Largest image cell count over the mean count of in-grid image points."""
        mean = self.image_counts.sum() / self.image_counts.size
        return float(self.image_counts.max() / mean) if mean > 0 else math.inf

    def mass_deviation(self, target: DensitySpec) -> float:
        """Mean |image cell fraction - target cell mass| relative to the mean target cell mass."""
        masses = target.cell_masses(self.edges)
        fractions = self.image_counts / self.n_samples
        return float(np.abs(fractions - masses).mean() / masses.mean())

    def to_frame(self) -> pd.DataFrame:
        index = np.indices(self.source_counts.shape).reshape(self.source_counts.ndim, -1)
        columns = {name: index[axis] for axis, name in zip(range(index.shape[0]), ('i', 'j', 'k'))}
        columns['source_count'] = self.source_counts.ravel().astype(np.int64)
        columns['image_count'] = self.image_counts.ravel().astype(np.int64)
        return pd.DataFrame(columns)

    def metrics(self, target: Optional[DensitySpec] = None) -> dict:
        payload = {
            'n_samples': self.n_samples,
            'bins': list(self.source_counts.shape),
            'overflow': self.overflow,
            'overflow_fraction': self.overflow_fraction,
            'max_mean_ratio': self.max_mean_ratio(),
        }
        if target is not None and target.support.kind == 'box':
            payload['mass_deviation'] = self.mass_deviation(target)
        return payload


def transport_histogram(network, source: DensitySpec, n_samples: int = HISTOGRAM_SAMPLES,
                        bins: int = HISTOGRAM_BINS, seed: int = 0,
                        grid_domain: Optional[DomainSpec] = None) -> TransportHistogram:
    """Bin samples of f and their images under ∇u on the same bins^d grid.

    The grid spans the bounding box of ``grid_domain`` (the source support by
    default). Images outside it go to the overflow count.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    grid_domain = grid_domain or source.support
    low, high = grid_domain.bounding_box()
    edges = tuple(np.linspace(low[axis], high[axis], bins + 1) for axis in range(grid_domain.dim))
    points = source.sample(n_samples, seed).points
    images = transport(network, points)
    source_counts, _ = np.histogramdd(points, bins=edges)
    image_counts, _ = np.histogramdd(images, bins=edges)
    overflow = n_samples - int(image_counts.sum())
    if overflow:
        logger.info("%d of %d transported points fell outside the histogram grid", overflow, n_samples)
    return TransportHistogram(edges, source_counts, image_counts, overflow, n_samples)


# ---------------------------------------------------------------------------
# Boundary image
# ---------------------------------------------------------------------------

def discrete_hausdorff(a, b):
    """Two-sided discrete Hausdorff distance. Returns (d_H, sup_a min_b, sup_b min_a)."""
    a = torch.as_tensor(np.asarray(a), dtype=DTYPE)
    b = torch.as_tensor(np.asarray(b), dtype=DTYPE)
    distances = torch.cdist(a, b, compute_mode='donot_use_mm_for_euclid_dist')
    a_to_b = float(distances.min(dim=1).values.max())
    b_to_a = float(distances.min(dim=0).values.max())
    return max(a_to_b, b_to_a), a_to_b, b_to_a


def boundary_image_check(network, source_domain: DomainSpec, target_domain: DomainSpec,
                         n: int = BOUNDARY_CHECK_POINTS, seed: int = 0) -> float:
    """Hausdorff estimate between ∇u(∂X samples) and ∂Y samples."""
    if n < 2:
        raise ValueError(f"Boundary check needs n >= 2, got {n}")
    source = source_domain.sample_boundary(n, seed)
    target = target_domain.sample_boundary(n, seed + 1)
    distance, _, _ = discrete_hausdorff(transport(network, source.points), target.points)
    return distance


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    l2_train: Optional[float] = None
    l2_test: Optional[float] = None
    max_error: Optional[tuple] = None
    corner_center_ratio: Optional[float] = None
    histogram: Optional[dict] = None
    hausdorff: Optional[float] = None
    audit: Optional[ConvexityAudit] = None
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'l2_train': self.l2_train,
            'l2_test': self.l2_test,
            'max_error': list(self.max_error) if self.max_error else None,
            'corner_center_ratio': self.corner_center_ratio,
            'histogram': self.histogram,
            'hausdorff': self.hausdorff,
            'convexity_audit': self.audit.to_dict() if self.audit else None,
        }


@dataclass(frozen=True)
class EvalRequest:
    l2: bool = True
    error_field: bool = False
    error_field_resolution: int = ERROR_FIELD_RESOLUTION
    corner_center: bool = False
    histogram: bool = False
    histogram_samples: int = HISTOGRAM_SAMPLES
    histogram_bins: int = HISTOGRAM_BINS
    boundary_check: bool = False
    boundary_points: int = BOUNDARY_CHECK_POINTS
    audit: bool = True
    audit_points: int = CONVEXITY_AUDIT_POINTS


def evaluate(network, config: RunConfig, request: EvalRequest = EvalRequest()):
    """Run the requested metrics; returns (EvalReport, {artifact name: DataFrame})."""
    report = EvalReport()
    frames = {}
    source_domain = config.source.support
    target_domain = config.target.support
    if config.reference is not None and request.l2:
        volume = source_domain.volume()
        train = source_domain.sample_interior(config.n_collocation, config.point_seed)
        report.l2_train = map_l2_error(network, config.reference, train, volume)
        report.l2_test = l2_map_error(network, config.reference, source_domain,
                                      TEST_POINTS, config.seed_for('test'))
        logger.info("L2 error: train %.4e, test %.4e", report.l2_train, report.l2_test)
    if config.reference is not None and request.error_field and config.dim == 2:
        errors = error_field(network, config.reference, source_domain, request.error_field_resolution)
        report.max_error = errors.max_error
        frames['error_field'] = errors.frame
        if request.corner_center and source_domain.kind == 'box':
            report.corner_center_ratio = corner_center_ratio(errors, source_domain)
    if request.histogram:
        histogram = transport_histogram(network, config.source, request.histogram_samples,
                                        request.histogram_bins, config.seed_for('histogram'),
                                        grid_domain=target_domain)
        report.histogram = histogram.metrics(config.target)
        frames['histogram'] = histogram.to_frame()
    if request.boundary_check:
        report.hausdorff = boundary_image_check(network, source_domain, target_domain,
                                                request.boundary_points, config.seed_for('boundary_check'))
        logger.info("Boundary image Hausdorff estimate %.4e", report.hausdorff)
    if request.audit:
        points = source_domain.sample_interior(request.audit_points, config.seed_for('audit'))
        report.audit = audit_convexity(network, points.points)
    return report, frames


# ---------------------------------------------------------------------------
# Sensitivity sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    axis: str
    values: list
    frame: pd.DataFrame

    def cell_summary(self) -> pd.DataFrame:
        ok = self.frame[self.frame['status'] == 'ok']
        grouped = ok.groupby('axis_value', sort=False)['l2_test']
        summary = pd.DataFrame({
            'mean_l2_test': grouped.mean(),
            'std_l2_test': grouped.std(ddof=0),
            'runs': grouped.size(),
        }).reset_index()
        return summary

    def mean_errors(self) -> dict:
        summary = self.cell_summary()
        return dict(zip(summary['axis_value'], summary['mean_l2_test']))


def apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    """Base config with one sweep axis overridden."""
    if axis == 'epochs':
        return replace(config, lbfgs_epochs=int(value))
    if axis == 'collocation':
        return replace(config, n_collocation=int(value))
    if axis == 'ratio':
        n_boundary = max(1, int(round(float(value) * config.n_collocation)))
        return replace(config, n_boundary=n_boundary, n_target_boundary=n_boundary)
    raise ConfigError(f"Unknown sweep axis '{axis}', expected one of {SWEEP_AXES}", field='axis')


def sensitivity_sweep(base: RunConfig, axis: str, values: Sequence,
                      runs_per_value: int = SWEEP_RUNS_PER_VALUE, seed_base: int = 0,
                      threads: int = 1) -> SweepReport:
    """One ensemble per value; all cells share the per-run seeds so point sets are nested."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis '{axis}', expected one of {SWEEP_AXES}", field='axis')
    values = list(values)
    if not values:
        raise ConfigError("Sweep needs at least one value", field='values')
    rows = []
    for value in values:
        cell = apply_axis(base, axis, value)
        logger.info("Sweep %s = %s", axis, value)
        try:
            ensemble = run_ensemble(cell, runs_per_value, seed_base, threads)
            members = ensemble.members
        except SolverError as exc:
            logger.warning("Sweep cell %s = %s failed: %s", axis, value, exc.message)
            rows.append({'axis_value': value, 'run_id': -1, 'status': 'failed',
                         'l2_test': np.nan, 'l2_train': np.nan, 'final_loss': np.nan})
            continue
        for member in members:
            rows.append({'axis_value': value, 'run_id': member.index, 'status': member.status,
                         'l2_test': member.l2_test, 'l2_train': member.l2_train,
                         'final_loss': member.final_loss})
    frame = pd.DataFrame(rows, columns=['axis_value', 'run_id', 'l2_test', 'l2_train', 'final_loss', 'status'])
    return SweepReport(axis, values, frame)
