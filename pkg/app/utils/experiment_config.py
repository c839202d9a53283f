"""
Experiment config files (JSON, schema_version 1).

Every section is validated before any work starts: unknown keys, wrong types
and out-of-range values raise ConfigError naming the dotted field path, and
missing keys fall back to the defaults in app/config.py.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from app.config import (
    SCHEMA_VERSION, DEFAULT_HIDDEN_WIDTHS, BOUNDARY_WEIGHT, N_COLLOCATION, N_BOUNDARY,
    PRETRAIN_EPOCHS, PRETRAIN_LR, ADAM_EPOCHS, LBFGS_EPOCHS, VALIDATION_POINTS,
    ENSEMBLE_RUNS, ERROR_FIELD_RESOLUTION, HISTOGRAM_SAMPLES, HISTOGRAM_BINS,
    BOUNDARY_CHECK_POINTS, CONVEXITY_AUDIT_POINTS
)
from app.engine.optim import AdamConfig, LbfgsConfig
from app.problems.analytic_maps import (
    ReferenceMap, disk_to_ellipse_exact, ellipse_to_ellipse_exact, separable_rearrangement
)
from app.problems.densities import DensitySpec, GaussianComponent
from app.problems.domains import DomainSpec
from app.solver.evaluation import EvalRequest
from app.solver.training import RunConfig, derive_seed
from app.utils.artifacts import read_json
from app.utils.error_handler import (
    ConfigError, DomainError, UnknownExperimentError
)

logger = logging.getLogger(__name__)

EXPERIMENTS_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'experiments')
BUNDLED_EXPERIMENTS = (
    'disk-ellipse', 'ellipse-ellipse', 'gauss-uniform', 'gauss-gauss', 'bimodal-uniform', 'cube-3d'
)

TOP_LEVEL_KEYS = {'schema_version', 'name', 'description', 'problem', 'network', 'sampling', 'seeds',
                  'schedule', 'optimizer', 'evaluation', 'ensemble', 'output'}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    run: RunConfig
    evaluation: EvalRequest = field(default_factory=EvalRequest)
    runs: int = ENSEMBLE_RUNS
    threads: int = 1
    seed_base: int = 0
    output_dir: Optional[str] = None
    description: str = ""
    source_path: Optional[str] = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        run = replace(self.run, point_seed=int(seed), init_seed=derive_seed(seed, 'init'))
        return replace(self, run=run, seed_base=int(seed))


# ---------------------------------------------------------------------------
# field helpers
# ---------------------------------------------------------------------------

def _section(data, path, allowed):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be an object", field=path)
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown key '{unknown[0]}' in '{path}'", field=f"{path}.{unknown[0]}")
    return data


def _number(data, key, path, default, kind=float, minimum=None, exclusive=False):
    name = f"{path}.{key}" if path else key
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{name}' must be a number, got {value!r}", field=name)
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"'{name}' must be an integer, got {value!r}", field=name)
        value = int(value)
    else:
        value = float(value)
    if minimum is not None and (value <= minimum if exclusive else value < minimum):
        bound = f"> {minimum}" if exclusive else f">= {minimum}"
        raise ConfigError(f"'{name}' must be {bound}, got {value}", field=name)
    return value


def _flag(data, key, path, default):
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"'{path}.{key}' must be true or false", field=f"{path}.{key}")
    return value


def _vector(value, name, length=None):
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"'{name}' must be a list of numbers", field=name)
    if length is not None and len(value) != length:
        raise ConfigError(f"'{name}' must have {length} entries, got {len(value)}", field=name)
    return [float(v) for v in value]


def _matrix(value, name):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"'{name}' must be a square list of rows", field=name)
    rows = [_vector(row, f"{name}[{i}]", len(value)) for i, row in enumerate(value)]
    return rows


# ---------------------------------------------------------------------------
# sections
# ---------------------------------------------------------------------------

def parse_domain(data, path) -> DomainSpec:
    data = _section(data, path, {'kind', 'matrix', 'center', 'lower', 'upper', 'name'})
    kind = data.get('kind')
    name = data.get('name', path.split('.')[-2] if '.' in path else 'domain')
    try:
        if kind == 'ball':
            matrix = _matrix(data.get('matrix'), f"{path}.matrix")
            center = _vector(data.get('center', [0.0] * len(matrix)), f"{path}.center", len(matrix))
            return DomainSpec.ball_image(matrix, center, name=name)
        if kind == 'box':
            lower = _vector(data.get('lower'), f"{path}.lower")
            upper = _vector(data.get('upper'), f"{path}.upper", len(lower))
            return DomainSpec.box(lower, upper, name=name)
    except DomainError as exc:
        raise ConfigError(exc.message, field=path) from exc
    raise ConfigError(f"'{path}.kind' must be 'ball' or 'box', got {kind!r}", field=f"{path}.kind")


def parse_density(data, support: DomainSpec, path) -> DensitySpec:
    data = _section(data, path, {'kind', 'components'})
    kind = data.get('kind', 'uniform')
    if kind == 'uniform':
        return DensitySpec.uniform(support)
    if kind != 'gaussian_mixture':
        raise ConfigError(f"'{path}.kind' must be 'uniform' or 'gaussian_mixture', got {kind!r}",
                          field=f"{path}.kind")
    raw = data.get('components')
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"'{path}.components' must be a nonempty list", field=f"{path}.components")
    components = []
    for i, item in enumerate(raw):
        item_path = f"{path}.components[{i}]"
        item = _section(item, item_path, {'center', 'variance', 'variances', 'weight'})
        center = _vector(item.get('center'), f"{item_path}.center", support.dim)
        weight = _number(item, 'weight', item_path, 1.0, minimum=0.0, exclusive=True)
        if 'variances' in item:
            variances = _vector(item['variances'], f"{item_path}.variances", support.dim)
            if min(variances) <= 0:
                raise ConfigError(f"'{item_path}.variances' must be positive",
                                  field=f"{item_path}.variances")
            components.append(GaussianComponent(np.asarray(center), np.asarray(variances), weight))
        elif 'variance' in item:
            variance = _number(item, 'variance', item_path, None, minimum=0.0, exclusive=True)
            components.append(GaussianComponent.isotropic(center, variance, weight))
        else:
            raise ConfigError(f"'{item_path}' needs 'variance' or 'variances'", field=f"{item_path}.variance")
    return DensitySpec.gaussian_mixture(support, components)


def parse_reference(data, source: DensitySpec, target: DensitySpec, path) -> Optional[ReferenceMap]:
    data = _section(data, path, {'kind', 'matrix', 'offset'})
    kind = data.get('kind', 'none')
    if kind == 'none':
        return None
    if kind == 'disk_to_ellipse':
        return disk_to_ellipse_exact()
    if kind == 'ellipse_to_ellipse':
        if source.support.kind != 'ball' or target.support.kind != 'ball':
            raise ConfigError("ellipse_to_ellipse needs ball-image source and target",
                              field=f"{path}.kind")
        return ellipse_to_ellipse_exact(source.support.matrix, target.support.matrix)
    if kind == 'separable':
        return separable_rearrangement(source, target)
    if kind == 'affine':
        matrix = _matrix(data.get('matrix'), f"{path}.matrix")
        offset = _vector(data.get('offset', [0.0] * len(matrix)), f"{path}.offset", len(matrix))
        return ReferenceMap.affine(matrix, offset)
    raise ConfigError(f"Unknown reference map kind {kind!r}", field=f"{path}.kind")


def _endpoint(data, path):
    data = _section(data, path, {'domain', 'density'})
    support = parse_domain(data.get('domain'), f"{path}.domain")
    return parse_density(data.get('density'), support, f"{path}.density")


def _adam(data, path, lr_default):
    data = _section(data, path, {'lr', 'beta1', 'beta2', 'eps'})
    defaults = AdamConfig()
    return AdamConfig(
        lr=_number(data, 'lr', path, lr_default, minimum=0.0, exclusive=True),
        beta1=_number(data, 'beta1', path, defaults.beta1, minimum=0.0),
        beta2=_number(data, 'beta2', path, defaults.beta2, minimum=0.0),
        eps=_number(data, 'eps', path, defaults.eps, minimum=0.0, exclusive=True),
    )


def _lbfgs(data, path):
    data = _section(data, path, {'lr', 'history_size', 'sub_iterations', 'c1', 'c2', 'max_line_search',
                                 'tolerance_grad', 'tolerance_change'})
    d = LbfgsConfig()
    config = LbfgsConfig(
        lr=_number(data, 'lr', path, d.lr, minimum=0.0, exclusive=True),
        history_size=_number(data, 'history_size', path, d.history_size, kind=int, minimum=1),
        sub_iterations=_number(data, 'sub_iterations', path, d.sub_iterations, kind=int, minimum=1),
        c1=_number(data, 'c1', path, d.c1, minimum=0.0, exclusive=True),
        c2=_number(data, 'c2', path, d.c2, minimum=0.0, exclusive=True),
        max_line_search=_number(data, 'max_line_search', path, d.max_line_search, kind=int, minimum=1),
        tolerance_grad=_number(data, 'tolerance_grad', path, d.tolerance_grad, minimum=0.0),
        tolerance_change=_number(data, 'tolerance_change', path, d.tolerance_change, minimum=0.0),
    )
    if not config.c1 < config.c2 < 1.0:
        raise ConfigError("Wolfe constants need 0 < c1 < c2 < 1", field=f"{path}.c2")
    return config


def _evaluation(data, path) -> EvalRequest:
    data = _section(data, path, {'l2', 'error_field', 'error_field_resolution', 'corner_center',
                                 'histogram', 'histogram_samples', 'histogram_bins',
                                 'boundary_check', 'boundary_points', 'audit', 'audit_points'})
    return EvalRequest(
        l2=_flag(data, 'l2', path, True),
        error_field=_flag(data, 'error_field', path, False),
        error_field_resolution=_number(data, 'error_field_resolution', path, ERROR_FIELD_RESOLUTION,
                                       kind=int, minimum=1),
        corner_center=_flag(data, 'corner_center', path, False),
        histogram=_flag(data, 'histogram', path, False),
        histogram_samples=_number(data, 'histogram_samples', path, HISTOGRAM_SAMPLES, kind=int, minimum=1),
        histogram_bins=_number(data, 'histogram_bins', path, HISTOGRAM_BINS, kind=int, minimum=1),
        boundary_check=_flag(data, 'boundary_check', path, False),
        boundary_points=_number(data, 'boundary_points', path, BOUNDARY_CHECK_POINTS, kind=int, minimum=2),
        audit=_flag(data, 'audit', path, True),
        audit_points=_number(data, 'audit_points', path, CONVEXITY_AUDIT_POINTS, kind=int, minimum=1),
    )


def parse_config(data: dict, source_path: Optional[str] = None) -> ExperimentConfig:
    """Validate a decoded config document and build the experiment."""
    if not isinstance(data, dict):
        raise ConfigError("Config document must be a JSON object", field='config')
    unknown = sorted(set(data) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"Unknown top-level key '{unknown[0]}'", field=unknown[0])
    version = data.get('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported schema_version {version!r}, expected {SCHEMA_VERSION}",
                          field='schema_version')
    name = data.get('name')
    if not isinstance(name, str) or not name:
        raise ConfigError("'name' must be a nonempty string", field='name')

    problem = _section(data.get('problem'), 'problem',
                       {'source', 'target', 'boundary_mode', 'boundary_weight', 'reference'})
    if 'source' not in problem or 'target' not in problem:
        raise ConfigError("'problem' needs 'source' and 'target'", field='problem.source')
    source = _endpoint(problem['source'], 'problem.source')
    target = _endpoint(problem['target'], 'problem.target')
    mode = problem.get('boundary_mode', 'transport')
    if mode not in ('transport', 'dirichlet'):
        raise ConfigError(f"'problem.boundary_mode' must be 'transport' or 'dirichlet', got {mode!r}",
                          field='problem.boundary_mode')
    weight = _number(problem, 'boundary_weight', 'problem', BOUNDARY_WEIGHT, minimum=0.0)
    reference = parse_reference(problem.get('reference'), source, target, 'problem.reference')

    network = _section(data.get('network'), 'network', {'hidden_widths'})
    widths = network.get('hidden_widths', list(DEFAULT_HIDDEN_WIDTHS))
    if not isinstance(widths, list) or not widths or not all(
            isinstance(w, int) and not isinstance(w, bool) and w >= 1 for w in widths):
        raise ConfigError("'network.hidden_widths' must be a nonempty list of positive integers",
                          field='network.hidden_widths')

    sampling = _section(data.get('sampling'), 'sampling',
                        {'n_collocation', 'n_boundary', 'n_target_boundary', 'validation_points'})
    n_collocation = _number(sampling, 'n_collocation', 'sampling', N_COLLOCATION, kind=int, minimum=1)
    n_boundary = _number(sampling, 'n_boundary', 'sampling', N_BOUNDARY, kind=int, minimum=1)
    n_target = None
    if 'n_target_boundary' in sampling:
        n_target = _number(sampling, 'n_target_boundary', 'sampling', None, kind=int, minimum=1)
    validation_points = _number(sampling, 'validation_points', 'sampling', VALIDATION_POINTS,
                                kind=int, minimum=1)

    seeds = _section(data.get('seeds'), 'seeds', {'points', 'init', 'ensemble'})
    point_seed = _number(seeds, 'points', 'seeds', 0, kind=int, minimum=0)
    init_seed = _number(seeds, 'init', 'seeds', 1, kind=int, minimum=0)
    seed_base = _number(seeds, 'ensemble', 'seeds', point_seed, kind=int, minimum=0)

    schedule = _section(data.get('schedule'), 'schedule', {'pretrain_epochs', 'adam_epochs', 'lbfgs_epochs'})
    optimizer = _section(data.get('optimizer'), 'optimizer', {'pretrain', 'adam', 'lbfgs'})

    ensemble = _section(data.get('ensemble'), 'ensemble', {'runs', 'threads'})
    output = _section(data.get('output'), 'output', {'dir'})
    output_dir = output.get('dir', name)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("'output.dir' must be a nonempty string", field='output.dir')

    run = RunConfig(
        name=name,
        source=source,
        target=target,
        boundary_mode=mode,
        boundary_weight=weight,
        reference=reference,
        hidden_widths=tuple(widths),
        point_seed=point_seed,
        init_seed=init_seed,
        n_collocation=n_collocation,
        n_boundary=n_boundary,
        n_target_boundary=n_target,
        pretrain_epochs=_number(schedule, 'pretrain_epochs', 'schedule', PRETRAIN_EPOCHS, kind=int, minimum=0),
        adam_epochs=_number(schedule, 'adam_epochs', 'schedule', ADAM_EPOCHS, kind=int, minimum=0),
        lbfgs_epochs=_number(schedule, 'lbfgs_epochs', 'schedule', LBFGS_EPOCHS, kind=int, minimum=0),
        pretrain=_adam(optimizer.get('pretrain'), 'optimizer.pretrain', PRETRAIN_LR),
        adam=_adam(optimizer.get('adam'), 'optimizer.adam', AdamConfig().lr),
        lbfgs=_lbfgs(optimizer.get('lbfgs'), 'optimizer.lbfgs'),
        validation_points=validation_points,
    ).validate()

    return ExperimentConfig(
        name=name,
        run=run,
        evaluation=_evaluation(data.get('evaluation'), 'evaluation'),
        runs=_number(ensemble, 'runs', 'ensemble', ENSEMBLE_RUNS, kind=int, minimum=1),
        threads=_number(ensemble, 'threads', 'ensemble', 1, kind=int, minimum=1),
        seed_base=seed_base,
        output_dir=output_dir,
        description=data.get('description', ''),
        source_path=source_path,
    )


def load_config(path) -> ExperimentConfig:
    logger.info(f"Loading experiment config {path}")
    return parse_config(read_json(path), source_path=os.fspath(path))


def experiment_path(experiment_id: str) -> str:
    if experiment_id not in BUNDLED_EXPERIMENTS:
        raise UnknownExperimentError(experiment_id, BUNDLED_EXPERIMENTS)
    return os.path.join(EXPERIMENTS_DIR, f"{experiment_id}.json")


def load_experiment(experiment_id: str) -> ExperimentConfig:
    return load_config(experiment_path(experiment_id))
