import copy
import json

import pytest

from app.engine.optim import LbfgsConfig
from app.problems.analytic_maps import disk_to_ellipse_exact
from app.problems.densities import DensitySpec
from app.problems.domains import DomainSpec
from app.solver.training import RunConfig

TINY_CONFIG = {
    "schema_version": 1,
    "name": "tiny-disk-ellipse",
    "problem": {
        "source": {
            "domain": {"kind": "ball", "matrix": [[1.0, 0.0], [0.0, 1.0]], "center": [0.0, 0.0],
                       "name": "unit_disk"},
            "density": {"kind": "uniform"}
        },
        "target": {
            "domain": {"kind": "ball", "matrix": [[2.0, 0.0], [0.0, 0.5]], "center": [3.5, 0.0],
                       "name": "ellipse"},
            "density": {"kind": "uniform"}
        },
        "boundary_mode": "transport",
        "boundary_weight": 1.0,
        "reference": {"kind": "disk_to_ellipse"}
    },
    "network": {"hidden_widths": [4, 4]},
    "sampling": {"n_collocation": 16, "n_boundary": 16, "validation_points": 50},
    "seeds": {"points": 3, "init": 4, "ensemble": 5},
    "schedule": {"pretrain_epochs": 3, "adam_epochs": 3, "lbfgs_epochs": 2},
    "optimizer": {"lbfgs": {"sub_iterations": 3}},
    "evaluation": {"l2": True, "error_field": True, "error_field_resolution": 10,
                   "boundary_check": True, "boundary_points": 50, "audit_points": 50},
    "ensemble": {"runs": 2, "threads": 1}
}


def make_run_config(**overrides):
    """Small disk-to-ellipse run that finishes in well under a second."""
    source = DensitySpec.uniform(DomainSpec.unit_ball(2))
    target = DensitySpec.uniform(DomainSpec.ball_image([[2.0, 0.0], [0.0, 0.5]], [3.5, 0.0]))
    settings = dict(
        name='tiny',
        source=source,
        target=target,
        reference=disk_to_ellipse_exact(),
        hidden_widths=(4, 4),
        point_seed=3,
        init_seed=4,
        n_collocation=16,
        n_boundary=16,
        pretrain_epochs=3,
        adam_epochs=3,
        lbfgs_epochs=2,
        lbfgs=LbfgsConfig(sub_iterations=3),
        validation_points=50,
        audit_points=50,
    )
    settings.update(overrides)
    return RunConfig(**settings)


@pytest.fixture
def tiny_run_config():
    return make_run_config


@pytest.fixture
def tiny_config_dict():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_dict):
    def write(data=None, name='config.json'):
        path = tmp_path / name
        path.write_text(json.dumps(tiny_config_dict if data is None else data))
        return str(path)
    return write
