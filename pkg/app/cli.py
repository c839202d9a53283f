"""
Command-line surface: train, paper, sweep, eval and audit.

Every command returns a process exit code: 0 success, 2 config/schema error,
3 numerical abort, 4 unknown experiment, 1 anything else.
"""
import argparse
import logging
import os
from dataclasses import replace

import numpy as np

from app.config import (
    OUTPUT_ROOT, EXIT_OK, EXIT_FAILURE, CONVEXITY_AUDIT_POINTS, CONVEXITY_TOL,
    SWEEP_EPOCHS, SWEEP_COLLOCATION, SWEEP_RATIO, SWEEP_RUNS_PER_VALUE
)
from app.engine.autodiff import gradient_check
from app.models.icnn import IcnnParams, audit_convexity
from app.solver.evaluation import SWEEP_AXES, evaluate, sensitivity_sweep
from app.solver.loss import total_loss
from app.solver.training import EnsembleReport, build_problem, run, run_ensemble
from app.utils.artifacts import ensure_dir, load_params, save_params, write_csv, write_json
from app.utils.error_handler import (
    ConfigError, NumericalError, SolverError, create_error_response, create_success_response,
    handle_generic_error, handle_solver_error
)
from app.utils.experiment_config import BUNDLED_EXPERIMENTS, load_config, load_experiment

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_VALUES = {
    'epochs': SWEEP_EPOCHS,
    'collocation': SWEEP_COLLOCATION,
    'ratio': SWEEP_RATIO,
}
GRADIENT_CHECK_TOL = 1e-4


def _banner(title, lines=()):
    logger.info("========================================================================")
    logger.info("  %s", title)
    for line in lines:
        logger.info("  %s", line)
    logger.info("========================================================================")


def _output_dir(args, experiment):
    if getattr(args, 'out', None):
        return args.out
    return os.path.join(OUTPUT_ROOT, experiment.output_dir or experiment.name)


def _write_abort(out, error: NumericalError):
    ensure_dir(out)
    if error.last_good is not None:
        save_params(error.last_good, os.path.join(out, 'params_last_good.json'))
    write_json(create_error_response(error.message, error.error_code, error.details),
               os.path.join(out, 'error.json'))


def _write_run(out, params, report, experiment):
    ensure_dir(out)
    save_params(params, os.path.join(out, 'params.json'))
    write_csv(report.to_frame(), os.path.join(out, 'train.csv'))
    write_csv(report.timing_frame(), os.path.join(out, 'train_timing.csv'))
    write_json(report.summary(), os.path.join(out, 'report.json'))
    _write_evaluation(out, params, experiment)


def _write_evaluation(out, params, experiment):
    eval_report, frames = evaluate(params, experiment.run, experiment.evaluation)
    for name, frame in frames.items():
        write_csv(frame, os.path.join(out, f'{name}.csv'))
    write_json(eval_report.to_dict(), os.path.join(out, 'eval.json'))
    return eval_report


def _single_run(experiment, out):
    try:
        params, report = run(experiment.run)
    except NumericalError as exc:
        _write_abort(out, exc)
        raise
    _write_run(out, params, report, experiment)
    return params, report


def _write_ensemble(out, ensemble: EnsembleReport, experiment, label='ensemble'):
    ensure_dir(out)
    for member in ensemble.succeeded:
        member_dir = os.path.join(out, f'run_{member.index:02d}')
        ensure_dir(member_dir)
        save_params(member.params, os.path.join(member_dir, 'params.json'))
        write_csv(member.report.to_frame(), os.path.join(member_dir, 'train.csv'))
        write_csv(member.report.timing_frame(), os.path.join(member_dir, 'train_timing.csv'))
    write_csv(ensemble.runs_frame(), os.path.join(out, f'{label}_runs.csv'))
    write_csv(ensemble.per_epoch(), os.path.join(out, f'{label}_epochs.csv'))
    write_json(ensemble.summary(), os.path.join(out, f'{label}_summary.json'))
    first = ensemble.succeeded[0]
    _write_evaluation(out, first.params, replace(experiment, run=replace(
        experiment.run, point_seed=first.point_seed, init_seed=first.init_seed)))


def adam_only(experiment):
    """Same budget measured in effective epochs, spent entirely on Adam."""
    schedule = experiment.run
    epochs = schedule.adam_epochs + schedule.lbfgs_epochs * schedule.lbfgs.sub_iterations
    return replace(experiment, run=replace(schedule, adam_epochs=epochs, lbfgs_epochs=0,
                                           name=f"{schedule.name}-adam"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    experiment = load_config(args.config)
    if args.seed is not None:
        experiment = experiment.with_seed(args.seed)
    out = _output_dir(args, experiment)
    _banner(f"TRAIN {experiment.name}", [f"config: {args.config}", f"output: {out}",
                                         f"point seed: {experiment.run.point_seed}"])
    _single_run(experiment, out)
    return EXIT_OK


def cmd_paper(args) -> int:
    experiment = load_experiment(args.experiment)
    if args.seed is not None:
        experiment = experiment.with_seed(args.seed)
    runs = args.runs or experiment.runs
    threads = args.threads or experiment.threads
    out = _output_dir(args, experiment)
    _banner(f"EXPERIMENT {experiment.name}", [experiment.description, f"runs: {runs}",
                                                    f"output: {out}"])
    if runs == 1 and not args.compare_adam:
        _single_run(experiment, out)
        return EXIT_OK

    ensemble = run_ensemble(experiment.run, runs, experiment.seed_base, threads)
    _write_ensemble(out, ensemble, experiment)
    if args.compare_adam:
        baseline = adam_only(experiment)
        adam_ensemble = run_ensemble(baseline.run, runs, experiment.seed_base, threads)
        _write_ensemble(os.path.join(out, 'adam_only'), adam_ensemble, baseline, label='adam')
        comparison = {'lbfgs': ensemble.summary(), 'adam': adam_ensemble.summary()}
        write_json(comparison, os.path.join(out, 'comparison.json'))
        lbfgs_median = comparison['lbfgs']['l2_test']['median']
        adam_median = comparison['adam']['l2_test']['median']
        if lbfgs_median is not None and adam_median is not None:
            logger.info("Median L2 test error: L-BFGS %.4e, Adam only %.4e", lbfgs_median, adam_median)
    return EXIT_OK


def _parse_values(raw, axis):
    if raw is None:
        return list(DEFAULT_SWEEP_VALUES[axis])
    try:
        values = [float(v) for v in raw.split(',') if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"Sweep values must be comma-separated numbers, got {raw!r}", field='values') from exc
    if not values:
        raise ConfigError("Sweep needs at least one value", field='values')
    if axis in ('epochs', 'collocation'):
        if any(v != int(v) or v < (0 if axis == 'epochs' else 1) for v in values):
            raise ConfigError(f"Sweep axis '{axis}' needs integer values", field='values')
        values = [int(v) for v in values]
    elif any(v <= 0 for v in values):
        raise ConfigError("Boundary ratios must be positive", field='values')
    return values


def cmd_sweep(args) -> int:
    experiment = load_config(args.config)
    if args.seed is not None:
        experiment = experiment.with_seed(args.seed)
    values = _parse_values(args.values, args.axis)
    runs = args.runs or SWEEP_RUNS_PER_VALUE
    out = _output_dir(args, experiment)
    _banner(f"SWEEP {experiment.name} over {args.axis}", [f"values: {values}", f"runs per value: {runs}"])
    sweep = sensitivity_sweep(experiment.run, args.axis, values, runs, experiment.seed_base,
                              args.threads or experiment.threads)
    ensure_dir(out)
    write_csv(sweep.frame, os.path.join(out, f'sweep_{args.axis}.csv'))
    write_json({'axis': args.axis, 'values': values,
                'cells': sweep.cell_summary().to_dict(orient='records')},
               os.path.join(out, f'sweep_{args.axis}_summary.json'))
    return EXIT_OK


def cmd_eval(args) -> int:
    experiment = load_config(args.config)
    if args.seed is not None:
        experiment = experiment.with_seed(args.seed)
    params = load_params(args.params)
    out = _output_dir(args, experiment)
    _banner(f"EVALUATE {experiment.name}", [f"params: {args.params}", f"output: {out}"])
    ensure_dir(out)
    _write_evaluation(out, params, experiment)
    return EXIT_OK


def cmd_audit(args) -> int:
    experiment = load_config(args.config)
    params = load_params(args.params)
    out = _output_dir(args, experiment)
    config = experiment.run
    if params.widths != config.widths:
        raise ConfigError(f"Saved widths {list(params.widths)} do not match config {list(config.widths)}",
                          field='network.hidden_widths')
    _banner(f"AUDIT {experiment.name}", [f"params: {args.params}"])
    domain = config.source.support
    points = domain.sample_interior(args.points, args.seed)
    convexity = audit_convexity(params, points.points, CONVEXITY_TOL)

    small = replace(config, n_collocation=8, n_boundary=4, n_target_boundary=4,
                    point_seed=args.seed)
    problem = build_problem(small)

    def loss_fn(theta):
        loss, _ = total_loss(IcnnParams.from_flat(params.widths, theta), problem)
        return loss

    flat = params.flatten().detach()
    rng = np.random.default_rng(args.seed)
    count = min(args.coordinates, flat.numel())
    coordinates = sorted(rng.choice(flat.numel(), size=count, replace=False).tolist())
    check = gradient_check(loss_fn, flat, coordinates)
    passed = convexity.passed and check.passed(GRADIENT_CHECK_TOL)
    logger.info("Convexity audit %s; gradient check max relative error %.3e",
                "passed" if convexity.passed else "FAILED", check.max_relative_error)
    ensure_dir(out)
    write_json(create_success_response({
        'passed': passed,
        'convexity': convexity.to_dict(),
        'gradient_check': check.to_dict(),
        'gradient_tolerance': GRADIENT_CHECK_TOL,
    }), os.path.join(out, 'audit.json'))
    return EXIT_OK if passed else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='otpinn',
        description='Convex PINN solver for the Monge-Ampère optimal transport problem'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, seed_default=None):
        p.add_argument('--out', help=f'output directory (default: $OTPINN_OUTPUT_ROOT/<name>, root {OUTPUT_ROOT})')
        p.add_argument('--seed', type=int, default=seed_default, help='override the point / ensemble seed')

    train = sub.add_parser('train', help='train one network from a config file')
    train.add_argument('config')
    common(train)
    train.set_defaults(handler=cmd_train)

    paper = sub.add_parser('paper', help='run one of the bundled experiments')
    paper.add_argument('experiment', help=f"one of: {', '.join(BUNDLED_EXPERIMENTS)}")
    paper.add_argument('--runs', type=int, help='ensemble size (default from the experiment)')
    paper.add_argument('--threads', type=int, help='worker threads for ensembles')
    paper.add_argument('--compare-adam', action='store_true',
                       help='also run an Adam-only ensemble and write comparison.json')
    common(paper)
    paper.set_defaults(handler=cmd_paper)

    sweep = sub.add_parser('sweep', help='sensitivity sweep over one axis')
    sweep.add_argument('config')
    sweep.add_argument('--axis', required=True, choices=SWEEP_AXES)
    sweep.add_argument('--values', help='comma-separated axis values')
    sweep.add_argument('--runs', type=int, help='runs per value')
    sweep.add_argument('--threads', type=int)
    common(sweep)
    sweep.set_defaults(handler=cmd_sweep)

    evaluate_cmd = sub.add_parser('eval', help='re-evaluate saved parameters')
    evaluate_cmd.add_argument('config')
    evaluate_cmd.add_argument('--params', required=True)
    common(evaluate_cmd)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    audit = sub.add_parser('audit', help='convexity and gradient checks on saved parameters')
    audit.add_argument('config')
    audit.add_argument('--params', required=True)
    audit.add_argument('--points', type=int, default=CONVEXITY_AUDIT_POINTS)
    audit.add_argument('--coordinates', type=int, default=25, help='parameters probed by finite differences')
    common(audit, seed_default=0)
    audit.set_defaults(handler=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ('runs', 'threads'):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            _, code = handle_solver_error(ConfigError(f"--{name} must be >= 1", field=name))
            return code
    if args.seed is not None and args.seed < 0:
        _, code = handle_solver_error(ConfigError(f"--seed must be >= 0, got {args.seed}", field='seed'))
        return code
    try:
        return args.handler(args)
    except SolverError as e:
        _, code = handle_solver_error(e)
        return code
    except Exception as e:
        _, code = handle_generic_error(e)
        return code
