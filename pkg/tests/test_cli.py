import json
import os

import pandas as pd
import pytest

from app import create_cli
from app.cli import adam_only, cmd_train, main
from app.models.icnn import init_params
from app.solver.evaluation import SweepReport
from app.utils.artifacts import read_csv
from app.utils.error_handler import NumericalError
from app.utils.experiment_config import load_config


def trace_body(path):
    with open(path) as handle:
        return handle.readlines()[1:]


class TestCreateCli:
    """Test cases for the parser factory"""

    def test_commands_registered(self):
        parser = create_cli()
        args = parser.parse_args(['train', 'config.json'])

        assert args.handler is cmd_train
        assert args.seed is None

    def test_sweep_needs_axis(self):
        with pytest.raises(SystemExit):
            create_cli().parse_args(['sweep', 'config.json'])

    def test_audit_seed_default(self):
        args = create_cli().parse_args(['audit', 'config.json', '--params', 'p.json'])

        assert args.seed == 0
        assert args.coordinates == 25


class TestTrainCommand:
    """Test cases for the train command"""

    def test_writes_artifacts(self, tmp_path, tiny_config_file):
        out = tmp_path / 'out'
        code = main(['train', tiny_config_file(), '--out', str(out)])

        assert code == 0
        for name in ('params.json', 'train.csv', 'train_timing.csv', 'report.json', 'eval.json',
                     'error_field.csv'):
            assert (out / name).exists()
        with open(out / 'train.csv') as handle:
            assert handle.readline().startswith('# generated')
        assert 'wall_ms' not in read_csv(out / 'train.csv').columns
        timing = read_csv(out / 'train_timing.csv')
        assert list(timing.columns) == ['phase', 'epoch', 'effective_epoch', 'wall_ms']
        assert (timing['wall_ms'] >= 0).all()

    def test_eval_report_contents(self, tmp_path, tiny_config_file):
        out = tmp_path / 'out'
        main(['train', tiny_config_file(), '--out', str(out)])
        payload = json.loads((out / 'eval.json').read_text())

        assert payload['schema_version'] == 1
        assert payload['l2_test'] is not None

    def test_repeatable(self, tmp_path, tiny_config_file):
        path = tiny_config_file()
        main(['train', path, '--out', str(tmp_path / 'a')])
        main(['train', path, '--out', str(tmp_path / 'b')])

        assert trace_body(tmp_path / 'a' / 'train.csv') == trace_body(tmp_path / 'b' / 'train.csv')
        assert (tmp_path / 'a' / 'params.json').read_text() == (tmp_path / 'b' / 'params.json').read_text()

    def test_seed_override_changes_trace(self, tmp_path, tiny_config_file):
        path = tiny_config_file()
        main(['train', path, '--out', str(tmp_path / 'a'), '--seed', '1'])
        main(['train', path, '--out', str(tmp_path / 'b'), '--seed', '2'])
        first = read_csv(tmp_path / 'a' / 'train.csv')
        second = read_csv(tmp_path / 'b' / 'train.csv')

        assert not first['total'].equals(second['total'])

    def test_config_file_not_mutated(self, tmp_path, tiny_config_file):
        path = tiny_config_file()
        before = open(path).read()
        main(['train', path, '--out', str(tmp_path / 'out'), '--seed', '9'])

        assert open(path).read() == before

    def test_invalid_config_writes_nothing(self, tmp_path, tiny_config_dict, tiny_config_file):
        tiny_config_dict['sampling']['n_collocation'] = 0
        out = tmp_path / 'never'

        assert main(['train', tiny_config_file(tiny_config_dict), '--out', str(out)]) == 2
        assert not out.exists()

    def test_unknown_key(self, tmp_path, tiny_config_dict, tiny_config_file):
        tiny_config_dict['sampling']['n_colocation'] = 10

        assert main(['train', tiny_config_file(tiny_config_dict), '--out', str(tmp_path / 'o')]) == 2

    def test_missing_file(self, tmp_path):
        assert main(['train', str(tmp_path / 'absent.json')]) == 2

    def test_negative_seed(self, tmp_path, tiny_config_file):
        out = tmp_path / 'out'

        assert main(['train', tiny_config_file(), '--out', str(out), '--seed', '-1']) == 2
        assert not out.exists()

    def test_numerical_abort(self, mocker, tmp_path, tiny_config_file):
        snapshot = init_params((2, 4, 4, 1), seed=0)
        mocker.patch('app.cli.run', side_effect=NumericalError(
            "Non-finite loss in phase adam", last_good=snapshot, details={'phase': 'adam', 'epoch': 2}))
        out = tmp_path / 'out'

        assert main(['train', tiny_config_file(), '--out', str(out)]) == 3
        assert (out / 'params_last_good.json').exists()
        assert not (out / 'params.json').exists()
        error = json.loads((out / 'error.json').read_text())
        assert error['error']['code'] == 'NUMERICAL_ABORT'
        assert error['error']['details']['phase'] == 'adam'

    def test_unexpected_error(self, mocker, tmp_path, tiny_config_file):
        mocker.patch('app.cli.run', side_effect=RuntimeError("disk full"))

        assert main(['train', tiny_config_file(), '--out', str(tmp_path / 'out')]) == 1


class TestBundledExperimentCommand:
    """Test cases for the bundled experiment command"""

    def test_unknown_experiment(self):
        assert main(['paper', 'bogus']) == 4

    def test_zero_runs(self):
        assert main(['paper', 'disk-ellipse', '--runs', '0']) == 2

    def test_ensemble_with_adam_comparison(self, mocker, tmp_path, tiny_config_file):
        mocker.patch('app.cli.load_experiment', return_value=load_config(tiny_config_file()))
        out = tmp_path / 'paper'
        code = main(['paper', 'disk-ellipse', '--runs', '2', '--compare-adam', '--out', str(out)])

        assert code == 0
        assert (out / 'run_00' / 'params.json').exists()
        assert (out / 'run_01' / 'train.csv').exists()
        assert (out / 'ensemble_summary.json').exists()
        assert (out / 'adam_only' / 'adam_summary.json').exists()
        comparison = json.loads((out / 'comparison.json').read_text())
        assert set(comparison) >= {'lbfgs', 'adam'}
        assert comparison['lbfgs']['n_succeeded'] == 2

    def test_adam_only_budget(self, tiny_config_file):
        baseline = adam_only(load_config(tiny_config_file()))

        assert baseline.run.adam_epochs == 3 + 2 * 3
        assert baseline.run.lbfgs_epochs == 0
        assert baseline.run.name.endswith('-adam')


class TestSweepCommand:
    """Test cases for the sweep command"""

    def test_writes_sweep_tables(self, mocker, tmp_path, tiny_config_file):
        frame = pd.DataFrame({'axis': ['collocation'] * 2, 'axis_value': [8, 16], 'run_id': [0, 0],
                              'status': ['ok', 'ok'], 'l2_test': [0.2, 0.1]})
        mocked = mocker.patch('app.cli.sensitivity_sweep',
                              return_value=SweepReport('collocation', [8, 16], frame))
        out = tmp_path / 'sweep'
        code = main(['sweep', tiny_config_file(), '--axis', 'collocation', '--values', '8,16',
                     '--runs', '1', '--out', str(out)])

        assert code == 0
        assert mocked.call_args.args[1] == 'collocation'
        assert mocked.call_args.args[2] == [8, 16]
        assert len(read_csv(out / 'sweep_collocation.csv')) == 2
        summary = json.loads((out / 'sweep_collocation_summary.json').read_text())
        assert [cell['axis_value'] for cell in summary['cells']] == [8, 16]

    def test_bad_values(self, tmp_path, tiny_config_file):
        code = main(['sweep', tiny_config_file(), '--axis', 'epochs', '--values', '1,x',
                     '--out', str(tmp_path / 'sweep')])

        assert code == 2

    def test_fractional_epochs_rejected(self, tmp_path, tiny_config_file):
        code = main(['sweep', tiny_config_file(), '--axis', 'epochs', '--values', '1.5',
                     '--out', str(tmp_path / 'sweep')])

        assert code == 2


class TestEvalAndAudit:
    """Test cases for re-evaluating and auditing saved parameters"""

    @pytest.fixture
    def trained(self, tmp_path, tiny_config_file):
        path = tiny_config_file()
        out = tmp_path / 'trained'
        main(['train', path, '--out', str(out)])
        return path, str(out / 'params.json')

    def test_eval(self, tmp_path, trained):
        path, params = trained
        out = tmp_path / 'eval'

        assert main(['eval', path, '--params', params, '--out', str(out)]) == 0
        first = json.loads((tmp_path / 'trained' / 'eval.json').read_text())
        second = json.loads((out / 'eval.json').read_text())
        assert second['l2_test'] == first['l2_test']

    def test_audit(self, tmp_path, trained):
        path, params = trained
        out = tmp_path / 'audit'
        code = main(['audit', path, '--params', params, '--points', '20', '--coordinates', '5',
                     '--out', str(out)])
        payload = json.loads((out / 'audit.json').read_text())

        assert payload['data']['convexity']['passed'] is True
        assert code == (0 if payload['data']['passed'] else 1)

    def test_audit_width_mismatch(self, tmp_path, trained, tiny_config_dict, tiny_config_file):
        _, params = trained
        tiny_config_dict['network']['hidden_widths'] = [5]
        path = tiny_config_file(tiny_config_dict, name='wide.json')

        assert main(['audit', path, '--params', params, '--out', str(tmp_path / 'a')]) == 2
        assert not os.path.exists(tmp_path / 'a' / 'audit.json')
