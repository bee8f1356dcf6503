"""
Contract tests for run artifacts and the command-line surface
Tests file names, CSV headers, summary keys, determinism and exit codes
"""

import json
import os
import shutil
import sys
import tempfile

import numpy as np
import pandas as pd
import pytest

ROOT = os.path.join(os.path.dirname(__file__), '../../..')
sys.path.insert(0, os.path.join(ROOT, 'backend', 'src'))
sys.path.insert(0, ROOT)

import fedmerge
from models.experiment_config import ExperimentConfig
from models.federated import ROUNDS_COLUMNS
from models.merge_report import MERGE_COLUMNS
from models.quad_scenario import THEORY_COLUMNS
from services.experiment_service import run_experiment
from services.model_service import load_model

COMM_COLUMNS = ['round', 'client', 'direction', 'strategy', 'params', 'bytes', 'cumulative_bytes']
CURVE_COLUMNS = ['lambda', 'loss', 'acc']
DETERMINISTIC_FILES = ['config.resolved.json', 'rounds.csv', 'comm.csv', 'merge.csv', 'merge_r2.csv',
                       'scan_0.csv', 'grid_0.csv']


def tiny_document(out_dir, **training):
    """A run small enough for the contract suite."""
    train = {'rounds': 4, 'extra_fedit_rounds': [2], 'local_iters': 2, 'batch_size': 5, 'eval_every': 2}
    train.update(training)
    return {
        'seed': 5,
        'pool': {'n_classes': 3, 'd_in': 4, 'samples_per_class': 60},
        'partition': {'mode': 'distinct_tasks', 'task_kind': 'rotation', 'n_clients': 3,
                      'samples_per_client_train': 20, 'samples_per_client_test': 20},
        'model': {'rank': 2, 'pretrain_steps': 10},
        'training': train,
        'fisher': {'batch_size': 10},
        'merge': {'scan_points': 5},
        'out_dir': out_dir,
    }


class TestRunArtifacts:
    """Contract tests for the files a run writes"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()
        self.out = os.path.join(self.temp_dir, 'run')

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def run(self, out=None, **training):
        document = tiny_document(out or self.out, **training)
        return run_experiment(ExperimentConfig.from_dict(document))

    def read(self, name, out=None):
        return pd.read_csv(os.path.join(out or self.out, name))

    def test_csv_headers(self):
        self.run()
        assert list(self.read('rounds.csv').columns) == ROUNDS_COLUMNS
        assert list(self.read('comm.csv').columns) == COMM_COLUMNS
        assert list(self.read('merge.csv').columns) == MERGE_COLUMNS
        assert list(self.read('merge_r2.csv').columns) == MERGE_COLUMNS
        for cid in range(3):
            assert list(self.read(f'scan_{cid}.csv').columns) == CURVE_COLUMNS
            assert list(self.read(f'grid_{cid}.csv').columns) == CURVE_COLUMNS
        assert len(self.read('scan_0.csv')) == 5
        assert len(self.read('grid_0.csv')) == 11

    def test_merge_rows(self):
        self.run()
        merge = self.read('merge.csv')
        assert merge['client'].tolist() == [0, 1, 2]
        assert (merge['lambda_fedit'].between(0, 1)).all()
        assert (merge['c'] <= merge[['a', 'b']].min(axis=1)).all()
        assert (merge['pred_trace'] <= merge[['a', 'b']].min(axis=1) * (1 + 1e-12)).all()

    def test_summary_keys(self):
        result = self.run()
        with open(os.path.join(self.out, 'summary.json'), encoding='utf-8') as f:
            summary = json.load(f)
        assert {'seed', 'n_clients', 'model', 'methods', 'potara', 'merge', 'meta'} <= set(summary)
        assert set(summary['methods']) == {'FedIT', 'FedSA', 'FfaLora', 'LocalOnly', 'Merged',
                                           'GridMerged', 'FisherMerge'}
        for entry in summary['methods'].values():
            assert len(entry['per_client_acc']) == 3
        assert summary['methods']['LocalOnly']['upload_bytes_per_client'] == 0
        assert summary['methods']['FedIT']['upload_bytes_per_client'] == 4 * 2 * (3 + 4) * 4
        assert [p['fedit_round'] for p in summary['potara']] == [2, 4]
        assert summary['potara'][0]['upload_bytes_per_client'] == 4 * 2 * (3 + 4) * 2
        assert result.report.fedit_round == 4

    def test_comm_ledger_totals(self):
        self.run()
        comm = self.read('comm.csv')
        up = comm[(comm['direction'] == 'up')]
        per_strategy = up.groupby('strategy')['bytes'].sum().to_dict()
        assert per_strategy['FedIT'] == 3 * 4 * 4 * 2 * (3 + 4)
        assert per_strategy['FedSA'] + per_strategy['FfaLora'] == per_strategy['FedIT']
        assert 'LocalOnly' not in per_strategy

    def test_rounds_cadence(self):
        self.run()
        rounds = self.read('rounds.csv')
        assert sorted(rounds['round'].unique().tolist()) == [2, 4]
        assert set(rounds['strategy']) == {'FedIT', 'FedSA', 'FfaLora', 'LocalOnly'}

    def test_identical_runs_are_byte_identical(self):
        other = os.path.join(self.temp_dir, 'again')
        self.run()
        self.run(out=other)
        for name in DETERMINISTIC_FILES:
            with open(os.path.join(self.out, name), 'rb') as f1, open(os.path.join(other, name), 'rb') as f2:
                first, second = f1.read(), f2.read()
            if name == 'config.resolved.json':
                first = first.replace(self.out.encode(), b'')
                second = second.replace(other.encode(), b'')
            assert first == second, name
        with open(os.path.join(self.out, 'summary.json')) as f1, open(os.path.join(other, 'summary.json')) as f2:
            s1, s2 = json.load(f1), json.load(f2)
        s1.pop('meta')
        s2.pop('meta')
        assert s1 == s2

    def test_worker_count_does_not_change_results(self):
        threaded = os.path.join(self.temp_dir, 'threaded')
        self.run()
        document = tiny_document(threaded)
        document['workers'] = 3
        run_experiment(ExperimentConfig.from_dict(document))
        for name in ('rounds.csv', 'merge.csv', 'comm.csv'):
            assert self.read(name).equals(self.read(name, threaded)), name

    def test_local_only_run_skips_merge(self):
        result = self.run(strategies=['LocalOnly'])
        assert not os.path.exists(os.path.join(self.out, 'merge.csv'))
        assert set(result.summary['methods']) == {'LocalOnly'}
        assert result.summary['potara'] == []
        assert self.read('comm.csv').empty

    def test_single_client_self_merge(self):
        document = tiny_document(self.out, strategies=['FedIT', 'LocalOnly'])
        document['partition']['n_clients'] = 1
        result = run_experiment(ExperimentConfig.from_dict(document))
        row = result.report.clients[0]
        assert row.weights.a == row.weights.b
        assert row.weights.lambda_fedit == pytest.approx(0.5)
        assert row.acc_fedit == row.acc_local == row.acc_merged

    def test_checkpoints_round_trip(self):
        document = tiny_document(self.out, strategies=['FedIT', 'LocalOnly'])
        document['save_checkpoints'] = True
        result = run_experiment(ExperimentConfig.from_dict(document))
        model = load_model(os.path.join(self.out, 'ckpt_FedIT_r4.pvec'))
        expected = result.runs[list(result.runs)[0]].final_state.global_adapters
        assert all(a.same_values(b) for a, b in zip(model.adapters, expected))
        assert os.path.exists(os.path.join(self.out, 'fisher_c0_FedIT.pvec'))

    def test_partial_sharing_saves_only_client_views(self):
        document = tiny_document(self.out, strategies=['FedIT', 'FedSA', 'LocalOnly'])
        document['save_checkpoints'] = True
        run_experiment(ExperimentConfig.from_dict(document))
        names = os.listdir(self.out)
        assert not [n for n in names if n.startswith('ckpt_FedSA_') and '_c' not in n]
        client_view = load_model(os.path.join(self.out, 'ckpt_FedSA_r4_c0.pvec'))
        assert np.any(client_view.adapters[0].B != 0)


class TestCommandLine:
    """Contract tests for fedmerge.py exit codes"""

    def setup_method(self):
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def write_config(self, document):
        path = os.path.join(self.temp_dir, 'config.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f)
        return path

    def test_run_and_tradeoff(self, capsys):
        out = os.path.join(self.temp_dir, 'run')
        path = self.write_config(tiny_document(out))
        assert fedmerge.main(['run', '--config', path, '--seed', '9']) == fedmerge.EXIT_OK
        with open(os.path.join(out, 'summary.json'), encoding='utf-8') as f:
            assert json.load(f)['seed'] == 9

        table = os.path.join(self.temp_dir, 'tradeoff.csv')
        assert fedmerge.main(['tradeoff', '--inputs', out, '--out', table]) == fedmerge.EXIT_OK
        frame = pd.read_csv(table)
        assert list(frame.columns) == ['method', 'upload_mib', 'mean_acc', 'n_runs']
        assert 'POTARA (2)' in frame['method'].tolist()
        assert 'LocalOnly' in capsys.readouterr().out

    def test_invalid_config_exits_2(self):
        path = self.write_config({'training': {'rounds': 0}})
        assert fedmerge.main(['run', '--config', path]) == fedmerge.EXIT_CONFIG

    def test_malformed_json_exits_2(self):
        path = os.path.join(self.temp_dir, 'broken.json')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('{"seed": ')
        assert fedmerge.main(['run', '--config', path]) == fedmerge.EXIT_CONFIG

    def test_missing_summaries_exit_4(self):
        pattern = os.path.join(self.temp_dir, 'nothing', '*.json')
        assert fedmerge.main(['tradeoff', '--inputs', pattern]) == fedmerge.EXIT_IO

    def test_theory_writes_csv(self):
        out = os.path.join(self.temp_dir, 'theory')
        code = fedmerge.main(['theory', '--trials', '1', '--samples', '10000', '--dim', '3',
                              '--cs-trials', '20', '--out', out])
        assert code == fedmerge.EXIT_OK
        assert list(pd.read_csv(os.path.join(out, 'theory.csv')).columns) == THEORY_COLUMNS

    @pytest.mark.parametrize("argv", [
        ['theory', '--trials', '0'],
        ['theory', '--samples', '5000'],
        ['theory', '--dim', '0'],
        ['theory', '--cs-trials', '-1'],
        ['--workers', '0', 'theory'],
    ], ids=["no_trials", "few_samples", "zero_dim", "negative_cs_trials", "zero_workers"])
    def test_bad_theory_arguments_exit_2(self, argv):
        out = os.path.join(self.temp_dir, 'theory')
        assert fedmerge.main(argv + ['--out', out]) == fedmerge.EXIT_CONFIG
        assert not os.path.exists(out)

    def test_non_integer_worker_env_exits_2(self, mocker):
        mocker.patch.dict(os.environ, {'FEDMERGE_WORKERS': 'abc'})
        out = os.path.join(self.temp_dir, 'theory')
        assert fedmerge.main(['theory', '--trials', '1', '--out', out]) == fedmerge.EXIT_CONFIG

    def test_unwritable_output_exits_4(self, mocker):
        path = self.write_config(tiny_document(os.path.join(self.temp_dir, 'run')))
        mocker.patch('services.experiment_service.os.makedirs', side_effect=PermissionError('read-only'))
        assert fedmerge.main(['run', '--config', path]) == fedmerge.EXIT_IO

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            fedmerge.main(['--version'])
        assert info.value.code == 0
        assert fedmerge.__version__ in capsys.readouterr().out
