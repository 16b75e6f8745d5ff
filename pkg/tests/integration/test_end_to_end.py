# tests/integration/test_end_to_end.py
import json

import pandas as pd
import pytest
import yaml

from src.main import ABLATIONS, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

pytestmark = pytest.mark.integration


class TestEndToEnd:
    """命令行端到端测试"""

    def test_run_writes_artifacts(self, config_file, temp_dir, capsys):
        out = temp_dir / 'run'
        assert main(['run', '-c', str(config_file), '-o', str(out)]) == EXIT_OK

        for name in ('epochs.csv', 'summary.json', 'config.yaml', 'protogroup.log'):
            assert (out / name).exists(), name
        assert (out / 'checkpoint' / 'checkpoint.json').exists()

        epochs = pd.read_csv(out / 'epochs.csv')
        assert epochs['epoch'].tolist() == [1, 2]

        with open(out / 'summary.json', 'r', encoding='utf-8') as f:
            summary = json.load(f)
        assert summary['seed'] == 3
        assert summary['estimated_class_count'] == summary['group_counts'][-1]
        assert summary['group_counts'][0] == 8
        assert 'all_acc=' in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, config_file, temp_dir):
        first, second = temp_dir / 'a', temp_dir / 'b'
        assert main(['run', '-c', str(config_file), '-o', str(first)]) == EXIT_OK
        assert main(['run', '-c', str(config_file), '-o', str(second)]) == EXIT_OK

        assert (first / 'summary.json').read_bytes() == (second / 'summary.json').read_bytes()
        assert (first / 'epochs.csv').read_bytes() == (second / 'epochs.csv').read_bytes()

    def test_saved_config_reproduces_run(self, config_file, temp_dir):
        first, second = temp_dir / 'a', temp_dir / 'b'
        assert main(['run', '-c', str(config_file), '-o', str(first)]) == EXIT_OK
        assert main(['run', '-c', str(first / 'config.yaml'), '-o', str(second)]) == EXIT_OK

        assert (first / 'summary.json').read_bytes() == (second / 'summary.json').read_bytes()

    def test_seed_changes_run(self, config_file, temp_dir):
        assert main(['run', '-c', str(config_file), '-o', str(temp_dir / 'a')]) == EXIT_OK
        assert main(['run', '-c', str(config_file), '-o', str(temp_dir / 'b'), '--seed', '4']) == EXIT_OK

        with open(temp_dir / 'b' / 'config.yaml', 'r', encoding='utf-8') as f:
            assert yaml.safe_load(f)['seed'] == 4

    def test_gen_then_run_from_csv(self, config_file, temp_dir):
        data = temp_dir / 'data' / 'blobs.csv'
        assert main(['gen', str(data), '-c', str(config_file), '--split']) == EXIT_OK
        masks = data.with_name('blobs.masks.csv')
        assert masks.exists()
        assert len(data.read_text(encoding='utf-8').splitlines()) == 4 * 20 + 1

        code = main(['run', '-c', str(config_file), '-o', str(temp_dir / 'csv_run'),
                     '--set', 'data.source=csv', '--set', f'data.csv_path={data}',
                     '--set', f'data.mask_path={masks}'])
        assert code == EXIT_OK

    def test_gen_options(self, temp_dir):
        data = temp_dir / 'small.csv'
        code = main(['gen', str(data), '--num-classes', '3', '--per-class', '5', '--dim', '4', '--no-header'])

        assert code == EXIT_OK
        lines = data.read_text(encoding='utf-8').splitlines()
        assert len(lines) == 15
        assert len(lines[0].split(',')) == 5

    def test_eval_checkpoint(self, config_file, temp_dir):
        run_dir = temp_dir / 'run'
        data = temp_dir / 'blobs.csv'
        assert main(['run', '-c', str(config_file), '-o', str(run_dir)]) == EXIT_OK
        assert main(['gen', str(data), '-c', str(config_file)]) == EXIT_OK

        code = main(['eval', '-c', str(config_file), '-o', str(temp_dir / 'eval'),
                     '--checkpoint', str(run_dir / 'checkpoint'), '--data', str(data)])
        assert code == EXIT_OK

        with open(temp_dir / 'eval' / 'eval.json', 'r', encoding='utf-8') as f:
            report = json.load(f)
        assert report['known_count'] + report['novel_count'] == 80
        assert 0.0 <= report['all_acc'] <= 1.0

    def test_sweep(self, config_file, temp_dir):
        out = temp_dir / 'out'
        code = main(['sweep', '-c', str(config_file), '-o', str(out), '--param', 'lambda1', '--values', '0', '1'])

        assert code == EXIT_OK
        table = pd.read_csv(out / 'sweep_lambda1' / 'aggregate.csv')
        assert table['lambda1'].tolist() == [0, 1]
        assert (out / 'sweep_lambda1' / 'lambda1=0' / 'summary.json').exists()
        assert (out / 'sweep_lambda1' / 'lambda1=1' / 'summary.json').exists()

    def test_sweep_repeats(self, config_file, temp_dir):
        out = temp_dir / 'out'
        code = main(['sweep', '-c', str(config_file), '-o', str(out), '--param', 'kappa',
                     '--values', '2', '--repeats', '2'])

        assert code == EXIT_OK
        table = pd.read_csv(out / 'sweep_kappa' / 'aggregate.csv')
        assert table['runs'].tolist() == [2]
        assert {'all_acc_mean', 'all_acc_std'} <= set(table.columns)
        assert (out / 'sweep_kappa' / 'kappa=2' / 'seed_4' / 'summary.json').exists()

    def test_ablate(self, config_file, temp_dir):
        out = temp_dir / 'out'
        assert main(['ablate', '-c', str(config_file), '-o', str(out)]) == EXIT_OK

        table = pd.read_csv(out / 'ablation' / 'aggregate.csv')
        assert table['variant'].tolist() == list(ABLATIONS)
        with open(out / 'ablation' / 'without_reg' / 'config.yaml', 'r', encoding='utf-8') as f:
            assert yaml.safe_load(f)['train']['lambda1'] == 0.0


class TestExitCodes:
    """退出码测试"""

    @pytest.mark.parametrize("extra", [
        ['--set', 'train.unknown=1'],
        ['--set', 'train.temperature=-1'],
        ['--set', 'no_equals_sign'],
        ['--set', 'train.kappa=abc'],
        ['--set', 'train.num_prototypes=[3]'],
    ])
    def test_bad_overrides(self, config_file, temp_dir, extra):
        assert main(['run', '-c', str(config_file), '-o', str(temp_dir / 'x'), *extra]) == EXIT_USAGE

    def test_missing_config(self, temp_dir):
        assert main(['run', '-c', str(temp_dir / 'missing.yaml')]) == EXIT_USAGE

    def test_sweep_bad_param(self, config_file, temp_dir):
        code = main(['sweep', '-c', str(config_file), '-o', str(temp_dir), '--param', 'activation',
                     '--values', '1'])
        assert code == EXIT_USAGE

    def test_sweep_empty_values(self, config_file, temp_dir):
        assert main(['sweep', '-c', str(config_file), '-o', str(temp_dir), '--param', 'lambda1']) == EXIT_USAGE

    def test_missing_command(self):
        with pytest.raises(SystemExit) as exc_info:
            main([])
        assert exc_info.value.code == EXIT_USAGE

    def test_missing_csv(self, config_file, temp_dir):
        code = main(['run', '-c', str(config_file), '-o', str(temp_dir / 'x'),
                     '--set', 'data.source=csv', '--set', f'data.csv_path={temp_dir / "nope.csv"}'])
        assert code == EXIT_RUNTIME

    def test_malformed_csv(self, config_file, temp_dir, capsys):
        data = temp_dir / 'bad.csv'
        data.write_text("label,f0\n0,1.0\n1,oops\n", encoding='utf-8')

        code = main(['run', '-c', str(config_file), '-o', str(temp_dir / 'x'),
                     '--set', 'data.source=csv', '--set', f'data.csv_path={data}'])

        assert code == EXIT_RUNTIME
        assert '第 3 行' in capsys.readouterr().err
