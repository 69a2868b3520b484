import json
import os

import plac
import pytest

from fedsim.cli import (EXIT_OK, EXIT_USAGE, NO_CONVERGENT_CELL, FedSim, cmd_compare, cmd_grid, cmd_run,
                        grid_cell, resolve_threads, select_cell)
from fedsim.config import build_dataset, build_model, load_config, parse_config
from fedsim.engine import AlgoConfig
from fedsim.errors import ConfigError
from fedsim.metrics import read_records
from fedsim.model_zoo import MCLRModel, QuadraticModel

CONFIGS = os.path.join(os.path.dirname(__file__), '..', 'configs')

QUADRATIC_GRID = '''
schema_version = 1
experiment_id = "blowup"

[model]
kind = "quadratic"
dimension = 4
mu = 1.0
L = 10.0

[partition]
num_clients = 2

[grid]
alpha_values = [10.0]
eta_values = [1.0]

[[algorithms]]
algorithm = "fedavg"
batch_size = "full"
rounds = 5
'''

SMALL_GRID = '''
schema_version = 1
experiment_id = "small"

[dataset]
kind = "synthetic"
num_classes = 3
num_features = 4
num_samples = 300

[partition]
num_clients = 3
labels_per_client = 1

[grid]
alpha_values = [0.05, 0.1]
eta_values = [0.5, 1.0]

[[algorithms]]
algorithm = "fedavg"
rounds = 3

[[algorithms]]
algorithm = "fedsso"
rounds = 3
'''


def _write(tmp_path, text, name='config.toml'):
    path = tmp_path / name
    path.write_text(text)

    return str(path)


def test_shipped_configs_are_valid():
    for name in ('minimal', 'comparison', 'grid', 'quadratic_theory'):
        cfg = load_config(os.path.join(CONFIGS, name + '.toml'))

        assert cfg.experiment_id == name
        assert cfg.algorithms


def test_seed_reaches_every_algorithm():
    cfg = parse_config({'schema_version': 1, 'seed': 7, 'algorithms': [{'algorithm': 'fedavg'},
                                                                       {'algorithm': 'fedsso', 'seed': 3}]})

    assert [algo.seed for algo in cfg.algorithms] == [7, 3]
    assert [algo.seed for algo in cfg.with_seed(11).algorithms] == [11, 11]


def test_invalid_fields_are_named():
    with pytest.raises(ConfigError) as e:
        parse_config({'schema_version': 1, 'algorithms': [{'algorithm': 'fedfoo'}]})

    assert e.value.field == 'algorithms.0.algorithm'

    with pytest.raises(ConfigError) as e:
        parse_config({'schema_version': 2, 'algorithms': [{'algorithm': 'fedavg'}]})

    assert e.value.field == 'schema_version'


def test_unknown_top_level_keys_are_ignored():
    with pytest.warns(UserWarning, match='colour'):
        cfg = parse_config({'schema_version': 1, 'colour': 'blue', 'algorithms': [{'algorithm': 'fedavg'}]})

    assert cfg.algorithms[0].algorithm == 'fedavg'


def test_toml_errors_carry_the_line(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(_write(tmp_path, 'schema_version = 1\nseed = = 3\n'))

    assert e.value.line == 2

    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.toml'))


def test_builders():
    cfg = load_config(os.path.join(CONFIGS, 'minimal.toml'))
    data = build_dataset(cfg)
    model = build_model(cfg, data)

    assert isinstance(model, MCLRModel)
    assert model.num_params == 10 * 5 + 5
    assert data.num_clients == 10

    quadratic = load_config(os.path.join(CONFIGS, 'quadratic_theory.toml'))

    assert isinstance(build_model(quadratic, build_dataset(quadratic)), QuadraticModel)
    assert quadratic.algorithms[0].batch_size is None


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv('FEDSIM_THREADS', '3')

    assert resolve_threads() == 3
    assert resolve_threads(2) == 2

    monkeypatch.setenv('FEDSIM_THREADS', 'many')

    with pytest.raises(ConfigError):
        resolve_threads()


def test_run_writes_records_and_summary(tmp_path, capsys):
    code = cmd_run(os.path.join(CONFIGS, 'minimal.toml'), out=str(tmp_path))
    records = read_records(str(tmp_path / 'minimal_fedavg.csv'))

    assert code == EXIT_OK
    assert [record.round for record in records] == list(range(1, 11))
    assert (tmp_path / 'minimal_summary.csv').exists()
    assert 'Summary of minimal' in capsys.readouterr().out


def test_run_through_the_command_line(tmp_path):
    code = plac.call(FedSim(), ['run', '-c', os.path.join(CONFIGS, 'minimal.toml'), '-o', str(tmp_path), '-s', '5'])

    assert code == EXIT_OK
    assert len((tmp_path / 'minimal_fedavg.csv').read_text().splitlines()) == 11


def test_run_rejects_invalid_configs(tmp_path, capsys):
    path = _write(tmp_path, 'schema_version = 1\n[[algorithms]]\nalgorithm = "fedfoo"\n')

    assert cmd_run(path, out=str(tmp_path)) == EXIT_USAGE
    assert 'algorithms.0.algorithm' in capsys.readouterr().err


def test_grid_searches_every_cell(tmp_path):
    assert cmd_grid(_write(tmp_path, SMALL_GRID), out=str(tmp_path)) == EXIT_OK

    best = json.loads((tmp_path / 'best.json').read_text())
    cells = [name for name in os.listdir(str(tmp_path)) if name.startswith('small_')]

    assert len(cells) == 2 + 4
    assert sorted(best) == ['fedavg', 'fedsso']
    assert best['fedavg']['alpha'] in (0.05, 0.1)
    assert best['fedsso']['eta'] in (0.5, 1.0)


def test_grid_without_a_convergent_cell(tmp_path):
    assert cmd_grid(_write(tmp_path, QUADRATIC_GRID), out=str(tmp_path)) == EXIT_OK

    assert json.loads((tmp_path / 'best.json').read_text()) == {'fedavg': NO_CONVERGENT_CELL}


def test_grid_needs_a_grid_section(tmp_path):
    assert cmd_grid(os.path.join(CONFIGS, 'minimal.toml'), out=str(tmp_path)) == EXIT_USAGE


def test_select_cell_breaks_ties_by_step_size():
    cells = [{'alpha': 0.1, 'eta': 1.0, 'score': 0.5}, {'alpha': 0.01, 'eta': 1.0, 'score': 0.5},
             {'alpha': 0.01, 'eta': 0.3, 'score': 0.5}, {'alpha': 0.001, 'eta': 0.3, 'score': None}]

    assert select_cell(cells) == {'alpha': 0.01, 'eta': 0.3, 'score': 0.5}
    assert select_cell([{'alpha': 0.1, 'eta': 1.0, 'score': None}]) is None


def test_grid_cells_are_validated():
    algo = AlgoConfig(algorithm='fedsgd', alpha=0.1, eta=0.5, batch_size='full', label='sgd')
    cell = grid_cell(algo, 0.3, 0.7)

    assert (cell.alpha, cell.eta, cell.tau, cell.batch_size, cell.label) == (0.3, 0.7, 1, None, 'sgd')

    for alpha, eta in [(-0.1, 1.0), (0.1, 0.0)]:
        with pytest.raises(ValueError):
            grid_cell(algo, alpha, eta)


def test_compare(tmp_path, capsys):
    cmd_run(os.path.join(CONFIGS, 'minimal.toml'), out=str(tmp_path))
    capsys.readouterr()

    assert cmd_compare([str(tmp_path / 'minimal_fedavg.csv')], thresholds=[0.3]) == EXIT_OK
    assert 'minimal_fedavg' in capsys.readouterr().out
    assert cmd_compare([str(tmp_path / 'absent.csv')]) == EXIT_USAGE
    assert cmd_compare([]) == EXIT_USAGE


def test_grid_selection_is_reproducible(tmp_path):
    config = _write(tmp_path, SMALL_GRID)
    chosen = []

    for name in ('first', 'second'):
        out = tmp_path / name
        cmd_grid(config, out=str(out))
        best = json.loads((out / 'best.json').read_text())
        chosen.append({algo: (cell['alpha'], cell['eta'], cell['score']) for algo, cell in best.items()})

    assert chosen[0] == chosen[1]
