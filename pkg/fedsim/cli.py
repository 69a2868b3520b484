"""The `fedsim` command line: run experiments, grid-search step sizes, verify the optimiser's guarantees and compare
record files.

Exit codes: 0 on success, 1 when a verification check fails, 2 on usage or configuration errors.
"""
import json
import logging
import math
import os
import sys
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import pandas as pd
import plac

from fedsim.base import Algorithm
from fedsim.config import build_dataset, build_model, load_config
from fedsim.engine import AlgoConfig, run_experiment
from fedsim.errors import ConfigError, FedSimError
from fedsim.metrics import RoundRecord, emit_records, memory_table, read_records, rounds_to_accuracy, summary_table
from fedsim.verifier import run_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

NO_CONVERGENT_CELL = 'no-convergent-cell'


def configure_logging(verbose: bool = False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def resolve_threads(threads: Optional[int] = None) -> int:
    """The worker thread count: the command line flag, else FEDSIM_THREADS, else 1."""
    if threads is None:
        value = os.environ.get('FEDSIM_THREADS', '1')

        try:
            threads = int(value)
        except ValueError:
            raise ConfigError('FEDSIM_THREADS must be an integer, got \'%s\'' % value)

    if threads < 1:
        raise ConfigError('the thread count must be at least 1, got %d' % threads)

    return threads


def record_path(out_dir: str, experiment_id: str, name: str, format: str = 'csv') -> str:
    return os.path.join(out_dir, '%s_%s.%s' % (experiment_id, name, format))


def _prepare(config_path: str, out: Optional[str], seed: Optional[int]):
    cfg = load_config(config_path)

    if seed is not None:
        cfg = cfg.with_seed(seed)

    out_dir = out or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)

    data = build_dataset(cfg)
    model = build_model(cfg, data)

    return cfg, data, model, out_dir


def _fail(message: str) -> int:
    print(message, file=sys.stderr)

    return EXIT_USAGE


def print_summary(title: str, summary: pd.DataFrame):
    sep = '=' * 80

    print(sep)
    print(title)
    print(sep)

    with pd.option_context('display.max_columns', None, 'display.width', 200):
        print(summary)

    print(sep)


def cmd_run(config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
            threads: Optional[int] = None) -> int:
    """Run every algorithm of an experiment, write one record file per algorithm and print a summary.

    :param config_path: The experiment config.
    :param out: The output directory, overriding the config's.
    :param seed: A seed overriding every seed in the config.
    :param threads: The number of worker threads per run.
    :return: The exit code.
    """
    try:
        threads = resolve_threads(threads)
        cfg, data, model, out_dir = _prepare(config_path, out, seed)
    except (FedSimError, OSError) as e:
        return _fail('Invalid configuration %s: %s' % (config_path, e))

    runs = {}
    start = datetime.now()

    for algo in cfg.algorithms:
        try:
            records = run_experiment(algo, model, data, threads=threads)
            path = record_path(out_dir, cfg.experiment_id, algo.name, cfg.report.format)
            emit_records(records, path, cfg.report.format)
        except FedSimError as e:
            return _fail('Run %s failed: %s' % (algo.name, e))

        logger.info('Wrote %d records to %s.', len(records), path)
        runs[algo.name] = records

    summary = summary_table(runs, cfg.report.thresholds, cfg.report.reference)
    summary.to_csv(os.path.join(out_dir, '%s_summary.csv' % cfg.experiment_id))

    print('Experiment finished in: %s' % (datetime.now() - start))
    print_summary('Summary of %s (d=%d, N=%d)' % (cfg.experiment_id, model.num_params, data.num_clients), summary)
    print_summary('Communication and memory per round', memory_table(model.num_params,
                                                                      cfg.algorithms[0].bytes_per_scalar))

    return EXIT_OK


def _cell_score(records: Sequence[RoundRecord], cfg: AlgoConfig, selection: str,
                target_accuracy: Optional[float]) -> Optional[float]:
    """Score a grid cell, lower is better. Cells that diverged (or never reach the target) score None."""
    if len(records) < cfg.rounds or not records or not math.isfinite(records[-1].train_loss):
        return None

    if selection == 'rounds_to_accuracy':
        rounds = rounds_to_accuracy(records, target_accuracy)

        return None if rounds is None else float(rounds)

    return records[-1].train_loss


def grid_cell(algo: AlgoConfig, alpha: float, eta: float) -> AlgoConfig:
    """The run of one grid cell, validated like any configured run."""
    return AlgoConfig.model_validate({**algo.model_dump(), 'alpha': alpha, 'eta': eta})


def select_cell(cells: List[dict]) -> Optional[dict]:
    """Pick the cell with the lowest score, breaking ties towards the smaller alpha, then the smaller eta."""
    scored = [cell for cell in cells if cell['score'] is not None]

    if not scored:
        return None

    return min(scored, key=lambda cell: (cell['score'], cell['alpha'], cell['eta']))


def cmd_grid(config_path: str, out: Optional[str] = None, seed: Optional[int] = None,
             threads: Optional[int] = None) -> int:
    """Grid-search (alpha, eta) for every algorithm of an experiment and record the best cell in best.json.

    Only FedSSO searches over eta; the other algorithms use their configured eta.

    :return: The exit code.
    """
    try:
        threads = resolve_threads(threads)
        cfg, data, model, out_dir = _prepare(config_path, out, seed)

        if cfg.grid is None:
            raise ConfigError('the config has no [grid] section', field='grid')
    except (FedSimError, OSError) as e:
        return _fail('Invalid configuration %s: %s' % (config_path, e))

    grid = cfg.grid
    best = {}

    for algo in cfg.algorithms:
        etas = grid.eta_values if algo.algorithm == Algorithm.FEDSSO else [algo.eta]
        cells = []

        for alpha in grid.alpha_values:
            for eta in etas:
                cell_cfg = grid_cell(algo, alpha, eta)
                name = '%s_a%g_e%g' % (algo.name, alpha, eta)

                try:
                    records = run_experiment(cell_cfg, model, data, threads=threads)
                except FedSimError as e:
                    logger.warning('Grid cell %s failed: %s', name, e)
                    records = []

                path = record_path(out_dir, cfg.experiment_id, name, cfg.report.format)
                emit_records(records, path, cfg.report.format)

                score = _cell_score(records, cell_cfg, grid.selection, grid.target_accuracy)
                logger.info('Grid cell %s: score %s.', name, score)
                cells.append({'alpha': alpha, 'eta': eta, 'score': score, 'records': path,
                              'final_loss': records[-1].train_loss if records else None})

        chosen = select_cell(cells)
        best[algo.name] = NO_CONVERGENT_CELL if chosen is None else chosen

    with open(os.path.join(out_dir, 'best.json'), 'w') as f:
        json.dump(best, f, indent=2, sort_keys=True)

    summary = pd.DataFrame.from_dict({name: cell if isinstance(cell, dict) else {'status': cell}
                                      for name, cell in best.items()}, orient='index')
    print_summary('Best grid cells of %s (by %s)' % (cfg.experiment_id, grid.selection), summary)

    return EXIT_OK


def cmd_verify(report: Optional[str] = None, out: Optional[str] = None) -> int:
    """Run the verification suite.

    :return: 0 if every check passes, 1 otherwise.
    """
    if report is None:
        out_dir = out or '.'
        os.makedirs(out_dir, exist_ok=True)
        report = os.path.join(out_dir, 'verify.jsonl')

    results = run_suite(report)
    table = pd.DataFrame([{'check': r.name, 'status': 'PASS' if r.passed else 'FAIL', 'measured': r.measured,
                           'threshold': r.threshold, 'detail': r.detail} for r in results]).set_index('check')
    print_summary('Verification report (%s)' % report, table)

    failed = [r.name for r in results if not r.passed]

    if failed:
        print('Failed checks: %s' % ', '.join(failed), file=sys.stderr)

        return EXIT_CHECK_FAILED

    return EXIT_OK


def cmd_compare(files: Sequence[str], thresholds: Sequence[float] = (0.5, 0.6, 0.7, 0.8),
                reference: Optional[float] = None) -> int:
    """Print the comparison table of previously written record files, labelled by file name.

    :return: The exit code.
    """
    if not files:
        return _fail('No record files given.')

    runs: Dict[str, List[RoundRecord]] = {}

    try:
        for path in files:
            runs[os.path.splitext(os.path.basename(path))[0]] = read_records(path)
    except FedSimError as e:
        return _fail(str(e))

    print_summary('Comparison of %d runs' % len(runs), summary_table(runs, list(thresholds), reference))

    return EXIT_OK


def _thresholds(value: Optional[str]) -> List[float]:
    if not value:
        return [0.5, 0.6, 0.7, 0.8]

    return [float(token) for token in value.split(',')]


class FedSim:
    """A federated optimisation laboratory."""
    commands = 'run', 'grid', 'verify', 'compare'

    @plac.annotations(
        config=plac.Annotation('The experiment config (TOML).', kind='option', abbrev='c', type=str),
        out=plac.Annotation('The output directory, overriding the config.', kind='option', abbrev='o', type=str),
        seed=plac.Annotation('A seed overriding every seed in the config.', kind='option', abbrev='s', type=int),
        threads=plac.Annotation('Worker threads per run (default: FEDSIM_THREADS or 1).', kind='option', abbrev='t',
                                type=int),
        verbose=plac.Annotation('Flag indicating to log debug output.', kind='flag', abbrev='v')
    )
    def run(self, config=None, out=None, seed=None, threads=None, verbose=False):
        """Run every algorithm of an experiment."""
        configure_logging(verbose)

        if config is None:
            return _fail('run needs --config.')

        return cmd_run(config, out, seed, threads)

    @plac.annotations(
        config=plac.Annotation('The experiment config (TOML) with a [grid] section.', kind='option', abbrev='c',
                               type=str),
        out=plac.Annotation('The output directory, overriding the config.', kind='option', abbrev='o', type=str),
        seed=plac.Annotation('A seed overriding every seed in the config.', kind='option', abbrev='s', type=int),
        threads=plac.Annotation('Worker threads per run (default: FEDSIM_THREADS or 1).', kind='option', abbrev='t',
                                type=int),
        verbose=plac.Annotation('Flag indicating to log debug output.', kind='flag', abbrev='v')
    )
    def grid(self, config=None, out=None, seed=None, threads=None, verbose=False):
        """Grid-search step sizes."""
        configure_logging(verbose)

        if config is None:
            return _fail('grid needs --config.')

        return cmd_grid(config, out, seed, threads)

    @plac.annotations(
        report=plac.Annotation('Where to write the JSONL report.', kind='option', abbrev='r', type=str),
        out=plac.Annotation('The directory of the default report (verify.jsonl).', kind='option', abbrev='o',
                            type=str),
        verbose=plac.Annotation('Flag indicating to log debug output.', kind='flag', abbrev='v')
    )
    def verify(self, report=None, out=None, verbose=False):
        """Run the verification suite."""
        configure_logging(verbose)

        return cmd_verify(report, out)

    @plac.annotations(
        files=plac.Annotation('Record files written by run or grid.', kind='positional', type=str),
        thresholds=plac.Annotation('Comma separated accuracy thresholds.', kind='option', abbrev='a', type=str),
        reference=plac.Annotation('The threshold the total bytes are counted to.', kind='option', abbrev='r',
                                  type=float)
    )
    def compare(self, thresholds=None, reference=None, *files):
        """Compare record files."""
        configure_logging()

        return cmd_compare(files, _thresholds(thresholds), reference)


def main():
    return plac.call(FedSim())
