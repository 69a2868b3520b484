"""End-to-end runs of the designated experiments. Deselect the slow ones with `pytest -m "not slow"`."""
import dataclasses
import math

import numpy as np
import pytest

from fedsim.data import build_federated_dataset, synth_blobs
from fedsim.engine import AlgoConfig, run_experiment
from fedsim.metrics import emit_records, rounds_to_loss, total_bytes
from fedsim.model_zoo import MCLRModel, MLPModel
from fedsim.verifier import (check_accounting, check_degenerate_equivalence, check_hessian_bounds,
                             check_protocol_shape, check_rate, check_secant, hessian_bound_violations)

ALPHAS = [0.03, 0.1, 0.3]
ETAS = [0.3, 0.7, 1.0]


def _mclr_federation():
    samples = synth_blobs(0, 5, 10, 5000, spread=1.0)
    data = build_federated_dataset(samples, 10, 2, 0.75, seed=0, num_classes=5)

    return MCLRModel(5, 10), data


def _best(runs):
    """The complete run with the lowest final loss, ties towards the smaller step sizes."""
    return min((run for run in runs if len(run[1]) == 200), key=lambda run: (run[1][-1].train_loss, run[0]))


def test_accounting_reproduction():
    assert check_accounting().passed


@pytest.mark.slow
def test_protocol_shape():
    result = check_protocol_shape(rounds=50, num_clients=10)

    assert result.passed, result.detail


@pytest.mark.slow
def test_secant_and_degenerate_equivalence():
    assert check_secant(trials=1000, d=30).passed
    assert check_degenerate_equivalence().passed


@pytest.mark.slow
def test_hessian_bounds_hold_in_every_round():
    result = check_hessian_bounds()

    assert result.passed, result.detail


@pytest.mark.slow
def test_theory_schedule_rate_is_bounded():
    result = check_rate()

    assert result.passed, result.detail


@pytest.mark.slow
def test_fedsso_needs_fewer_rounds_and_bytes():
    model, data = _mclr_federation()
    common = dict(tau=5, batch_size=None, rounds=200)
    violations = []

    def observe(server, record):
        violations.extend(hessian_bound_violations(server.extra['bfgs']))

    fedavg = _best([((alpha,), run_experiment(AlgoConfig(algorithm='fedavg', alpha=alpha, **common), model, data))
                    for alpha in ALPHAS])
    scaffold = _best([((alpha,), run_experiment(AlgoConfig(algorithm='scaffold', alpha=alpha, **common), model,
                                                data)) for alpha in ALPHAS])
    target = fedavg[1][-1].train_loss

    fedsso_runs = []

    for alpha in ALPHAS:
        for eta in ETAS:
            cfg = AlgoConfig(algorithm='fedsso', alpha=alpha, eta=eta, **common)
            records = run_experiment(cfg, model, data, observer=observe)
            rounds = rounds_to_loss(records, target)
            fedsso_runs.append((math.inf if rounds is None else rounds, alpha, eta, records))

    rounds, _, _, records = min(fedsso_runs, key=lambda run: run[:3])

    assert violations == []
    assert rounds <= 100

    fedsso_bytes = total_bytes(records, rounds)
    scaffold_rounds = rounds_to_loss(scaffold[1], target)
    scaffold_bytes = math.inf if scaffold_rounds is None else total_bytes(scaffold[1], scaffold_rounds)

    assert fedsso_bytes < total_bytes(fedavg[1], 200)
    assert fedsso_bytes < scaffold_bytes


def _first_round_below(losses, target, window=10):
    """The first round whose trailing mean loss over `window` rounds is at most `target`."""
    for k in range(window, len(losses) + 1):
        if np.mean(losses[k - window:k]) <= target:
            return k

    return None


@pytest.mark.slow
def test_fedsso_on_mini_batches_reaches_the_fedavg_loss_sooner():
    model, data = _mclr_federation()
    common = dict(tau=5, batch_size=100, rounds=200)
    violations = []

    def observe(server, record):
        violations.extend(hessian_bound_violations(server.extra['bfgs']))

    assert np.median([len(shard) for shard in data.train_shards]) > common['batch_size']

    fedavg = _best([((alpha,), run_experiment(AlgoConfig(algorithm='fedavg', alpha=alpha, **common), model, data))
                    for alpha in ALPHAS])
    target = np.mean([record.train_loss for record in fedavg[1][-20:]])
    reached = []

    for alpha in ALPHAS:
        for eta in ETAS:
            cfg = AlgoConfig(algorithm='fedsso', alpha=alpha, eta=eta, **common)
            records = run_experiment(cfg, model, data, observer=observe)
            rounds = _first_round_below([record.train_loss for record in records], target)

            if len(records) == 200 and rounds is not None:
                reached.append(rounds)

    assert violations == []
    assert reached
    assert min(reached) < 200


@pytest.mark.slow
def test_nonconvex_schedule_is_stable():
    samples = synth_blobs(1, 3, 4, 1000, spread=0.7)
    data = build_federated_dataset(samples, 5, 2, 0.75, seed=1, num_classes=3)
    model = MLPModel(4, 8, 3)
    cfg = AlgoConfig(algorithm='fedsso', schedule='theory_nonconvex', tau=5, batch_size=None, rounds=300,
                     smoothness_L=1.0)
    records = run_experiment(cfg, model, data)

    assert len(records) == 300
    assert min(record.global_grad_norm for record in records) <= 0.5 * records[0].global_grad_norm


@pytest.mark.slow
def test_record_files_are_reproducible(tmp_path):
    model, data = _mclr_federation()
    cfg = AlgoConfig(algorithm='fedsso', alpha=0.1, eta=0.7, tau=5, batch_size=50, rounds=30, seed=9)
    contents = []

    for name in ('first', 'second'):
        path = tmp_path / (name + '.csv')
        records = [dataclasses.replace(record, wall_ms=0.0) for record in run_experiment(cfg, model, data)]
        emit_records(records, str(path))
        contents.append(path.read_text())

    assert contents[0] == contents[1]
    assert len(contents[0].splitlines()) == 31
    assert np.isfinite(float(contents[0].splitlines()[-1].split(',')[1]))
