import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fedsim.data import SampleSet
from fedsim.errors import InconsistentOracle, InvalidMatrix
from fedsim.metrics import RoundRecord
from fedsim.model_zoo import grad, make_quadratic
from fedsim.verifier import (CHECKS, centralized_bfgs_oracle, check_accounting, check_degenerate_equivalence,
                             check_gradients, check_lighthouse, degenerate_equivalence_gap, lighthouse_oracle_1d,
                             lighthouse_oracle_separable, rate_check, run_suite, spd_spectrum)


def _losses(values):
    return [RoundRecord(round=k, train_loss=v, test_accuracy=float('nan'), global_grad_norm=0.0)
            for k, v in enumerate(values, start=1)]


def test_lighthouse_with_one_local_step_is_the_start():
    derivs = [lambda x: x - 1.0, lambda x: 3 * (x + 2.0)]

    assert lighthouse_oracle_1d(derivs, 0.7, 0.05, 1) == 0.7


def test_lighthouse_of_a_two_client_quadratic():
    derivs = [lambda x: x - 1.0, lambda x: x + 1.0]
    x_hat = lighthouse_oracle_1d(derivs, 3.0, 0.1, 3)

    # Both clients contract towards their centre by 0.9 per step, so the mean local gradient is 2.71.
    assert x_hat == pytest.approx(2.71, abs=1e-9)
    assert 3.0 * 0.9 ** 3 - 1 <= x_hat <= 3.0


def test_with_constant_gradients_every_point_is_a_lighthouse():
    assert lighthouse_oracle_1d([lambda x: 1.0, lambda x: -3.0], 0.5, 0.1, 3) == 0.5


def test_separable_lighthouse_solves_each_coordinate():
    derivs = [[lambda x: x - 1.0, lambda x: 2 * x], [lambda x: x + 1.0, lambda x: 2 * x]]
    x_hat = lighthouse_oracle_separable(derivs, np.array([3.0, 1.0]), 0.1, 3)

    assert x_hat[0] == pytest.approx(2.71, abs=1e-9)
    # 2x contracts by 0.8 per step: the mean of 2, 1.6 and 1.28 is 2·x̂.
    assert x_hat[1] == pytest.approx((1 + 0.8 + 0.64) / 3, abs=1e-9)


def test_spd_spectrum():
    assert_allclose(spd_spectrum(np.eye(5)), (1.0, 1.0), rtol=1e-8)
    assert_allclose(spd_spectrum(np.diag([0.5, 3.0])), (0.5, 3.0), rtol=1e-8)

    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    B = a.T @ a + np.eye(6)
    eigenvalues = np.linalg.eigvalsh(B)

    assert_allclose(spd_spectrum(B), (eigenvalues[0], eigenvalues[-1]), rtol=1e-6)


def test_spd_spectrum_rejects_asymmetric_matrices():
    with pytest.raises(InvalidMatrix):
        spd_spectrum(np.array([[1.0, 2.0], [0.0, 1.0]]))

    with pytest.raises(InvalidMatrix):
        spd_spectrum(np.ones(3))


def test_centralized_bfgs_converges_on_a_quadratic():
    model = make_quadratic(2, 1.0, 5.0, seed=4)
    samples = SampleSet(np.zeros((1, 1)), np.zeros(1))
    trajectory = centralized_bfgs_oracle(model, samples, np.zeros(2), 50, 1.0)

    assert len(trajectory) == 51
    assert np.linalg.norm(grad(model, trajectory[-1], samples)) <= 1e-8


def test_fedsso_matches_centralized_bfgs_without_federation():
    assert degenerate_equivalence_gap(steps=30) <= 1e-10
    assert check_degenerate_equivalence().passed


def test_rate_check_accepts_one_over_k():
    report = rate_check(_losses([1.0 / k for k in range(1, 1001)]), 0.0, 1.0)

    assert report.bounded
    assert report.sup_late <= report.sup_early


def test_rate_check_flags_slower_rates():
    # (k + γ)·k^(-1/4) grows by 2^(3/4) ≈ 1.68 from one window to the next.
    report = rate_check(_losses([k ** -0.25 for k in range(1, 1001)]), 0.0, 1.0)

    assert not report.bounded
    assert report.sup_late > 1.5 * report.sup_early


def test_rate_check_rejects_losses_below_the_optimum():
    with pytest.raises(InconsistentOracle):
        rate_check(_losses([1.0, 0.5, -0.1]), 0.0, 1.0)


def test_quick_checks_pass():
    for check in (check_accounting, check_lighthouse, check_gradients):
        result = check()

        assert result.passed, result


@pytest.mark.slow
def test_suite_writes_a_passing_report(tmp_path):
    path = tmp_path / 'verify.jsonl'
    results = run_suite(str(path))
    lines = [json.loads(line) for line in path.read_text().splitlines()]

    assert [line['name'] for line in lines] == [result.name for result in results]
    assert len(results) == len(CHECKS)
    assert all(line['passed'] for line in lines), [line for line in lines if not line['passed']]


def test_suite_records_a_crashing_check_and_keeps_going(tmp_path):
    def check_broken():
        raise KeyError('missing')

    path = tmp_path / 'verify.jsonl'
    results = run_suite(str(path), checks=[check_broken, check_accounting])
    lines = [json.loads(line) for line in path.read_text().splitlines()]

    assert [line['name'] for line in lines] == ['broken', 'accounting']
    assert not results[0].passed
    assert 'KeyError' in results[0].detail
    assert results[1].passed
