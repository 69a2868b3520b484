"""Independent oracles for the claims FedSSO rests on, runnable as a suite with `python -m fedsim verify`.

The checks cover lighthouse-point existence, the positive definiteness and trace bound of the approximate Hessian,
the secant property, equivalence with centralised BFGS, the O(1/k) rate, analytic gradients and the communication
accounting. Each produces a `CheckResult`; the suite writes them as a JSONL report.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor

from fedsim import model_zoo
from fedsim.base import Algorithm, InverseMode, ParamVector, Schedule
from fedsim.data import FederatedDataset, SampleSet, build_federated_dataset, placeholder_dataset, synth_blobs
from fedsim.engine import (AlgoConfig, RoundTrace, ServerState, make_algorithm, make_clients, run_experiment,
                           run_round, schedule_params, server_rng)
from fedsim.errors import FedSimError, InconsistentOracle, InvalidMatrix, InvalidParam, OracleFailure
from fedsim.linalg import extreme_eigenvalues
from fedsim.metrics import CommModel, RoundRecord, bits_per_round
from fedsim.model import ModelI
from fedsim.sso import BfgsState, apply_inverse, bfgs_update

logger = logging.getLogger(__name__)

LIGHTHOUSE_TOL = 1e-10


# Lighthouse point #

def lighthouse_oracle_1d(local_derivs: Sequence[Callable[[float], float]], x_k: float, alpha: float, tau: int,
                         weights: Optional[Sequence[float]] = None) -> float:
    """Find a lighthouse point of a one-dimensional federation trained with exact gradients.

    Each client runs τ gradient steps from x_k on its own objective; the lighthouse point x̂ is where the global
    derivative equals the average of all local derivatives taken, found by bisection on
    h(x) = f'(x) − ḡ over the hull of the visited iterates.

    :param local_derivs: The derivative f_i' of every client objective.
    :param x_k: The global model at the start of the round.
    :param alpha: The local step size.
    :param tau: The number of local steps.
    :param weights: The client weights p_i, uniform by default.
    :return: x̂ with |h(x̂)| ≤ 1e-10, inside the visited hull.
    """
    if alpha <= 0 or tau < 1 or not local_derivs:
        raise InvalidParam('need alpha > 0, tau >= 1 and at least one client')

    weights = [1.0 / len(local_derivs)] * len(local_derivs) if weights is None else list(weights)
    visited = [x_k]
    g_bar = 0.0

    for p, derivative in zip(weights, local_derivs):
        x = x_k
        total = 0.0

        for _ in range(tau):
            g = derivative(x)
            total += g
            x = x - alpha * g
            visited.append(x)

        g_bar += p * total / tau

    def h(x):
        return sum(p * derivative(x) for p, derivative in zip(weights, local_derivs)) - g_bar

    if abs(h(x_k)) <= LIGHTHOUSE_TOL:
        return x_k

    points = sorted(set(visited))
    values = [h(x) for x in points]

    for x, value in zip(points, values):
        if abs(value) <= LIGHTHOUSE_TOL:
            return x

    for (lo, h_lo), (hi, h_hi) in zip(zip(points, values), zip(points[1:], values[1:])):
        if np.sign(h_lo) != np.sign(h_hi):
            break
    else:
        raise OracleFailure('h(x) = f\'(x) - g_bar has no sign change on [%g, %g]' % (points[0], points[-1]))

    for _ in range(400):
        mid = 0.5 * (lo + hi)
        h_mid = h(mid)

        if abs(h_mid) <= LIGHTHOUSE_TOL or mid in (lo, hi):
            break

        if np.sign(h_mid) == np.sign(h_lo):
            lo, h_lo = mid, h_mid
        else:
            hi = mid

    if abs(h_mid) > LIGHTHOUSE_TOL:
        raise OracleFailure('bisection stalled at x=%r with |h|=%g' % (mid, abs(h_mid)))

    assert points[0] <= mid <= points[-1], 'The lighthouse point must lie in the visited hull.'

    return mid


def lighthouse_oracle_separable(local_derivs: Sequence[Sequence[Callable[[float], float]]], x_k: np.ndarray,
                                alpha: float, tau: int, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Find a lighthouse point of a separable objective, f_i(x) = Σ_j φ_ij(x_j), one coordinate at a time.

    :param local_derivs: `local_derivs[i][j]` is φ_ij', the derivative of client i's j-th coordinate term.
    :param x_k: The global model.
    :return: The lighthouse point.
    """
    x_k = np.asarray(x_k, dtype=np.float64)

    return np.array([lighthouse_oracle_1d([client[j] for client in local_derivs], float(x_k[j]), alpha, tau, weights)
                     for j in range(x_k.shape[0])])


def lighthouse_matches_local_mean(model: ModelI, data: FederatedDataset, cfg: AlgoConfig) -> float:
    """Run one instrumented round and compare the lighthouse gradient with the weighted mean of the local gradients.

    :return: The max-norm difference between (x_k − v_k)/(ατ) and (1/τ)Σ_i p_i Σ_j ∇f_i(x_{k,j}; ζ).
    """
    algorithm = make_algorithm(cfg.algorithm)
    x0 = model_zoo.init_params(model, np.random.default_rng(cfg.seed))
    clients = make_clients(data, cfg.seed)
    server = ServerState(x=x0, k=0, rng=server_rng(cfg.seed), extra=algorithm.init_state(model, x0, clients, cfg))
    trace = RoundTrace()

    run_round(algorithm, model, server, clients, data, cfg, trace=trace)

    g_hat = (trace.x_start - trace.v) / (cfg.alpha * cfg.tau)
    mean = np.zeros_like(g_hat)

    for client_id in sorted(trace.local_grads):
        mean += trace.weights[client_id] * np.sum(trace.local_grads[client_id], axis=0) / cfg.tau

    return float(np.max(np.abs(g_hat - mean)))


# Approximate Hessian #

def spd_spectrum(B_hat: np.ndarray) -> Tuple[float, float]:
    """
    :return: The smallest and largest eigenvalue of a symmetric matrix, by shifted power iteration.
    """
    B_hat = np.asarray(B_hat, dtype=np.float64)

    if B_hat.ndim != 2 or B_hat.shape[0] != B_hat.shape[1]:
        raise InvalidMatrix('expected a square matrix, got shape %s' % (B_hat.shape,))

    if np.max(np.abs(B_hat - B_hat.T)) > 1e-10 * max(1.0, np.max(np.abs(B_hat))):
        raise InvalidMatrix('matrix is not symmetric')

    return extreme_eigenvalues(B_hat, tol=1e-8)


def hessian_bound_violations(state: BfgsState) -> List[str]:
    """Check an approximate Hessian for symmetry, positive definiteness and the trace bound.

    :return: A description of every violated property.
    """
    B = state.B_hat
    problems = []

    if np.max(np.abs(B - B.T)) > 1e-10:
        problems.append('asymmetric')

    try:
        cho_factor(B)
    except (LinAlgError, ValueError):
        problems.append('not positive definite')
    else:
        if np.linalg.eigvalsh(B)[0] < 1e-12:
            problems.append('min eigenvalue below 1e-12')

    if np.trace(B) > state.trace_bound() * (1 + 1e-12):
        problems.append('trace %g exceeds %g' % (np.trace(B), state.trace_bound()))

    return problems


def centralized_bfgs_oracle(model: ModelI, samples: SampleSet, x0: ParamVector, steps: int, eta: float,
                            lambda_lo: float = 1e-4, lambda_hi: float = 9999.0) -> List[ParamVector]:
    """Run centralised gradient descent preconditioned by a clipped BFGS approximation, x ← x − η·B⁻¹∇f(x).

    :param model: The model.
    :param samples: The samples of the full-batch objective.
    :param x0: The starting point.
    :param steps: The number of steps.
    :param eta: The step size.
    :param lambda_lo: The lower curvature bound.
    :param lambda_hi: The upper curvature bound.
    :return: The iterates x_0, ..., x_steps.
    """
    x = np.array(x0, dtype=np.float64)
    g = model.grad(x, samples.features, samples.labels)
    B = np.eye(x.shape[0])
    trajectory = [ParamVector(x.copy())]
    x_prev = g_prev = None

    for step in range(steps):
        if x_prev is not None:
            s = x - x_prev
            y = g - g_prev
            Bs = B @ s
            sBs = s @ Bs

            if np.linalg.norm(y) > 1e-12 and np.linalg.norm(s) > 1e-12 and sBs > 1e-14 * (s @ s):
                cur = y @ s

                if not (cur > 0 and lambda_lo < (y @ y) / cur < lambda_hi):
                    cur = 2.0 / (lambda_lo + lambda_hi) * (y @ y)

                B = B + np.outer(y, y) / cur - np.outer(Bs, Bs) / sBs
                B = 0.5 * (B + B.T)

        x_prev, g_prev = x, g
        x = x - eta * np.linalg.solve(B, g)

        if not np.all(np.isfinite(x)):
            raise OracleFailure('centralised BFGS diverged at step %d' % (step + 1))

        g = model.grad(x, samples.features, samples.labels)
        trajectory.append(ParamVector(x.copy()))

    return trajectory


# Rates and gradients #

@dataclass(frozen=True)
class RateReport:
    bounded: bool
    sup_early: float
    sup_late: float


def rate_check(records: Sequence[RoundRecord], f_star: float, gamma: float) -> RateReport:
    """Check that w_k = (k + γ)(f(x_k) − f*) does not grow, as an O(1/(k + γ)) rate requires.

    :param records: The records of a run, f(x_k) being the train loss.
    :param f_star: The optimal objective value.
    :param gamma: The schedule's γ.
    :return: The supremum of w_k over the early window [K/10, K/2] and the late window [K/2, K], and whether the
        late one stays within 1.5 times the early one.
    """
    if not records:
        raise InvalidParam('no records to check')

    K = records[-1].round
    early = []
    late = []

    for record in records:
        if record.train_loss < f_star - 1e-9:
            raise InconsistentOracle('round %d: loss %.17g is below f* = %.17g' % (record.round, record.train_loss,
                                                                                    f_star))

        w = (record.round + gamma) * (record.train_loss - f_star)

        if K / 10 <= record.round <= K / 2:
            early.append(w)

        if K / 2 <= record.round <= K:
            late.append(w)

    if not early or not late:
        raise InvalidParam('too few rounds (%d) to form both windows' % K)

    sup_early, sup_late = max(early), max(late)

    return RateReport(bounded=sup_late <= 1.5 * sup_early, sup_early=sup_early, sup_late=sup_late)


def fd_gradient_check(model: ModelI, params: ParamVector, samples: SampleSet, h: float = 1e-6) -> float:
    """Compare a model's analytic gradient with central differences.

    :param model: The model.
    :param params: The point to check at.
    :param samples: The samples of the objective.
    :param h: The relative step, scaled per coordinate by 1 + |x_j|.
    :return: The largest |fd − analytic| / (1 + |analytic|) over all coordinates.
    """
    if h <= 0:
        raise InvalidParam('h must be positive, got %g' % h)

    params = np.array(params, dtype=np.float64)
    analytic = model_zoo.grad(model, params, samples)
    worst = 0.0

    for j in range(params.shape[0]):
        step = h * (1 + abs(params[j]))
        forward = params.copy()
        backward = params.copy()
        forward[j] += step
        backward[j] -= step

        fd = (model_zoo.loss(model, forward, samples) - model_zoo.loss(model, backward, samples)) / (2 * step)
        worst = max(worst, abs(fd - analytic[j]) / (1 + abs(analytic[j])))

    return worst


# Suite #

@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ''
    seconds: float = 0.0


def _small_federation(seed: int = 0, num_clients: int = 10, num_classes: int = 5, num_features: int = 4,
                      n_total: int = 1000) -> FederatedDataset:
    samples = synth_blobs(seed, num_classes, num_features, n_total, spread=0.5)

    return build_federated_dataset(samples, num_clients, 2, 0.75, seed, num_classes=num_classes)


def check_accounting() -> CheckResult:
    comm = CommModel(784 * 10 + 10, 4)
    measured = {
        'n_c': comm.n_c,
        'fedavg_200': 200 * bits_per_round(Algorithm.FEDAVG, comm),
        'fedsso_20': 20 * bits_per_round(Algorithm.FEDSSO, comm),
        'scaffold_71': 71 * bits_per_round(Algorithm.SCAFFOLD, comm),
    }
    expected = {'n_c': 62800, 'fedavg_200': 12560000, 'fedsso_20': 1256000, 'scaffold_71': 8917600}
    wrong = [name for name in expected if measured[name] != expected[name]]

    return CheckResult('accounting', not wrong, float(len(wrong)), 0.0, 'mismatched: %s' % wrong if wrong else '')


def check_protocol_shape(rounds: int = 50, num_clients: int = 10) -> CheckResult:
    """Every algorithm's traffic matches its communication cost, and message counts match its protocol."""
    data = _small_federation(num_clients=num_clients)
    model = model_zoo.MCLRModel(data.num_classes, data.num_features)
    comm = CommModel(model.num_params)
    failures = []

    for algorithm in (Algorithm.FEDSGD, Algorithm.FEDAVG, Algorithm.SCAFFOLD, Algorithm.FEDDANE, Algorithm.FEDSSO):
        cfg = AlgoConfig(algorithm=algorithm, alpha=0.05, eta=0.5, tau=2, batch_size=10, rounds=rounds)
        exchanges = 2 if algorithm == Algorithm.FEDDANE else 1

        for record in run_experiment(cfg, model, data):
            if (record.bytes_per_round != bits_per_round(algorithm, comm)
                    or record.messages_up != exchanges * num_clients
                    or record.messages_down != exchanges * num_clients):
                failures.append('%s round %d' % (algorithm.value, record.round))
                break

    return CheckResult('protocol_shape', not failures, float(len(failures)), 0.0, ', '.join(failures))


def check_hessian_bounds(rounds: int = 60) -> CheckResult:
    """The approximate Hessian stays symmetric positive definite within its trace bound in every round."""
    data = _small_federation()
    model = model_zoo.MCLRModel(data.num_classes, data.num_features)
    cfg = AlgoConfig(algorithm=Algorithm.FEDSSO, alpha=0.05, eta=0.5, tau=5, batch_size=10, rounds=rounds,
                     reset_period=25)
    violations = []
    lowest = [math.inf]

    def observe(server, record):
        state = server.extra['bfgs']
        lowest[0] = min(lowest[0], float(np.linalg.eigvalsh(np.linalg.inv(state.B_hat))[0]))

        for problem in hessian_bound_violations(state):
            violations.append('round %d: %s' % (record.round, problem))

    run_experiment(cfg, model, data, observer=observe)

    return CheckResult('hessian_bounds', not violations and lowest[0] >= 1e-12, float(len(violations)), 0.0,
                       '; '.join(violations[:5]) or 'min eigenvalue of the inverse: %g' % lowest[0])


def _random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d))

    return a.T @ a / d + np.eye(d)


def check_secant(trials: int = 1000, d: int = 30, seed: int = 0) -> CheckResult:
    """Unclipped BFGS updates satisfy B_new·s = ŷ."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    for _ in range(trials):
        state = BfgsState(B_hat=_random_spd(rng, d))
        s = rng.standard_normal(d)
        y_hat = _random_spd(rng, d) @ s
        updated = bfgs_update(state, ParamVector(y_hat), ParamVector(s), 1)

        if updated.enforcement_triggered:
            continue

        worst = max(worst, np.linalg.norm(updated.B_hat @ s - y_hat) / (1 + np.linalg.norm(y_hat)))

    return CheckResult('secant', worst <= 1e-8, worst, 1e-8)


def check_inverse_modes(updates: int = 50, d: int = 20, seed: int = 0) -> CheckResult:
    """Factor-and-solve and the maintained inverse agree along a shared update sequence."""
    rng = np.random.default_rng(seed)
    spd = BfgsState.identity(d, inverse_mode=InverseMode.SPD_SOLVE)
    dual = BfgsState.identity(d, inverse_mode=InverseMode.DUAL_INVERSE)
    worst = 0.0

    for k in range(1, updates + 1):
        s = rng.standard_normal(d)
        # Every tenth pair has negative curvature and gets clipped.
        y_hat = (-1 if k % 10 == 0 else 1) * (_random_spd(rng, d) @ s)
        spd = bfgs_update(spd, ParamVector(y_hat), ParamVector(s), k)
        dual = bfgs_update(dual, ParamVector(y_hat), ParamVector(s), k)

        g = rng.standard_normal(d)
        a, b = apply_inverse(spd, g), apply_inverse(dual, g)
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(a))

    return CheckResult('inverse_modes', worst <= 1e-8, worst, 1e-8)


def degenerate_equivalence_gap(steps: int = 50, d: int = 10, seed: int = 0) -> float:
    """Run FedSSO with one client, one full-batch local step and no reset next to centralised BFGS.
    The cautious guard is off, since the centralised reference runs the plain clipped update.

    :return: The largest per-iterate distance between the two trajectories.
    """
    model = model_zoo.make_quadratic(d, 1.0, 10.0, seed)
    data = placeholder_dataset(1)
    cfg = AlgoConfig(algorithm=Algorithm.FEDSSO, alpha=0.1, eta=0.1, tau=1, batch_size=None, rounds=steps,
                     reset_period=steps + 10, cautious_eps=0.0)
    federated = []

    run_experiment(cfg, model, data, observer=lambda server, record: federated.append(server.x))

    oracle = centralized_bfgs_oracle(model, data.train_set, np.zeros(d), steps, cfg.eta, cfg.lambda_lo,
                                     cfg.lambda_hi)

    if len(federated) != steps:
        raise OracleFailure('FedSSO stopped after %d of %d rounds' % (len(federated), steps))

    return max(float(np.max(np.abs(x - o))) for x, o in zip(federated, oracle[1:]))


def check_degenerate_equivalence() -> CheckResult:
    gap = degenerate_equivalence_gap()

    return CheckResult('degenerate_equivalence', gap <= 1e-10, gap, 1e-10)


def check_lighthouse() -> CheckResult:
    """Lighthouse points exist for a two-client quadratic federation, per coordinate for a separable one, and the
    engine's lighthouse gradient is the mean of its local gradients."""
    derivs = [lambda x: x - 1.0, lambda x: x + 1.0]
    x_hat = lighthouse_oracle_1d(derivs, 3.0, 0.1, 3)
    residual = abs(np.mean([d(x_hat) for d in derivs]) - _closed_form_mean_grad(3.0, 0.1, 3))

    rng = np.random.default_rng(0)
    centres = rng.standard_normal((2, 5))
    curvatures = 1 + rng.random((2, 5))
    separable = [[(lambda x, a=curvatures[i, j], c=centres[i, j]: a * (x - c)) for j in range(5)] for i in range(2)]
    lighthouse_oracle_separable(separable, rng.standard_normal(5), 0.1, 3)

    data = _small_federation()
    model = model_zoo.MCLRModel(data.num_classes, data.num_features)
    cfg = AlgoConfig(algorithm=Algorithm.FEDSSO, alpha=0.1, tau=5, batch_size=10, rounds=1)
    gap = lighthouse_matches_local_mean(model, data, cfg)
    measured = max(residual, gap)

    return CheckResult('lighthouse', measured <= 1e-10, measured, 1e-10)


def _closed_form_mean_grad(x_k: float, alpha: float, tau: int) -> float:
    # With f_i' = x ∓ 1 the local iterates satisfy x_j − c = (1 − α)^j (x_k − c).
    total = 0.0

    for c in (1.0, -1.0):
        total += sum((1 - alpha) ** j * (x_k - c) for j in range(tau)) / tau

    return total / 2


def check_rate(rounds: int = 2000) -> CheckResult:
    """The theory-scheduled convex run keeps (k + γ)(f(x_k) − f*) bounded."""
    model, cfg, data = rate_run(rounds)
    records = run_experiment(cfg, model, data)
    f_star = model.loss(model.minimizer(), None, None)
    report = rate_check(records, f_star, schedule_params(cfg, model, data).gamma)

    return CheckResult('rate', report.bounded and len(records) == rounds, report.sup_late / report.sup_early, 1.5,
                       'sup early %g, sup late %g' % (report.sup_early, report.sup_late))


def rate_run(rounds: int = 2000):
    """The designated convex run: a d=10 quadratic with spectrum in [1, 4], five clients, five full-batch steps."""
    model = model_zoo.make_quadratic(10, 1.0, 4.0, seed=0)
    cfg = AlgoConfig(algorithm=Algorithm.FEDSSO, schedule=Schedule.THEORY_CONVEX, tau=5, batch_size=None,
                     rounds=rounds, kappa_lo=0.25, kappa_hi=0.5, smoothness_L=4.0, smoothness_mu=1.0)

    return model, cfg, placeholder_dataset(5)


def check_gradients() -> CheckResult:
    rng = np.random.default_rng(0)
    samples = synth_blobs(0, 3, 4, 30, spread=0.5)
    errors = {
        'quadratic': (fd_gradient_check(model_zoo.make_quadratic(6, 0.5, 5.0, 0), rng.standard_normal(6), samples),
                      1e-5),
    }

    mclr = model_zoo.MCLRModel(3, 4)
    errors['mclr'] = (fd_gradient_check(mclr, 0.1 * rng.standard_normal(mclr.num_params), samples), 1e-5)

    mlp = model_zoo.MLPModel(4, 5, 3)
    errors['mlp'] = (fd_gradient_check(mlp, mlp.init_params(rng), samples, h=1e-5), 1e-4)

    failed = [name for name, (error, tol) in errors.items() if error > tol]

    return CheckResult('fd_gradients', not failed, max(error for error, _ in errors.values()), 1e-4,
                       'failed: %s' % failed if failed else '')


CHECKS = [check_accounting, check_protocol_shape, check_hessian_bounds, check_secant, check_inverse_modes,
          check_degenerate_equivalence, check_lighthouse, check_rate, check_gradients]


def _failed(check: Callable[[], CheckResult], error: Exception) -> CheckResult:
    return CheckResult(check.__name__[len('check_'):], False, math.nan, math.nan,
                       '%s: %s' % (type(error).__name__, error))


def run_suite(report_path: Optional[str] = None,
              checks: Optional[Sequence[Callable[[], CheckResult]]] = None) -> List[CheckResult]:
    """Run every check and optionally write the results as JSONL. A check that raises is recorded as failed.

    :param report_path: Where to write the report.
    :param checks: The checks to run, defaults to all of them.
    :return: The results, in execution order.
    """
    results = []

    for check in CHECKS if checks is None else checks:
        start = time.perf_counter()

        try:
            result = check()
        except (FedSimError, AssertionError, LinAlgError) as e:
            result = _failed(check, e)
        except Exception as e:
            logger.exception('Check %s raised an unexpected error.', check.__name__)
            result = _failed(check, e)

        result.seconds = time.perf_counter() - start
        logger.info('%-24s %s (measured %g, threshold %g)', result.name, 'PASS' if result.passed else 'FAIL',
                    result.measured, result.threshold)
        results.append(result)

    if report_path is not None:
        with open(report_path, 'w') as f:
            for result in results:
                f.write(json.dumps({**asdict(result), 'passed': bool(result.passed)}) + '\n')

    return results
