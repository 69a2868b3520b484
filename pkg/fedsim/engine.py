"""The simulated federation: client local updates, weighted aggregation and the round drivers of FedSGD, FedAvg,
Scaffold, FedDANE and FedSSO behind one algorithm interface.

Every client owns a random stream keyed by its id, and aggregation always sums in ascending client id order, so a
run is bitwise reproducible from its seed regardless of how (or whether) clients are executed in parallel.
"""
import logging
import math
import time
import warnings
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fedsim import model_zoo
from fedsim.base import Algorithm, InverseMode, ParamVector, Schedule
from fedsim.data import ClientShard, FederatedDataset
from fedsim.errors import DivergenceDetected, InvalidDimension, InvalidParam, SingularHessian, WeightError
from fedsim.metrics import CommModel, RoundRecord
from fedsim.model import ModelI
from fedsim.sso import (BfgsState, ScheduleParams, UpdateEvent, apply_inverse, bfgs_update, lighthouse_grad,
                        schedule_theory_convex, schedule_theory_nonconvex)

logger = logging.getLogger(__name__)

# Models whose norm exceeds this are treated as diverged.
DIVERGENCE_NORM = 1e12


class AlgoConfig(BaseModel):
    """The settings of one training run.

    `batch_size = None` means full-batch local gradients. `eta`, the inverse mode, the curvature bounds, the reset
    period and `cautious_eps` only matter to FedSSO, `mu_prox` only to FedDANE. FedSGD always runs a single local
    step. `cautious_eps = 0` turns FedSSO's cautious curvature guard off.
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    algorithm: Algorithm
    alpha: float = Field(0.01, gt=0)
    eta: float = Field(1.0, gt=0)
    tau: int = Field(5, ge=1)
    batch_size: Optional[int] = Field(100, ge=1)
    schedule: Schedule = Schedule.CONSTANT
    rounds: int = Field(200, ge=0)
    seed: int = 0
    mu_prox: float = Field(0.001, ge=0)
    lambda_lo: float = Field(1e-4, gt=0)
    lambda_hi: float = Field(9999.0, gt=0)
    reset_period: int = Field(200, ge=1)
    inverse_mode: InverseMode = InverseMode.SPD_SOLVE
    cautious_eps: float = Field(0.05, ge=0, lt=1)
    kappa_lo: float = Field(0.1, gt=0)
    kappa_hi: float = Field(10.0, gt=0)
    participation: float = Field(1.0, gt=0, le=1)
    smoothness_L: Optional[float] = Field(None, gt=0)
    smoothness_mu: Optional[float] = Field(None, gt=0)
    bytes_per_scalar: int = Field(4, ge=1)
    label: Optional[str] = None

    @model_validator(mode='before')
    @classmethod
    def _single_local_step(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data

        if str(getattr(data.get('algorithm'), 'value', data.get('algorithm'))) == 'fedsgd':
            data = {**data, 'tau': 1}

        # TOML has no null, so config files spell full-batch steps as "full".
        if data.get('batch_size') == 'full':
            data = {**data, 'batch_size': None}

        return data

    @model_validator(mode='after')
    def _check_ranges(self) -> 'AlgoConfig':
        if self.algorithm == Algorithm.FEDNL:
            raise ValueError('FedNL is accounted for but cannot be executed')

        if self.lambda_lo >= self.lambda_hi:
            raise ValueError('lambda_lo must be smaller than lambda_hi')

        if self.kappa_lo > self.kappa_hi:
            raise ValueError('kappa_lo cannot exceed kappa_hi')

        return self

    @property
    def name(self) -> str:
        return self.label or self.algorithm.value


@dataclass
class ServerState:
    """The global model x_k after round k, plus whatever the algorithm keeps on the server."""
    x: ParamVector
    k: int
    rng: np.random.Generator
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ClientState:
    client_id: int
    rng: np.random.Generator
    control_variate: Optional[ParamVector] = None


@dataclass
class RoundTrace:
    """Instrumentation of one round: every local stochastic gradient per client, the weights and v_k."""
    local_grads: Dict[int, List[ParamVector]] = field(default_factory=dict)
    weights: Dict[int, float] = field(default_factory=dict)
    x_start: Optional[ParamVector] = None
    v: Optional[ParamVector] = None

    def log_for(self, client_id: int) -> List[ParamVector]:
        return self.local_grads.setdefault(client_id, [])


class Channel:
    """Counts the messages and bytes moved between the server and the clients in one round.

    Link counters hold what one client link carries; totals hold the traffic summed over all participants.
    """

    def __init__(self, comm: CommModel):
        self.comm = comm
        self.messages_up = self.messages_down = 0
        self.link_bytes_up = self.link_bytes_down = 0
        self.total_bytes_up = self.total_bytes_down = 0

    def broadcast(self, num_vectors: int, num_clients: int):
        size = num_vectors * self.comm.model_bytes
        self.messages_down += num_clients
        self.link_bytes_down += size
        self.total_bytes_down += num_clients * size

    def gather(self, num_vectors: int, num_clients: int):
        size = num_vectors * self.comm.model_bytes
        self.messages_up += num_clients
        self.link_bytes_up += size
        self.total_bytes_up += num_clients * size


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, client_id)))


def server_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def local_update(model: ModelI, shard: ClientShard, x_start: ParamVector, alpha: float, tau: int, batch_size: int,
                 rng: np.random.Generator, correction: Optional[ParamVector] = None, prox_coeff: float = 0.0,
                 grad_log: Optional[List[ParamVector]] = None) -> ParamVector:
    """Run τ local SGD steps on one client, x ← x − α·(∇f_i(x; ζ) + correction + prox_coeff·(x − x_start)).

    :param model: The model being trained.
    :param shard: The client's samples.
    :param x_start: The model the client starts from.
    :param alpha: The local step size.
    :param tau: The number of local steps.
    :param batch_size: The mini-batch size (the shard size for full-batch steps).
    :param rng: The client's random stream.
    :param correction: A constant vector added to every stochastic gradient (Scaffold, FedDANE).
    :param prox_coeff: The coefficient of a proximal term pulling the iterate towards x_start.
    :param grad_log: If given, every stochastic gradient taken is appended to it.
    :return: The client model after τ steps.
    """
    if alpha <= 0 or tau < 1:
        raise InvalidParam('need alpha > 0 and tau >= 1, got %g, %d' % (alpha, tau))

    x = x_start.copy()

    for _ in range(tau):
        direction = model_zoo.stochastic_grad(model, x, shard, batch_size, rng)

        if grad_log is not None:
            grad_log.append(direction)

        if correction is not None:
            direction = direction + correction

        if prox_coeff:
            direction = direction + prox_coeff * (x - x_start)

        x = x - alpha * direction

    return ParamVector(x)


def aggregate(updates: Sequence[ParamVector], weights: Sequence[float],
              client_ids: Optional[Sequence[int]] = None) -> ParamVector:
    """Form the weighted average v = Σ p_i·x_i, summing in ascending client id order.

    :param updates: The client models.
    :param weights: The aggregation weights p_i, summing to one.
    :param client_ids: The ids of the clients, defaults to their position.
    :return: The aggregated model.
    """
    if len(updates) != len(weights) or len(updates) == 0:
        raise WeightError('need one weight per update, got %d updates and %d weights' % (len(updates), len(weights)))

    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise WeightError('weights sum to %.12g, not 1' % math.fsum(weights))

    if client_ids is None:
        client_ids = range(len(updates))

    d = updates[0].shape

    if any(u.shape != d for u in updates):
        raise InvalidDimension('updates differ in dimension')

    v = np.zeros(d)

    for i in sorted(range(len(updates)), key=lambda j: client_ids[j]):
        v += weights[i] * updates[i]

    return ParamVector(v)


@dataclass
class Participant:
    client: ClientState
    shard: ClientShard
    weight: float
    batch_size: int


@dataclass
class RoundContext:
    """Everything an algorithm needs to execute one round."""
    model: ModelI
    server: ServerState
    participants: List[Participant]
    num_clients: int
    cfg: AlgoConfig
    alpha: float
    eta: float
    channel: Channel
    trace: Optional[RoundTrace] = None
    executor: Optional[Executor] = None

    @property
    def k(self) -> int:
        return self.server.k + 1

    @property
    def weights(self) -> List[float]:
        return [p.weight for p in self.participants]

    @property
    def client_ids(self) -> List[int]:
        return [p.client.client_id for p in self.participants]

    def grad_log(self, participant: Participant) -> Optional[List[ParamVector]]:
        if self.trace is None:
            return None

        return self.trace.log_for(participant.client.client_id)

    def map(self, fn: Callable, *per_client: Sequence) -> List:
        """Run `fn(participant, *args)` for every participant; results come back in participant order."""
        args = list(zip(self.participants, *per_client))

        if self.executor is None:
            return [fn(*a) for a in args]

        return list(self.executor.map(lambda a: fn(*a), args))

    def local_models(self, correction: Optional[Callable[[Participant], Optional[ParamVector]]] = None,
                     prox_coeff: float = 0.0) -> List[ParamVector]:
        x = self.server.x

        def train(p: Participant):
            return local_update(self.model, p.shard, x, self.alpha, self.cfg.tau, p.batch_size, p.client.rng,
                                correction=None if correction is None else correction(p), prox_coeff=prox_coeff,
                                grad_log=self.grad_log(p))

        return self.map(train)

    def aggregate(self, updates: Sequence[ParamVector]) -> ParamVector:
        return aggregate(updates, self.weights, self.client_ids)


class AlgorithmI:
    """An interface for the server-side protocol of a federated algorithm."""

    kind: Algorithm

    def init_state(self, model: ModelI, x0: ParamVector, clients: List[ClientState],
                   cfg: AlgoConfig) -> Dict[str, Any]:
        """Create the algorithm's server payload and prepare the clients' state.

        :return: The initial `ServerState.extra`.
        """
        return {}

    def round(self, ctx: RoundContext) -> Tuple[ParamVector, bool]:
        """Execute one communication round.

        :param ctx: The round context.
        :return: The new global model and whether positive definiteness had to be enforced.
        """
        raise NotImplementedError


class FedAvg(AlgorithmI):
    kind = Algorithm.FEDAVG

    def round(self, ctx):
        ctx.channel.broadcast(1, len(ctx.participants))
        models = ctx.local_models()
        ctx.channel.gather(1, len(ctx.participants))

        x_new = ctx.aggregate(models)

        if ctx.trace is not None:
            ctx.trace.v = x_new

        return x_new, False


class FedSGD(FedAvg):
    """FedAvg with a single local step per round."""
    kind = Algorithm.FEDSGD


class Scaffold(AlgorithmI):
    """Scaffold with the cheap (option II) control variate update.

    The server broadcasts (x, c); each client corrects its steps by c − c_i, then sends back its model and the
    change of its control variate c_i⁺ = c_i − c + (x − y_i)/(τα).
    """
    kind = Algorithm.SCAFFOLD

    def init_state(self, model, x0, clients, cfg):
        for client in clients:
            client.control_variate = ParamVector(np.zeros(model.num_params))

        return {'c': ParamVector(np.zeros(model.num_params))}

    def round(self, ctx):
        c = ctx.server.extra['c']
        x = ctx.server.x
        ctx.channel.broadcast(2, len(ctx.participants))

        models = ctx.local_models(correction=lambda p: c - p.client.control_variate)

        def refresh(p: Participant, y: ParamVector):
            c_plus = p.client.control_variate - c + (x - y) / (ctx.cfg.tau * ctx.alpha)
            delta = c_plus - p.client.control_variate
            p.client.control_variate = ParamVector(c_plus)

            return delta

        deltas = ctx.map(refresh, models)
        ctx.channel.gather(2, len(ctx.participants))

        c_new = c.copy()

        for i in sorted(range(len(deltas)), key=lambda j: ctx.client_ids[j]):
            c_new += deltas[i] / ctx.num_clients

        ctx.server.extra['c'] = ParamVector(c_new)

        return ctx.aggregate(models), False


class FedDANE(AlgorithmI):
    """FedDANE: one exchange to assemble the global gradient, a second to solve the local DANE subproblems.

    Each subproblem, f_i(w) − ⟨∇f_i(x) − ∇f(x), w⟩ + μ/2·‖w − x‖², is solved inexactly with τ SGD steps.
    """
    kind = Algorithm.FEDDANE

    def round(self, ctx):
        x = ctx.server.x
        n = len(ctx.participants)

        ctx.channel.broadcast(1, n)
        local_grads = ctx.map(lambda p: model_zoo.grad(ctx.model, x, p.shard.samples))
        ctx.channel.gather(1, n)

        global_grad = ctx.aggregate(local_grads)
        corrections = {p.client.client_id: global_grad - g for p, g in zip(ctx.participants, local_grads)}

        ctx.channel.broadcast(1, n)
        models = ctx.local_models(correction=lambda p: corrections[p.client.client_id], prox_coeff=ctx.cfg.mu_prox)
        ctx.channel.gather(1, n)

        ctx.server.extra['global_grad'] = global_grad

        return ctx.aggregate(models), False


class FedSSO(AlgorithmI):
    """FedSSO: FedAvg's exchange, followed by a quasi-Newton step on the server.

    The first round has no previous lighthouse gradient and steps with B̂_0 = I; BFGS updates start in round 2.
    """
    kind = Algorithm.FEDSSO

    def init_state(self, model, x0, clients, cfg):
        return {'bfgs': BfgsState.identity(model.num_params, cfg.lambda_lo, cfg.lambda_hi, cfg.reset_period,
                                           cfg.inverse_mode, cfg.cautious_eps)}

    def round(self, ctx):
        x = ctx.server.x
        ctx.channel.broadcast(1, len(ctx.participants))
        models = ctx.local_models()
        ctx.channel.gather(1, len(ctx.participants))

        v = ctx.aggregate(models)
        g_hat = lighthouse_grad(x, v, ctx.alpha, ctx.cfg.tau)
        state: BfgsState = ctx.server.extra['bfgs']

        if ctx.trace is not None:
            ctx.trace.v = v

        if state.prev_x is None:
            state = replace(state, rounds_since_reset=state.rounds_since_reset + 1)
        else:
            state = bfgs_update(state, ParamVector(g_hat - state.prev_ghat), ParamVector(x - state.prev_x), ctx.k)

        try:
            direction = apply_inverse(state, g_hat)
        except SingularHessian:
            logger.warning('Round %d: cannot apply the approximate Hessian, falling back to the identity.', ctx.k)
            state = BfgsState.identity(state.dimension, state.lambda_lo, state.lambda_hi, state.reset_period,
                                       state.inverse_mode, state.cautious_eps)
            state = replace(state, last_event=UpdateEvent.FALLBACK)
            direction = g_hat

        ctx.server.extra['bfgs'] = replace(state, prev_x=x, prev_ghat=g_hat)

        return ParamVector(x - ctx.eta * direction), state.enforcement_triggered


ALGORITHMS = {cls.kind: cls for cls in (FedSGD, FedAvg, Scaffold, FedDANE, FedSSO)}


def make_algorithm(algorithm: Algorithm) -> AlgorithmI:
    return ALGORITHMS[Algorithm(algorithm)]()


# Round and run drivers #

def schedule_params(cfg: AlgoConfig, model: ModelI, data: FederatedDataset) -> Optional[ScheduleParams]:
    """Work out the constants a theory schedule needs, or None for constant step sizes."""
    if cfg.schedule == Schedule.CONSTANT:
        return None

    L, mu = cfg.smoothness_L, cfg.smoothness_mu

    if cfg.schedule == Schedule.THEORY_NONCONVEX:
        # Only L enters the non-convex schedule.
        L = L or model_zoo.estimate_smoothness(model, data.train_set).L
        mu = L
    elif L is None or mu is None:
        info = model_zoo.estimate_smoothness(model, data.train_set)
        L = L or info.L
        mu = mu or info.mu

    logger.info('Theory schedule with L=%g, mu=%g.', L, mu)

    return ScheduleParams(L=L, mu=min(mu, L), kappa_lo=cfg.kappa_lo, kappa_hi=cfg.kappa_hi, tau=cfg.tau,
                          N=data.num_clients)


def step_sizes(cfg: AlgoConfig, k: int, params: Optional[ScheduleParams] = None) -> Tuple[float, float]:
    """
    :return: The local and global step sizes (alpha_k, eta_k) of round k.
    """
    if cfg.schedule == Schedule.CONSTANT:
        return cfg.alpha, cfg.eta

    if params is None:
        raise InvalidParam('schedule %s needs smoothness constants' % cfg.schedule.value)

    if cfg.schedule == Schedule.THEORY_CONVEX:
        return schedule_theory_convex(k, params)

    return schedule_theory_nonconvex(k, params.L, cfg.tau)


def make_clients(data: FederatedDataset, seed: int) -> List[ClientState]:
    return [ClientState(client_id=shard.client_id, rng=client_rng(seed, shard.client_id))
            for shard in sorted(data.train_shards, key=lambda s: s.client_id)]


def _participants(clients: List[ClientState], data: FederatedDataset, cfg: AlgoConfig,
                  rng: np.random.Generator) -> List[Participant]:
    shards = {shard.client_id: shard for shard in data.train_shards}
    chosen = clients

    if cfg.participation < 1:
        m = max(1, math.ceil(cfg.participation * len(clients)))
        chosen = [clients[i] for i in sorted(rng.choice(len(clients), size=m, replace=False))]

    weights = [shards[c.client_id].weight for c in chosen]

    if len(chosen) < len(clients):
        total = math.fsum(weights)
        weights = [w / total for w in weights]

    def batch(shard):
        return len(shard) if cfg.batch_size is None else min(cfg.batch_size, len(shard))

    return [Participant(c, shards[c.client_id], w, batch(shards[c.client_id])) for c, w in zip(chosen, weights)]


def evaluate(model: ModelI, x: ParamVector, data: FederatedDataset) -> Tuple[float, float, float]:
    """
    :return: The train loss and global gradient norm on the pooled training set and the test accuracy (NaN for
        models that do not classify).
    """
    train_set = data.train_set
    train_loss = model_zoo.loss(model, x, train_set)
    grad_norm = float(np.linalg.norm(model_zoo.grad(model, x, train_set)))

    if model.num_classes is None or len(data.test_set) == 0:
        test_accuracy = math.nan
    else:
        test_accuracy = model_zoo.accuracy(model, x, data.test_set)

    return train_loss, test_accuracy, grad_norm


def run_round(algorithm: AlgorithmI, model: ModelI, server: ServerState, clients: List[ClientState],
              data: FederatedDataset, cfg: AlgoConfig, params: Optional[ScheduleParams] = None,
              trace: Optional[RoundTrace] = None,
              executor: Optional[Executor] = None) -> Tuple[ServerState, RoundRecord]:
    """Execute one communication round and evaluate the resulting global model.

    :param algorithm: The algorithm whose protocol to run.
    :param model: The model being trained.
    :param server: The server state after the previous round.
    :param clients: The client states, in ascending id order.
    :param data: The federated dataset.
    :param cfg: The run configuration.
    :param params: The schedule constants, required by the theory schedules.
    :param trace: If given, filled with the round's local gradients and aggregate.
    :param executor: If given, clients are trained on it.
    :return: The server state after the round and its record.
    """
    if server.x.shape != (model.num_params,):
        raise InvalidDimension('server model has shape %s, the model needs %d parameters'
                               % (server.x.shape, model.num_params))

    start = time.perf_counter()
    k = server.k + 1
    alpha, eta = step_sizes(cfg, k, params)
    participants = _participants(clients, data, cfg, server.rng)
    channel = Channel(CommModel(model.num_params, cfg.bytes_per_scalar))

    if trace is not None:
        trace.x_start = server.x
        trace.weights = {p.client.client_id: p.weight for p in participants}

    ctx = RoundContext(model=model, server=server, participants=participants, num_clients=len(clients), cfg=cfg,
                       alpha=alpha, eta=eta, channel=channel, trace=trace, executor=executor)
    x_new, enforced = algorithm.round(ctx)

    if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > DIVERGENCE_NORM:
        raise DivergenceDetected(k, 'model is not finite or too large')

    train_loss, test_accuracy, grad_norm = evaluate(model, x_new, data)

    if not math.isfinite(train_loss):
        raise DivergenceDetected(k, 'loss is %s' % train_loss)

    record = RoundRecord(round=k, train_loss=train_loss, test_accuracy=test_accuracy, global_grad_norm=grad_norm,
                         bytes_up=channel.link_bytes_up, bytes_down=channel.link_bytes_down,
                         messages_up=channel.messages_up, messages_down=channel.messages_down,
                         enforcement_triggered=enforced, wall_ms=1000 * (time.perf_counter() - start),
                         total_bytes_up=channel.total_bytes_up, total_bytes_down=channel.total_bytes_down)

    return ServerState(x=x_new, k=k, rng=server.rng, extra=server.extra), record


def run_experiment(cfg: AlgoConfig, model: ModelI, data: FederatedDataset,
                   observer: Optional[Callable[[ServerState, RoundRecord], None]] = None,
                   threads: int = 1) -> List[RoundRecord]:
    """Train a model for `cfg.rounds` rounds.

    A diverging run stops early and returns the records of the rounds completed before the divergence.

    :param cfg: The run configuration.
    :param model: The model to train.
    :param data: The federated dataset.
    :param observer: Called with the server state and record after every round.
    :param threads: The number of worker threads used to train clients.
    :return: One record per completed round.
    """
    algorithm = make_algorithm(cfg.algorithm)
    x0 = model_zoo.init_params(model, np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,))))
    clients = make_clients(data, cfg.seed)
    server = ServerState(x=x0, k=0, rng=server_rng(cfg.seed),
                         extra=algorithm.init_state(model, x0, clients, cfg))
    params = schedule_params(cfg, model, data) if cfg.rounds > 0 else None

    smallest = min(len(shard) for shard in data.train_shards)

    if cfg.batch_size is not None and cfg.batch_size > smallest:
        warnings.warn('Batch size %d exceeds the smallest client shard (%d samples); clamping to the shard size.'
                      % (cfg.batch_size, smallest))

    records = []
    log_every = max(1, cfg.rounds // 10)

    with ThreadPoolExecutor(threads) if threads > 1 else nullcontext() as executor:
        for _ in range(cfg.rounds):
            try:
                server, record = run_round(algorithm, model, server, clients, data, cfg, params, executor=executor)
            except DivergenceDetected as e:
                logger.warning('%s: %s; stopping after %d rounds.', cfg.name, e, len(records))
                break

            records.append(record)

            if observer is not None:
                observer(server, record)

            if record.round % log_every == 0:
                logger.info('%s round %d: loss=%.6g, accuracy=%.4f, grad norm=%.3g.', cfg.name, record.round,
                            record.train_loss, record.test_accuracy, record.global_grad_norm)

    return records
