"""Loss functions, gradients and stochastic gradients for the objectives trained by the laboratory.

Three models are provided: ℓ2-regularised multinomial logistic regression (MCLR, convex), a quadratic test objective
and a single-hidden-layer tanh MLP (non-convex). The module-level functions validate their inputs and dispatch to
the model objects.
"""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import log_softmax, softmax

from fedsim.base import ParamVector
from fedsim.data import ClientShard, SampleSet
from fedsim.errors import EmptyBatch, InvalidBatch, InvalidDimension, InvalidParam, NotEstimable, UnsupportedMetric
from fedsim.linalg import extreme_eigenvalues, power_iteration
from fedsim.model import ModelI


@dataclass(frozen=True)
class SmoothnessInfo:
    L: float
    mu: float
    sigma: float = 0.0

    def __post_init__(self):
        assert self.L > 0, 'The smoothness constant must be positive.'
        assert self.mu >= 0 and self.sigma >= 0
        assert self.mu == 0 or self.mu <= self.L * (1 + 1e-12), 'mu cannot exceed L.'


class MCLRModel(ModelI):
    """ℓ2-regularised multinomial (softmax) logistic regression.

    Parameter layout: the num_features x num_classes weight matrix in row-major order, followed by the num_classes
    biases. Only the weights are regularised.
    """

    def __init__(self, num_classes: int, num_features: int, l2_coeff: float = 1e-4):
        if num_classes < 2 or num_features < 1:
            raise InvalidParam('MCLR needs at least 2 classes and 1 feature')

        if l2_coeff < 0:
            raise InvalidParam('l2_coeff must be non-negative, got %g' % l2_coeff)

        self._num_classes = num_classes
        self.num_features = num_features
        self.l2_coeff = l2_coeff

    def __repr__(self):
        return 'MCLRModel(num_classes=%d, num_features=%d, l2_coeff=%g)' % (
            self._num_classes, self.num_features, self.l2_coeff)

    @property
    def num_params(self) -> int:
        return self.num_features * self._num_classes + self._num_classes

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def unflatten(self, params: ParamVector):
        split = self.num_features * self._num_classes

        return params[:split].reshape(self.num_features, self._num_classes), params[split:]

    def scores(self, params, features):
        weights, bias = self.unflatten(params)

        return features @ weights + bias

    def loss(self, params, features, labels):
        weights, _ = self.unflatten(params)
        log_p = log_softmax(self.scores(params, features), axis=1)
        nll = -np.mean(log_p[np.arange(len(labels)), labels])

        return float(nll + 0.5 * self.l2_coeff * np.sum(weights * weights))

    def grad(self, params, features, labels):
        weights, _ = self.unflatten(params)
        residual = softmax(self.scores(params, features), axis=1)
        residual[np.arange(len(labels)), labels] -= 1.0
        residual /= len(labels)

        grad_weights = features.T @ residual + self.l2_coeff * weights
        grad_bias = residual.sum(axis=0)

        return ParamVector(np.concatenate([grad_weights.reshape(-1), grad_bias]))

    def init_params(self, rng):
        return ParamVector(np.zeros(self.num_params))


class QuadraticModel(ModelI):
    """The quadratic f(x) = ½xᵀAx − bᵀx with A symmetric positive definite. Samples are ignored."""

    def __init__(self, A: np.ndarray, b: np.ndarray):
        A = np.array(A, dtype=np.float64)
        b = np.array(b, dtype=np.float64).reshape(-1)

        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
            raise InvalidDimension('A must be d x d and b of length d')

        if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
            raise InvalidParam('A must be symmetric')

        try:
            self._factor = cho_factor(A)
        except np.linalg.LinAlgError:
            raise InvalidParam('A must be positive definite')

        self.A = A
        self.b = b

    def __repr__(self):
        return 'QuadraticModel(d=%d)' % self.num_params

    @property
    def num_params(self) -> int:
        return self.b.shape[0]

    @property
    def num_classes(self) -> Optional[int]:
        return None

    def loss(self, params, features, labels):
        return float(0.5 * params @ (self.A @ params) - self.b @ params)

    def grad(self, params, features, labels):
        return ParamVector(self.A @ params - self.b)

    def init_params(self, rng):
        return ParamVector(np.zeros(self.num_params))

    def minimizer(self) -> ParamVector:
        """
        :return: The exact minimiser A⁻¹b.
        """
        return ParamVector(cho_solve(self._factor, self.b))


class MLPModel(ModelI):
    """A single-hidden-layer perceptron with tanh activation and a softmax cross-entropy loss.

    Parameter layout: W1 (num_features x hidden_width, row-major), b1, W2 (hidden_width x num_classes, row-major), b2.
    """

    def __init__(self, num_features: int, hidden_width: int, num_classes: int, init_scale: float = 0.5):
        if num_features < 1 or hidden_width < 1 or num_classes < 2:
            raise InvalidParam('MLP needs positive widths and at least 2 classes')

        self.num_features = num_features
        self.hidden_width = hidden_width
        self._num_classes = num_classes
        self.init_scale = init_scale

    def __repr__(self):
        return 'MLPModel(num_features=%d, hidden_width=%d, num_classes=%d)' % (
            self.num_features, self.hidden_width, self._num_classes)

    @property
    def num_params(self) -> int:
        p, h, c = self.num_features, self.hidden_width, self._num_classes

        return p * h + h + h * c + c

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def unflatten(self, params: ParamVector):
        p, h, c = self.num_features, self.hidden_width, self._num_classes
        sizes = np.cumsum([p * h, h, h * c])
        w1, b1, w2, b2 = np.split(params, sizes)

        return w1.reshape(p, h), b1, w2.reshape(h, c), b2

    def _forward(self, params, features):
        w1, b1, w2, b2 = self.unflatten(params)
        hidden = np.tanh(features @ w1 + b1)

        return hidden, hidden @ w2 + b2

    def scores(self, params, features):
        return self._forward(params, features)[1]

    def loss(self, params, features, labels):
        _, logits = self._forward(params, features)
        log_p = log_softmax(logits, axis=1)

        return float(-np.mean(log_p[np.arange(len(labels)), labels]))

    def grad(self, params, features, labels):
        _, _, w2, _ = self.unflatten(params)
        hidden, logits = self._forward(params, features)

        delta_out = softmax(logits, axis=1)
        delta_out[np.arange(len(labels)), labels] -= 1.0
        delta_out /= len(labels)

        delta_hidden = (delta_out @ w2.T) * (1.0 - hidden * hidden)

        return ParamVector(np.concatenate([
            (features.T @ delta_hidden).reshape(-1),
            delta_hidden.sum(axis=0),
            (hidden.T @ delta_out).reshape(-1),
            delta_out.sum(axis=0),
        ]))

    def init_params(self, rng):
        p, h, c = self.num_features, self.hidden_width, self._num_classes
        # Glorot-style scaling keeps the tanh units out of saturation.
        w1 = rng.standard_normal(p * h) * self.init_scale / math.sqrt(p)
        w2 = rng.standard_normal(h * c) * self.init_scale / math.sqrt(h)

        return ParamVector(np.concatenate([w1, np.zeros(h), w2, np.zeros(c)]))


def make_quadratic(dimension: int, mu: float, L: float, seed: int) -> QuadraticModel:
    """Create a random strongly convex quadratic with a prescribed spectrum.

    :param dimension: The dimension d.
    :param mu: The smallest eigenvalue of A.
    :param L: The largest eigenvalue of A.
    :param seed: The random seed for the rotation and the linear term.
    :return: The quadratic model.
    """
    if not 0 < mu <= L:
        raise InvalidParam('need 0 < mu <= L, got mu=%g, L=%g' % (mu, L))

    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dimension, dimension)))
    eigenvalues = np.linspace(mu, L, dimension) if dimension > 1 else np.array([L])
    A = (q * eigenvalues) @ q.T

    return QuadraticModel(0.5 * (A + A.T), rng.standard_normal(dimension))


# Validated entry points #

def _check(model: ModelI, params: ParamVector, samples: SampleSet):
    if params.ndim != 1 or params.shape[0] != model.num_params:
        raise InvalidDimension('expected %d parameters, got %s' % (model.num_params, params.shape))

    if len(samples) == 0:
        raise EmptyBatch('no samples given')

    num_features = getattr(model, 'num_features', None)

    if num_features is not None and samples.num_features != num_features:
        raise InvalidDimension('expected %d features, got %d' % (num_features, samples.num_features))

    if model.num_classes is not None and (samples.labels.min() < 0 or samples.labels.max() >= model.num_classes):
        raise InvalidParam('labels must lie in [0, %d)' % model.num_classes)


def loss(model: ModelI, params: ParamVector, samples: SampleSet) -> float:
    """Evaluate the mean per-sample loss plus the ℓ2 penalty of a model.

    :param model: The model.
    :param params: The model parameters.
    :param samples: The (non-empty) samples to average over.
    :return: The loss.
    """
    _check(model, params, samples)

    return model.loss(params, samples.features, samples.labels)


def grad(model: ModelI, params: ParamVector, samples: SampleSet) -> ParamVector:
    """Evaluate the exact full-batch gradient of `loss()`.

    :param model: The model.
    :param params: The model parameters.
    :param samples: The (non-empty) samples to average over.
    :return: The gradient.
    """
    _check(model, params, samples)

    return model.grad(params, samples.features, samples.labels)


def stochastic_grad(model: ModelI, params: ParamVector, shard: ClientShard, batch_size: int,
                    rng: np.random.Generator) -> ParamVector:
    """Evaluate the gradient on a mini-batch drawn uniformly without replacement from a shard.

    A batch covering the whole shard is the full-batch gradient, bit for bit, and does not consume the rng.

    :param model: The model.
    :param params: The model parameters.
    :param shard: The client shard to sample from.
    :param batch_size: The number of samples in the batch.
    :param rng: The random stream for the batch draw.
    :return: The mini-batch gradient.
    """
    n = len(shard.samples)

    if batch_size < 1 or batch_size > n:
        raise InvalidBatch('batch size %d is not in [1, %d]' % (batch_size, n))

    if batch_size == n:
        return grad(model, params, shard.samples)

    batch = shard.samples[rng.choice(n, size=batch_size, replace=False)]

    return grad(model, params, batch)


def predict(model: ModelI, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Predict classes, breaking ties towards the lowest class index.

    :param model: A classification model.
    :param params: The model parameters.
    :param features: The n x p feature matrix.
    :return: The n predicted labels.
    """
    if model.num_classes is None:
        raise UnsupportedMetric('%r does not predict classes' % model)

    # argmax returns the first maximum, i.e. the lowest class index on ties.
    return np.argmax(model.scores(params, features), axis=1)


def accuracy(model: ModelI, params: ParamVector, samples: SampleSet) -> float:
    """
    :return: The fraction of samples whose predicted class equals their label.
    """
    if model.num_classes is None:
        raise UnsupportedMetric('accuracy is undefined for %r' % model)

    _check(model, params, samples)

    return float(np.mean(predict(model, params, samples.features) == samples.labels))


def estimate_smoothness(model: ModelI, samples: Optional[SampleSet] = None) -> SmoothnessInfo:
    """Derive the smoothness (L) and strong-convexity (mu) constants of a model.

    Quadratic: the extreme eigenvalues of A. MCLR: L = ¼·λ_max(XᵀX/n) + l2_coeff and mu = l2_coeff.

    :param model: An MCLR or quadratic model.
    :param samples: The samples the MCLR objective averages over (unused for the quadratic).
    :return: The constants.
    """
    if isinstance(model, QuadraticModel):
        mu, L = extreme_eigenvalues(model.A)

        return SmoothnessInfo(L=L, mu=mu)

    if isinstance(model, MCLRModel):
        if samples is None or len(samples) == 0:
            raise EmptyBatch('MCLR smoothness needs the samples it is evaluated on')

        X = samples.features
        gram = X.T @ X / len(samples)
        L = 0.25 * power_iteration(gram) + model.l2_coeff

        return SmoothnessInfo(L=L, mu=model.l2_coeff)

    raise NotEstimable('cannot estimate smoothness constants for %r; supply L manually' % model)


def init_params(model: ModelI, rng: np.random.Generator) -> ParamVector:
    return model.init_params(rng)
