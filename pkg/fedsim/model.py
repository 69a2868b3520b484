from typing import Optional

import numpy as np

from fedsim.base import ParamVector


class ModelI:
    """An interface describing the guaranteed functionality of a model (objective) object.

    Models work on flat parameter vectors and dense feature matrices. Input validation is done by the functions in
    `fedsim.model_zoo`, so implementations may assume well-formed inputs.
    """

    @property
    def num_params(self) -> int:
        """
        :return: The parameter dimension d.
        """
        raise NotImplementedError

    @property
    def num_classes(self) -> Optional[int]:
        """
        :return: The number of classes for classification models, None otherwise.
        """
        raise NotImplementedError

    def loss(self, params: ParamVector, features: np.ndarray, labels: np.ndarray) -> float:
        """Evaluate the mean per-sample loss plus any regularisation.

        :param params: The model parameters.
        :param features: The n x p feature matrix.
        :param labels: The n class labels.
        :return: The loss.
        """
        raise NotImplementedError

    def grad(self, params: ParamVector, features: np.ndarray, labels: np.ndarray) -> ParamVector:
        """Evaluate the exact gradient of `loss()`.

        :param params: The model parameters.
        :param features: The n x p feature matrix.
        :param labels: The n class labels.
        :return: The gradient, a vector of length d.
        """
        raise NotImplementedError

    def scores(self, params: ParamVector, features: np.ndarray) -> np.ndarray:
        """Compute class scores (logits) for each sample.

        :param params: The model parameters.
        :param features: The n x p feature matrix.
        :return: An n x num_classes matrix of scores.
        """
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """Create the starting point of a training run.

        :param rng: The random stream to draw from, if the model needs one.
        :return: The initial parameter vector.
        """
        raise NotImplementedError
