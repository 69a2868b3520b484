"""Small dense linear-algebra helpers shared by the smoothness estimator, the BFGS server and the verifier."""
import logging
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)


def power_iteration(matrix: np.ndarray, tol: float = 1e-8, max_iter: int = 200000, seed: int = 0) -> float:
    """Estimate the largest eigenvalue of a symmetric positive semi-definite matrix.

    Iteration stops once the eigen-residual ‖Av − λv‖ drops below `tol`·|λ|, which for a symmetric matrix bounds the
    eigenvalue error by the same amount.

    :param matrix: A symmetric matrix whose dominant eigenvalue is non-negative.
    :param tol: The relative residual tolerance.
    :param max_iter: The iteration budget.
    :param seed: Seed for the (random) start vector.
    :return: The dominant eigenvalue.
    """
    d = matrix.shape[0]

    if not np.any(matrix):
        return 0.0

    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    eigenvalue = 0.0

    for _ in range(max_iter):
        w = matrix @ v
        eigenvalue = float(v @ w)
        residual = np.linalg.norm(w - eigenvalue * v)

        if residual <= tol * max(abs(eigenvalue), np.finfo(float).tiny):
            break

        v = w / np.linalg.norm(w)
    else:
        logger.warning('Power iteration did not converge after %d iterations (tol=%g).', max_iter, tol)

    return eigenvalue


def extreme_eigenvalues(matrix: np.ndarray, tol: float = 1e-8) -> Tuple[float, float]:
    """Estimate the smallest and largest eigenvalues of a symmetric positive semi-definite matrix.

    The smallest eigenvalue comes from power iteration on the shifted matrix λ_max·I − A.

    :param matrix: The symmetric matrix.
    :param tol: The relative residual tolerance of each power iteration.
    :return: The pair (min eigenvalue, max eigenvalue).
    """
    largest = power_iteration(matrix, tol=tol)
    shifted = largest * np.eye(matrix.shape[0]) - matrix
    gap = power_iteration(shifted, tol=tol, seed=1)

    return largest - gap, largest


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)
