"""The FedSSO server: lighthouse gradient estimation, the clipped BFGS update with periodic reset, the two inverse
strategies, the quasi-Newton global step and the theory-derived step-size schedules.

The server never sees client data. Its gradient surrogate is the averaged local gradient recovered from the
aggregated model, ĝ = (x_k − v_k)/(ατ), i.e. the true gradient at some "lighthouse" point x̂_k.
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from fedsim.base import InverseMode, ParamVector
from fedsim.errors import InvalidDimension, InvalidParam, SingularHessian
from fedsim.linalg import symmetrize

logger = logging.getLogger(__name__)

# Pairs with ‖ŷ‖ or ‖s‖ at or below this are not used to update the approximate Hessian.
SKIP_THRESHOLD = 1e-12


class UpdateEvent(str, Enum):
    """What the last BFGS update did to the approximate Hessian."""
    INITIAL = 'initial'
    RESET = 'reset'
    SKIPPED = 'skipped'
    UPDATED = 'updated'
    CLIPPED = 'clipped'
    FALLBACK = 'fallback'


@dataclass(frozen=True)
class BfgsState:
    """Server-side state of the approximate Hessian B̂_k.

    `rounds_since_reset` counts the server rounds since B̂ was last set to the identity; the update that brings it
    to `reset_period` resets B̂ instead (the k mod R rule). In dual-inverse mode `H_hat` tracks B̂⁻¹.

    A positive `cautious_eps` makes the update cautious: pairs with ŷᵀs < ε‖s‖² are skipped, and so is any update
    that would leave an eigenvalue of B̂ below ε. Zero gives the plain clipped update.
    """
    B_hat: np.ndarray
    lambda_lo: float = 1e-4
    lambda_hi: float = 9999.0
    reset_period: int = 200
    rounds_since_reset: int = 0
    inverse_mode: InverseMode = InverseMode.SPD_SOLVE
    H_hat: Optional[np.ndarray] = None
    prev_x: Optional[ParamVector] = None
    prev_ghat: Optional[ParamVector] = None
    last_event: UpdateEvent = UpdateEvent.INITIAL
    cautious_eps: float = 0.0

    def __post_init__(self):
        if not 0 < self.lambda_lo < self.lambda_hi:
            raise InvalidParam('need 0 < lambda_lo < lambda_hi, got %g, %g' % (self.lambda_lo, self.lambda_hi))

        if self.reset_period < 1:
            raise InvalidParam('reset period must be at least 1, got %d' % self.reset_period)

        if not 0 <= self.cautious_eps < 1:
            raise InvalidParam('cautious_eps must lie in [0, 1), got %g' % self.cautious_eps)

        if self.inverse_mode == InverseMode.DUAL_INVERSE and self.H_hat is None:
            try:
                H = cho_solve(cho_factor(self.B_hat), np.eye(self.dimension))
            except LinAlgError:
                raise SingularHessian('B_hat is not positive definite')

            object.__setattr__(self, 'H_hat', symmetrize(H))

    @property
    def dimension(self) -> int:
        return self.B_hat.shape[0]

    @property
    def enforcement_triggered(self) -> bool:
        """Whether the last update had to enforce positive definiteness (curvature clipping or identity fallback)."""
        return self.last_event in (UpdateEvent.CLIPPED, UpdateEvent.FALLBACK)

    @staticmethod
    def identity(dimension: int, lambda_lo: float = 1e-4, lambda_hi: float = 9999.0, reset_period: int = 200,
                 inverse_mode: InverseMode = InverseMode.SPD_SOLVE, cautious_eps: float = 0.0) -> 'BfgsState':
        """Create the initial state B̂_0 = I."""
        eye = np.eye(dimension)

        return BfgsState(B_hat=eye, lambda_lo=lambda_lo, lambda_hi=lambda_hi, reset_period=reset_period,
                         inverse_mode=InverseMode(inverse_mode), cautious_eps=cautious_eps,
                         H_hat=eye.copy() if InverseMode(inverse_mode) == InverseMode.DUAL_INVERSE else None)

    def trace_bound(self) -> float:
        """The bound d + rounds_since_reset·Λ on trace(B̂)."""
        return self.dimension + self.rounds_since_reset * self.lambda_hi


def lighthouse_grad(x_k: ParamVector, v_k: ParamVector, alpha: float, tau: int) -> ParamVector:
    """Estimate the global gradient from one round of local training, ĝ = (x_k − v_k)/(ατ).

    :param x_k: The global model broadcast at the start of the round.
    :param v_k: The weighted average of the clients' models after τ local steps.
    :param alpha: The local step size used in the round.
    :param tau: The number of local steps.
    :return: The averaged (lighthouse) gradient.
    """
    if alpha <= 0 or tau < 1:
        raise InvalidParam('need alpha > 0 and tau >= 1, got %g, %d' % (alpha, tau))

    if alpha * tau <= 1e-300:
        raise InvalidParam('alpha * tau underflows (%g)' % (alpha * tau))

    if x_k.shape != v_k.shape:
        raise InvalidDimension('x_k and v_k differ in shape: %s vs %s' % (x_k.shape, v_k.shape))

    return ParamVector((x_k - v_k) / (alpha * tau))


def _clip_curvature(y_hat: np.ndarray, s: np.ndarray, lambda_lo: float, lambda_hi: float) -> Tuple[float, bool]:
    cur = float(y_hat @ s)
    y_norm2 = float(y_hat @ y_hat)

    if cur > 0 and lambda_lo < y_norm2 / cur < lambda_hi:
        return cur, False

    return 2.0 / (lambda_lo + lambda_hi) * y_norm2, True


def enforce_curvature(y_hat: ParamVector, s: ParamVector, lambda_lo: float, lambda_hi: float) -> float:
    """Compute the curvature used by the BFGS update, forcing it into the safe range.

    The raw curvature ŷᵀs is kept when λ < ‖ŷ‖²/(ŷᵀs) < Λ; otherwise it is replaced by 2‖ŷ‖²/(λ + Λ).

    :param y_hat: The lighthouse-gradient difference ŷ (non-zero).
    :param s: The iterate difference s.
    :param lambda_lo: The lower bound λ.
    :param lambda_hi: The upper bound Λ.
    :return: A strictly positive curvature value.
    """
    return _clip_curvature(y_hat, s, lambda_lo, lambda_hi)[0]


def _factor(B: np.ndarray):
    return cho_factor(B, check_finite=True)


def _is_positive_definite(B: np.ndarray) -> bool:
    try:
        _factor(B)
    except (LinAlgError, ValueError):
        return False

    return True


def bfgs_update(state: BfgsState, y_hat: ParamVector, s: ParamVector, k: int) -> BfgsState:
    """Generate B̂_k from B̂_{k−1} with the clipped BFGS update.

    B̂ ← B̂ + ŷŷᵀ/cur − (B̂s)(B̂s)ᵀ/(sᵀB̂s), followed by symmetrisation. The update resets B̂ to the identity every
    `reset_period` rounds, skips degenerate pairs and falls back to the identity should the result fail to factorise.
    In cautious mode it also skips pairs whose curvature along s is below ε, and updates whose smallest eigenvalue
    would fall below ε.

    :param state: The current state.
    :param y_hat: ŷ_{k−1} = ĝ(x̂_k) − ĝ(x̂_{k−1}).
    :param s: s_{k−1} = x_k − x_{k−1}.
    :param k: The server round, used for diagnostics.
    :return: The updated state.
    """
    d = state.dimension

    if y_hat.shape != (d,) or s.shape != (d,):
        raise InvalidDimension('y_hat and s must have length %d' % d)

    rounds = state.rounds_since_reset + 1

    if rounds >= state.reset_period:
        logger.debug('Round %d: resetting the approximate Hessian.', k)

        return replace(state, B_hat=np.eye(d), H_hat=None if state.H_hat is None else np.eye(d),
                       rounds_since_reset=0, last_event=UpdateEvent.RESET)

    B = state.B_hat
    Bs = B @ s
    sBs = float(s @ Bs)

    if (np.linalg.norm(y_hat) <= SKIP_THRESHOLD or np.linalg.norm(s) <= SKIP_THRESHOLD
            or sBs <= 1e-14 * float(s @ s)):
        logger.debug('Round %d: skipping a degenerate curvature pair.', k)

        return replace(state, rounds_since_reset=rounds, last_event=UpdateEvent.SKIPPED)

    eps = state.cautious_eps

    if eps > 0 and float(y_hat @ s) < eps * float(s @ s):
        logger.debug('Round %d: skipping a pair with curvature below %g.', k, eps)

        return replace(state, rounds_since_reset=rounds, last_event=UpdateEvent.SKIPPED)

    cur, clipped = _clip_curvature(y_hat, s, state.lambda_lo, state.lambda_hi)
    B_new = symmetrize(B + np.outer(y_hat, y_hat) / cur - np.outer(Bs, Bs) / sBs)

    try:
        _factor(B_new - eps * np.eye(d) if eps > 0 else B_new)
    except (LinAlgError, ValueError):
        if eps > 0 and _is_positive_definite(B_new):
            logger.debug('Round %d: skipping an update that would take B_hat below %g.', k, eps)

            return replace(state, rounds_since_reset=rounds, last_event=UpdateEvent.SKIPPED)

        logger.warning('Round %d: updated Hessian is not positive definite, falling back to the identity.', k)

        return replace(state, B_hat=np.eye(d), H_hat=None if state.H_hat is None else np.eye(d),
                       rounds_since_reset=rounds, last_event=UpdateEvent.FALLBACK)

    if clipped:
        logger.debug('Round %d: curvature clipped to %g.', k, cur)

    H_new = None

    if state.H_hat is not None:
        H_new = _dual_update(state.H_hat, y_hat, s, cur)

    return replace(state, B_hat=B_new, H_hat=H_new, rounds_since_reset=rounds,
                   last_event=UpdateEvent.CLIPPED if clipped else UpdateEvent.UPDATED)


def _dual_update(H: np.ndarray, y_hat: np.ndarray, s: np.ndarray, cur: float) -> np.ndarray:
    """Update H = B̂⁻¹ so that it stays the exact inverse of the (possibly clipped) B̂ update.

    Woodbury on the rank-two update gives
    H⁺ = H − (Hŷsᵀ + sŷᵀH)/(ŷᵀs) + (cur + ŷᵀHŷ)/(ŷᵀs)²·ssᵀ,
    which is the classic dual (DFP-form) BFGS inverse update when cur = ŷᵀs.
    """
    ys = float(y_hat @ s)
    Hy = H @ y_hat
    yHy = float(y_hat @ Hy)

    H_new = H - (np.outer(Hy, s) + np.outer(s, Hy)) / ys + (cur + yHy) / (ys * ys) * np.outer(s, s)

    return symmetrize(H_new)


def apply_inverse(state: BfgsState, g: ParamVector) -> ParamVector:
    """Compute B̂⁻¹g.

    :param state: The BFGS state.
    :param g: The vector to apply the inverse to.
    :return: B̂⁻¹g, by Cholesky factor-and-solve or via the maintained inverse, depending on the state's mode.
    """
    if g.shape != (state.dimension,):
        raise InvalidDimension('expected a vector of length %d' % state.dimension)

    if state.inverse_mode == InverseMode.DUAL_INVERSE:
        return ParamVector(state.H_hat @ g)

    try:
        return ParamVector(cho_solve(_factor(state.B_hat), g))
    except (LinAlgError, ValueError) as e:
        raise SingularHessian('cannot factorise the approximate Hessian: %s' % e)


def server_step(x_k: ParamVector, v_k: ParamVector, state: BfgsState, eta: float, alpha: float,
                tau: int) -> ParamVector:
    """Take the server's quasi-Newton step, x_{k+1} = x_k − η·B̂⁻¹ĝ.

    This equals the affine form (I − η/(ατ)·B̂⁻¹)x_k + η/(ατ)·B̂⁻¹v_k.

    :param x_k: The current global model.
    :param v_k: The aggregated client models.
    :param state: The BFGS state holding B̂_k.
    :param eta: The global step size η.
    :param alpha: The local step size α of the round.
    :param tau: The number of local steps τ.
    :return: The next global model.
    """
    if eta <= 0:
        raise InvalidParam('eta must be positive, got %g' % eta)

    return ParamVector(x_k - eta * apply_inverse(state, lighthouse_grad(x_k, v_k, alpha, tau)))


# Step-size schedules #

@dataclass(frozen=True)
class ScheduleParams:
    L: float
    mu: float
    kappa_lo: float = 0.1
    kappa_hi: float = 10.0
    tau: int = 1
    N: int = 1

    def __post_init__(self):
        if not 0 < self.kappa_lo <= self.kappa_hi:
            raise InvalidParam('need 0 < kappa_lo <= kappa_hi, got %g, %g' % (self.kappa_lo, self.kappa_hi))

        if not 0 < self.mu <= self.L:
            raise InvalidParam('need 0 < mu <= L, got mu=%g, L=%g' % (self.mu, self.L))

    @property
    def gamma(self) -> float:
        return 1.0 / min(self.N * self.L / (2 * self.kappa_lo * self.mu), self.mu / (2 * self.L))


def schedule_theory_convex(k: int, p: ScheduleParams) -> Tuple[float, float]:
    """Step sizes for strongly convex objectives, giving an O(1/k) rate.

    η_k = (2/μ)/(k + γ) and α_k = η_k·Lκ̄²/(μτκ̲) with γ = 1/min{NL/(2κ̲μ), μ/(2L)}.

    :param k: The round, starting at 1.
    :param p: The problem constants.
    :return: The pair (alpha_k, eta_k).
    """
    if k < 1:
        raise InvalidParam('rounds are counted from 1, got %d' % k)

    eta = 2.0 / p.mu / (k + p.gamma)
    alpha = eta * p.L * p.kappa_hi ** 2 / (p.mu * p.tau * p.kappa_lo)

    return alpha, eta


def schedule_theory_nonconvex(k: int, L: float, tau: int) -> Tuple[float, float]:
    """Step sizes for non-convex objectives: α_k = 1/(2√6·τLk) and η_k = 1/√k."""
    if k < 1:
        raise InvalidParam('rounds are counted from 1, got %d' % k)

    return 1.0 / (2 * math.sqrt(6) * tau * L * k), 1.0 / math.sqrt(k)
