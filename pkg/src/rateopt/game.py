"""Payoffs and player primitives for the constrained-training games.

The Lagrangian family keeps multipliers in the nonnegative L1 ball of
radius R. The proxy family keeps a distribution over (objective, constraint
1, ..., constraint m) and plays the stationary distribution of a
column-stochastic matrix updated multiplicatively (swap-regret player).
"""

from __future__ import annotations

import logging
import math

import numpy as np

log = logging.getLogger(__name__)

POWER_ITERATION_CAP = 100_000
POWER_ITERATION_TOL = 1e-10
DEFAULT_DELTA_CAP = 1e3


class StationaryDistributionError(RuntimeError):
    pass


def _vec(x, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    return x


def lagrangian_value(g0, g, lam):
    """``g0 + <lam, g>`` and its gradient w.r.t. ``lam`` (which is ``g``)."""
    g, lam = _vec(g, "g"), _vec(lam, "lambda")
    if g.shape != lam.shape:
        raise ValueError(f"{g.size} constraints but {lam.size} multipliers")
    return float(g0 + lam @ g), g.copy()


def proxy_lagrangian_values(g0, g_exact, g_proxy, lam):
    """``(L_theta, L_lambda)`` for a simplex vector ``lam`` of length m+1.

    The θ-player sees the proxies, the λ-player the exact constraints; the
    objective weight ``lam[0]`` enters only ``L_theta``.
    """
    g_exact, g_proxy, lam = _vec(g_exact, "g_exact"), _vec(g_proxy, "g_proxy"), _vec(lam, "lambda")
    if g_exact.shape != g_proxy.shape or lam.size != g_exact.size + 1:
        raise ValueError("need m exact values, m proxies and m+1 weights")
    return float(lam[0] * g0 + lam[1:] @ g_proxy), float(lam[1:] @ g_exact)


def proxy_lambda_gradient(g_exact):
    """Gradient of ``L_lambda`` w.r.t. the simplex vector: ``(0, g_1, ..., g_m)``."""
    return np.concatenate([[0.0], _vec(g_exact, "g_exact")])


def project_l1_ball_nonneg(v, R):
    """Euclidean projection onto ``{u >= 0, sum(u) <= R}``."""
    if not R > 0:
        raise ValueError("radius must be positive")
    u = np.maximum(_vec(v, "v"), 0.0)
    # rounding slack keeps the projection exactly idempotent
    if u.sum() <= R * (1.0 + 1e-12):
        return u
    # sorted-threshold projection onto the simplex of radius R
    s = np.sort(u)[::-1]
    cums = np.cumsum(s) - R
    k = np.arange(1, s.size + 1)
    rho = np.flatnonzero(s - cums / k > 0)[-1]
    shift = cums[rho] / (rho + 1.0)
    return np.maximum(u - shift, 0.0)


def project_euclidean_ball(theta, B):
    if not B > 0:
        raise ValueError("radius must be positive")
    theta = np.array(theta, dtype=float)
    norm = float(np.linalg.norm(theta))
    if norm <= B:
        return theta
    return theta * (B / norm)


def uniform_swap_matrix(size):
    return np.full((size, size), 1.0 / size)


def stationary_distribution(M, tol=POWER_ITERATION_TOL, start=None, cap=POWER_ITERATION_CAP):
    """Fixed point ``lam = M @ lam`` on the simplex, by power iteration.

    ``start`` warm-starts the iteration (defaults to uniform). The power
    is doubled every round (``lam <- M^(2^k) lam``), so ``cap`` bounds the
    total number of matrix-vector equivalents. Raises
    :class:`StationaryDistributionError` when the residual ``|M lam - lam|``
    does not drop below ``tol``.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n):
        raise ValueError("swap matrix must be square")
    lam = np.full(n, 1.0 / n) if start is None else np.array(start, dtype=float)
    P = M
    steps, power = 0, 1
    while True:
        if np.abs(M @ lam - lam).max() <= tol:
            return lam
        if steps >= cap:
            break
        lam = P @ lam
        total = lam.sum()
        if not np.isfinite(total) or total <= 0:
            break
        lam /= total
        steps += power
        power *= 2
        P = P @ P
    raise StationaryDistributionError(f"power iteration did not converge within {cap} steps")


def clamp_delta(delta, cap=DEFAULT_DELTA_CAP):
    """Clip to ``[-cap, cap]``; returns ``(clipped, was_clipped)``."""
    delta = _vec(delta, "delta")
    if np.abs(delta).max(initial=0.0) <= cap:
        return delta, False
    return np.clip(delta, -cap, cap), True


def swap_update(M, delta, lam, eta):
    """``M * exp(eta * delta lam^T)`` elementwise, then normalize each column."""
    M = np.asarray(M, dtype=float)
    delta, lam = _vec(delta, "delta"), _vec(lam, "lambda")
    if delta.size != M.shape[0] or lam.size != M.shape[0]:
        raise ValueError("delta and lambda must match the matrix size")
    with np.errstate(over="ignore", invalid="ignore"):
        factor = np.exp(eta * np.outer(delta, lam))
        out = M * factor
        out /= out.sum(axis=0, keepdims=True)
    if not np.isfinite(out.sum()) or not out.min() > 0:
        raise FloatingPointError("swap update overflowed; clamp the gradient")
    return out


def external_regret_update_lambda(lam, delta, eta, R):
    """Projected gradient ascent step on the L1 ball of radius ``R``."""
    lam, delta = _vec(lam, "lambda"), _vec(delta, "delta")
    if lam.shape != delta.shape:
        raise ValueError("lambda and delta lengths differ")
    return project_l1_ball_nonneg(lam + eta * delta, R)


def swap_step_size(num_players, T, delta_bound):
    """Step for the swap player over ``num_players = m+1`` coordinates."""
    k = num_players
    if k < 2:
        return 0.0
    return math.sqrt(k * math.log(k) / (T * delta_bound ** 2))


def swap_regret_bound(num_players, T, delta_bound):
    k = num_players
    if k < 2:
        return 0.0
    return 2.0 * delta_bound * math.sqrt(k * math.log(k) / T)


def external_step_size(radius, T, grad_bound):
    return radius / (grad_bound * math.sqrt(2.0 * T))


def external_regret_bound(radius, T, grad_bound):
    return radius * grad_bound * math.sqrt(2.0 / T)


def swap_regret(lams, gains):
    """Average swap regret of a played sequence against gain vectors.

    ``sum_i max_j sum_t lam_t[i] * gain_t[j] - sum_t <lam_t, gain_t>``,
    divided by T: the best gain of rerouting every coordinate's mass to
    a single fixed coordinate.
    """
    lams, gains = np.asarray(lams, dtype=float), np.asarray(gains, dtype=float)
    T = lams.shape[0]
    rerouted = lams.T @ gains  # [i, j] = sum_t lam_t[i] gain_t[j]
    played = float(np.sum(lams * gains))
    return (float(np.sum(rerouted.max(axis=1))) - played) / T


def external_regret_l1(lams, gains, radius):
    """Average regret of a sequence in the L1 ball against the best fixed point."""
    lams, gains = np.asarray(lams, dtype=float), np.asarray(gains, dtype=float)
    T = lams.shape[0]
    total = gains.sum(axis=0)
    best = radius * max(0.0, float(total.max()))
    return (best - float(np.sum(lams * gains))) / T


class SwapPlayer:
    """Stateful wrapper: play the stationary distribution, then update."""

    def __init__(self, size, eta, delta_cap=DEFAULT_DELTA_CAP):
        self.M = uniform_swap_matrix(size)
        self.eta = eta
        self.delta_cap = delta_cap
        self.clamp_events = 0
        self._lam = None

    def play(self):
        self._lam = stationary_distribution(self.M, start=self._lam)
        return self._lam.copy()

    def update(self, delta):
        delta, clipped = clamp_delta(delta, self.delta_cap)
        if clipped:
            self.clamp_events += 1
            log.info("swap player gradient clamped to +-%g", self.delta_cap)
        self.M = swap_update(self.M, delta, self._lam, self.eta)
