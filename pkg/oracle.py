"""
Brute-force ground truth for small RBMs.

Partition functions and gradients are enumerated over the smaller layer, the
other one being marginalised analytically through its free energy, so the
enumeration budget binds on min(n_V, n_H). Chain diagnostics build the full
transition matrix over every joint state and are only meant for models with
a handful of units.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, logsumexp

import rbm
import settings
from estimators import GradientEstimate, bias_bound, data_statistics
from stopping_set import StoppingSet

logger = logging.getLogger(__name__)

# rows per enumeration chunk; fixed so reductions run in a fixed order
CHUNK = 4096


class BudgetExceeded(ValueError):
    pass


@dataclass
class ExactSummary:
    log_Z: float
    log_likelihood: float
    exact_gradient: GradientEstimate


@dataclass
class ChainDiagnostics:
    # index 0 is the collapsed stopping state, then the states outside S
    stationary: np.ndarray
    spectral_gap: float
    spectral_gap_full: float
    survival: np.ndarray
    tail_mass: float
    mean_tour_length: float
    epsilon: float
    restricted_radius: float
    log_Z: float
    log_Z_S: float
    outside_index: np.ndarray
    matrix: np.ndarray

    def length_distribution(self) -> np.ndarray:
        """p(xi = k) for k = 1..len(survival)-1; entry 0 is unused and set to 0."""
        pmf = np.zeros_like(self.survival)
        pmf[1:] = self.survival[:-1] - self.survival[1:]
        return pmf

    def length_biased_distribution(self) -> np.ndarray:
        pmf = self.length_distribution()
        k = np.arange(len(pmf))
        return k * pmf / self.mean_tour_length


def all_bits(n: int) -> np.ndarray:
    """Every n-bit vector, most significant bit first, in counting order."""
    return ((np.arange(2 ** n)[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8)


def _bits_chunks(n: int):
    total = 2 ** n
    shifts = np.arange(n - 1, -1, -1)
    for start in range(0, total, CHUNK):
        index = np.arange(start, min(start + CHUNK, total))
        yield ((index[:, None] >> shifts) & 1).astype(np.uint8)


def _check_budget(n: int, limit: int, what: str):
    if n > limit:
        raise BudgetExceeded(f"Enumerating {what} needs 2^{n} states; the limit is 2^{limit}")


def exact_partition(W: rbm.RbmParams, over: str = None) -> float:
    """
    log Z by enumerating one layer and marginalising the other.

    Args:
        W: model parameters.
        over: 'hidden' or 'visible' to force the enumerated layer; by default the smaller one.

    Raises:
        BudgetExceeded: If the enumerated layer has more than settings.ENUMERATION_MAX_HIDDEN units.
    """
    if over is None:
        over = 'hidden' if W.n_hidden <= W.n_visible else 'visible'
    if over == 'hidden':
        _check_budget(W.n_hidden, settings.ENUMERATION_MAX_HIDDEN, "hidden states")
        parts = [logsumexp(-rbm.hidden_free_energy(h, W)) for h in _bits_chunks(W.n_hidden)]
    elif over == 'visible':
        _check_budget(W.n_visible, settings.ENUMERATION_MAX_HIDDEN, "visible states")
        parts = [logsumexp(-rbm.visible_free_energy(v, W)) for v in _bits_chunks(W.n_visible)]
    else:
        raise ValueError(f"Unknown layer to enumerate: {over}")
    return float(logsumexp(parts))


def exact_log_likelihood(W: rbm.RbmParams, data, log_Z: float = None) -> float:
    data = np.atleast_2d(np.asarray(data, dtype=np.uint8))
    if log_Z is None:
        log_Z = exact_partition(W)
    return float(np.mean(-rbm.visible_free_energy(data, W)) - log_Z)


def model_statistics(W: rbm.RbmParams, log_Z: float = None) -> tuple:
    """E[v h^T], E[v], E[h] under the model, enumerating the smaller layer."""
    if log_Z is None:
        log_Z = exact_partition(W)
    vh = np.zeros((W.n_visible, W.n_hidden))
    v_mean = np.zeros(W.n_visible)
    h_mean = np.zeros(W.n_hidden)
    if W.n_hidden <= W.n_visible:
        _check_budget(W.n_hidden, settings.ENUMERATION_MAX_HIDDEN, "hidden states")
        for h in _bits_chunks(W.n_hidden):
            p = np.exp(-rbm.hidden_free_energy(h, W) - log_Z)
            ev = rbm.visible_conditional(h, W)
            vh += (ev * p[:, None]).T @ h
            v_mean += p @ ev
            h_mean += p @ h
    else:
        _check_budget(W.n_visible, settings.ENUMERATION_MAX_HIDDEN, "visible states")
        for v in _bits_chunks(W.n_visible):
            p = np.exp(-rbm.visible_free_energy(v, W) - log_Z)
            eh = rbm.hidden_conditional(v, W)
            vh += (v * p[:, None]).T @ eh
            v_mean += p @ v
            h_mean += p @ eh
    return vh, v_mean, h_mean


def exact_gradient(W: rbm.RbmParams, data) -> GradientEstimate:
    """Average log-likelihood gradient (ascent direction), computed exactly."""
    data = np.atleast_2d(np.asarray(data, dtype=np.uint8))
    pos_w, pos_v, pos_h = data_statistics(W, data)
    neg_w, neg_v, neg_h = model_statistics(W)
    return GradientEstimate(
        d_weights=pos_w - neg_w,
        d_visible_bias=pos_v - neg_v,
        d_hidden_bias=pos_h - neg_h,
        xi_hat=1.0,
        completed_fraction=1.0,
        normalized=True,
    )


def exact_summary(W: rbm.RbmParams, data) -> ExactSummary:
    log_Z = exact_partition(W)
    return ExactSummary(log_Z, exact_log_likelihood(W, data, log_Z), exact_gradient(W, data))


def all_states(W: rbm.RbmParams) -> rbm.JointState:
    """Every joint state; index = visible_index * 2^n_H + hidden_index."""
    n_h = W.n_hidden
    index = np.arange(2 ** (W.n_visible + n_h))
    return rbm.JointState(all_bits(W.n_visible)[index >> n_h], all_bits(n_h)[index & (2 ** n_h - 1)])


def joint_log_probabilities(W: rbm.RbmParams) -> np.ndarray:
    _check_budget(W.n_visible + W.n_hidden, settings.CHAIN_MAX_UNITS, "joint states")
    neg_energy = -rbm.energy(all_states(W), W)
    return neg_energy - logsumexp(neg_energy)


def _bit_log_probs(bits: np.ndarray, field: np.ndarray) -> np.ndarray:
    # log prod_i p_i^{b_i} (1 - p_i)^{1 - b_i}, rows of field against rows of bits
    bits = bits.astype(np.float64)
    return log_expit(field) @ bits.T + log_expit(-field) @ (1.0 - bits).T


def transition_matrix(W: rbm.RbmParams, scan: rbm.GibbsScan) -> np.ndarray:
    """Dense transition matrix of one Gibbs step over all joint states."""
    n_v, n_h = W.n_visible, W.n_hidden
    _check_budget(n_v + n_h, settings.CHAIN_MAX_UNITS, "joint states")
    visible_bits = all_bits(n_v)
    hidden_bits = all_bits(n_h)
    n_vs, n_hs = 2 ** n_v, 2 ** n_h

    if scan == rbm.GibbsScan.ALTERNATING_VH:
        # p(v'|h) as [h, v'] and p(h'|v') as [v', h']
        p_v = np.exp(_bit_log_probs(visible_bits, W.visible_bias + hidden_bits @ W.weights.T))
        p_h = np.exp(_bit_log_probs(hidden_bits, W.hidden_bias + visible_bits @ W.weights))
        block = p_v[:, :, None] * p_h[None, :, :]
        P = np.broadcast_to(block[None], (n_vs, n_hs, n_vs, n_hs))
        return P.reshape(n_vs * n_hs, n_vs * n_hs).copy()

    n_units = n_v + n_h
    states = all_states(W)
    bits = np.concatenate([states.visible, states.hidden], axis=1)
    cond = np.concatenate([
        rbm.visible_conditional(states.hidden, W),
        rbm.hidden_conditional(states.visible, W),
    ], axis=1)
    flip_prob = np.where(bits == 1, 1.0 - cond, cond) / n_units
    N = n_vs * n_hs
    P = np.zeros((N, N))
    rows = np.arange(N)
    for unit in range(n_units):
        target = rows ^ (1 << (n_units - 1 - unit))
        P[rows, target] = flip_prob[:, unit]
    P[rows, rows] = 1.0 - flip_prob.sum(axis=1)
    return P


def _second_eigenvalue_modulus(P: np.ndarray) -> float:
    if P.shape[0] < 2:
        return 0.0
    moduli = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
    return float(moduli[1])


def _stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    return np.linalg.solve(A, b)


def _in_set_mask(W: rbm.RbmParams, S: StoppingSet) -> np.ndarray:
    return S.contains_rows(all_bits(W.n_hidden))[np.arange(2 ** (W.n_visible + W.n_hidden)) & (2 ** W.n_hidden - 1)]


def collapsed_chain(W: rbm.RbmParams, S: StoppingSet, scan: rbm.GibbsScan,
                    exit_weighting: str = 'stationary', max_k: int = 100000) -> ChainDiagnostics:
    """
    Exact diagnostics of the chain with the stopping set merged into one state.

    Leaving the collapsed state means drawing y from the set with probability
    e^{-E(y)}/Z_S and taking one Gibbs step from y; entering it means any step
    that lands in the set.

    Args:
        W: model parameters.
        S: stopping set (any hidden vectors, paired with all visible vectors).
        scan: Gibbs kernel.
        exit_weighting: 'stationary' as defined; 'uniform' draws y uniformly from the
            set instead and exists only as a broken variant for negative controls.
        max_k: cap on the number of survival entries computed explicitly.

    Raises:
        BudgetExceeded: If n_V + n_H > settings.CHAIN_MAX_UNITS.
    """
    P = transition_matrix(W, scan)
    log_p = joint_log_probabilities(W)
    log_Z = exact_partition(W)
    in_set = _in_set_mask(W, S)
    outside = np.flatnonzero(~in_set)
    gap_full = 1.0 - _second_eigenvalue_modulus(P)
    log_Z_S = float(logsumexp(log_p[in_set]) + log_Z)

    if len(outside) == 0:
        logger.warning("Stopping set is the whole state space; the collapsed chain has a single state")
        return ChainDiagnostics(
            stationary=np.ones(1), spectral_gap=1.0, spectral_gap_full=gap_full,
            survival=np.array([1.0, 0.0]), tail_mass=0.0, mean_tour_length=1.0,
            epsilon=1.0, restricted_radius=0.0, log_Z=log_Z, log_Z_S=log_Z_S,
            outside_index=outside, matrix=np.ones((1, 1)),
        )

    if exit_weighting == 'stationary':
        entry = np.exp(log_p[in_set] - logsumexp(log_p[in_set]))
    elif exit_weighting == 'uniform':
        entry = np.full(in_set.sum(), 1.0 / in_set.sum())
    else:
        raise ValueError(f"Unknown exit weighting: {exit_weighting}")

    from_set = P[in_set]
    exit_dist = entry @ from_set[:, outside]
    Q = P[np.ix_(outside, outside)]
    collapsed = np.zeros((len(outside) + 1, len(outside) + 1))
    collapsed[0, 0] = entry @ from_set[:, in_set].sum(axis=1)
    collapsed[0, 1:] = exit_dist
    collapsed[1:, 0] = P[np.ix_(outside, np.flatnonzero(in_set))].sum(axis=1)
    collapsed[1:, 1:] = Q

    stationary = _stationary(collapsed)
    gap = 1.0 - _second_eigenvalue_modulus(collapsed)
    radius = float(np.max(np.abs(np.linalg.eigvals(Q))))
    epsilon = float(collapsed[1:, 0].min())

    # Kac mean: sum_k p(xi > k) = 1 + q0 (I - Q)^{-1} 1
    mean_length = 1.0 + float(exit_dist @ np.linalg.solve(np.eye(len(outside)) - Q, np.ones(len(outside))))

    k_max = min(max_k, int(math.ceil(50 * mean_length)))
    survival = [1.0]
    w = exit_dist.copy()
    for _ in range(k_max):
        survival.append(float(w.sum()))
        if survival[-1] < 1e-300:
            break
        w = w @ Q
    survival = np.array(survival)
    tail_mass = 0.0
    if survival[-1] > 0 and survival[-2] > 0:
        ratio = min(survival[-1] / survival[-2], 1.0 - 1e-12)
        tail_mass = survival[-1] * ratio / (1.0 - ratio)

    return ChainDiagnostics(
        stationary=stationary, spectral_gap=gap, spectral_gap_full=gap_full,
        survival=survival, tail_mass=tail_mass, mean_tour_length=mean_length,
        epsilon=epsilon, restricted_radius=radius, log_Z=log_Z, log_Z_S=log_Z_S,
        outside_index=outside, matrix=collapsed,
    )


def exact_mean_tour_length(W: rbm.RbmParams, S: StoppingSet, scan: rbm.GibbsScan) -> float:
    return collapsed_chain(W, S, scan).mean_tour_length


def one_step_into_set(W: rbm.RbmParams, S: StoppingSet, scan: rbm.GibbsScan) -> np.ndarray:
    """Probability that one step from each state outside S lands in S."""
    P = transition_matrix(W, scan)
    in_set = _in_set_mask(W, S)
    return P[np.ix_(~in_set, in_set)].sum(axis=1)


def exact_f(W: rbm.RbmParams, f) -> np.ndarray:
    """F(W, f) = sum_x e^{-E(x)} f(x); f maps a batch of states to an (N, d) array."""
    states = all_states(W)
    log_p = joint_log_probabilities(W)
    log_Z = exact_partition(W)
    values = np.asarray(f(states), dtype=np.float64).reshape(len(log_p), -1)
    return np.exp(log_Z) * (np.exp(log_p) @ values)


def exact_bias_bound(diagnostics: ChainDiagnostics, B: float, K: int) -> float:
    tail = np.append(diagnostics.survival, 0.0)
    return bias_bound(B, diagnostics.log_Z_S, tail, K, diagnostics.tail_mass)
