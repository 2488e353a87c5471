"""
Estimators built on tours, plus the contrastive-divergence baselines.

Every gradient estimator returns an ascent direction of the average
log-likelihood, data statistics minus model statistics, so the trainer
always adds it.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

import rbm
import tours
from stopping_set import StoppingSet

logger = logging.getLogger(__name__)


class NoCompletedTours(RuntimeError):
    pass


@dataclass
class GradientEstimate:
    d_weights: np.ndarray
    d_visible_bias: np.ndarray
    d_hidden_bias: np.ndarray
    xi_hat: Optional[float] = None
    completed_fraction: Optional[float] = None
    normalized: bool = True
    completed_tours: int = 0
    capped_tours: int = 0
    log_bias_bound: Optional[float] = None

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_weights.ravel(), self.d_visible_bias, self.d_hidden_bias])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat()).all())

    def cosine(self, other: 'GradientEstimate') -> float:
        a, b = self.flat(), other.flat()
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    @classmethod
    def mean(cls, estimates: list) -> 'GradientEstimate':
        return cls(
            d_weights=np.mean([e.d_weights for e in estimates], axis=0),
            d_visible_bias=np.mean([e.d_visible_bias for e in estimates], axis=0),
            d_hidden_bias=np.mean([e.d_hidden_bias for e in estimates], axis=0),
            normalized=all(e.normalized for e in estimates),
        )


@dataclass
class FHatResult:
    value: np.ndarray
    completed_tours: int
    log_value: Optional[np.ndarray] = None
    bias_bound: Optional[float] = None


@dataclass
class ZEstimate:
    log_Z_hat: float
    log_Z_S: float
    xi_hat: float
    xi_stderr: float
    log_ci: tuple
    completed_tours: int
    capped_tours: int


@dataclass
class PersistentChains:
    state: Optional[rbm.JointState] = None

    @property
    def n_chains(self) -> int:
        return 0 if self.state is None else self.state.visible.shape[0]


@dataclass
class InspectionReport:
    plain: pd.DataFrame
    length_biased: pd.DataFrame
    plain_mean: float
    length_biased_mean: float
    completed_tours: int


def log_bias_bound(B: float, log_Z_S: float, survival: np.ndarray, K: int, tail_mass: float = 0.0) -> float:
    """
    Log of a bound on |E[F_hat] - F| for tours truncated at K steps.

    B * Z_S * (sum_{k>=K} p(xi > k) + 2K p(xi > K)).

    Since E[xi] = sum_{k>=0} p(xi > k), the sum equals E[xi] - sum_{k<K} p(xi > k).
    With p = p(xi > K) and every state's |f| at most B, per tour:
      - dropped tours: E[|sum f| 1{xi > K}] <= B E[xi 1{xi > K}]
        = B (sum_{k>=K} p(xi > k) + K p);
      - F_hat averages over completed tours only, so it divides by 1 - p instead of 1.
        That adds E[sum f 1{xi <= K}] p / (1 - p) <= B K (1 - p) p / (1 - p) = B K p.
    Their sum times Z_S is the bound above. It is looser than
    B * Z_S * (E[xi] - sum_{k<K} p(xi > k)) by the 2K p term.

    ``survival[k]`` is p(xi > k) for k = 0..len-1 and ``tail_mass`` the sum beyond it.
    Kept in log space since Z_S overflows for large models.
    """
    survival = np.asarray(survival, dtype=np.float64)
    tail = float(survival[K:].sum()) + tail_mass
    beyond = float(survival[K]) if K < len(survival) else 0.0
    with np.errstate(divide='ignore'):
        return float(np.log(B) + log_Z_S + np.log(tail + 2 * K * beyond))


def bias_bound(B: float, log_Z_S: float, survival: np.ndarray, K: int, tail_mass: float = 0.0) -> float:
    return float(np.exp(log_bias_bound(B, log_Z_S, survival, K, tail_mass)))


def empirical_log_bias_bound(records: list, S: StoppingSet, B: float, cfg: tours.TourConfig) -> Optional[float]:
    """
    log_bias_bound from the empirical survival of fixed-K tours.

    Past K the survival is extrapolated with the fitted geometric tail; None when some
    tours were truncated and no tail fit is possible, or for dynamic tours.
    """
    if cfg.is_dynamic or B is None or not records:
        return None
    tail = tours.summarize(records)
    # zero past the longest observed tour
    survival = np.zeros(cfg.k_max + 1)
    observed = tail.survival[:cfg.k_max + 1]
    survival[:len(observed)] = observed
    beyond = survival[cfg.k_max]
    if beyond == 0:
        return log_bias_bound(B, S.log_Z_S, survival, cfg.k_max)
    fit = tours.fit_geometric_tail(records)
    if fit is None:
        return None
    alpha = fit[0]
    return log_bias_bound(B, S.log_Z_S, survival, cfg.k_max, beyond * alpha / (1 - alpha))


def data_statistics(W: rbm.RbmParams, data) -> tuple:
    """(1/N) sum v_n E[h|v_n]^T, mean v_n, mean E[h|v_n]."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    eh = rbm.hidden_conditional(data, W)
    return data.T @ eh / data.shape[0], data.mean(axis=0), eh.mean(axis=0)


def _completed(records: list) -> list:
    completed = [r for r in records if r.completed]
    if not completed:
        raise NoCompletedTours(f"None of {len(records)} tours returned to the stopping set")
    return completed


def f_hat(records: list, S: StoppingSet, f: tours.StatisticSpec, W: rbm.RbmParams = None,
          cfg: tours.TourConfig = None) -> FHatResult:
    """
    Z_S * (sum of f over the states of completed tours) / (number of completed tours).

    Truncated tours in ``records`` are ignored for the value. With W and a fixed-K cfg a
    bias bound is estimated from the empirical survival, extrapolating past K with the
    fitted geometric tail when some tours were truncated.

    Raises:
        NoCompletedTours: If no tour completed.
    """
    completed = _completed(records)
    n = len(completed)
    total = np.sum([r.stat_sum[f.name] for r in completed], axis=0)

    log_value = None
    if f.nonnegative:
        with np.errstate(divide='ignore'):
            log_value = S.log_Z_S + np.log(total) - np.log(n)
        value = np.exp(log_value)
    else:
        value = np.exp(S.log_Z_S) * (total / n)

    bound = None
    if W is not None and cfg is not None:
        log_bound = empirical_log_bias_bound(records, S, f.sup_norm(W), cfg)
        bound = None if log_bound is None else float(np.exp(log_bound))
    return FHatResult(value=value, completed_tours=n, log_value=log_value, bias_bound=bound)


def log_z_estimate(records: list, S: StoppingSet, sigmas: float = 3.0) -> ZEstimate:
    """log Z_hat = log Z_S + log E_hat[xi], with a CI from the tour-level variance of xi."""
    tail = tours.summarize(records)
    if not tail.n_completed:
        raise NoCompletedTours(f"None of {len(records)} tours returned to the stopping set")
    stderr = (tail.xi_std or 0.0) / np.sqrt(tail.n_completed)
    low = max(tail.xi_hat - sigmas * stderr, np.finfo(float).tiny)
    high = tail.xi_hat + sigmas * stderr
    return ZEstimate(
        log_Z_hat=S.log_Z_S + float(np.log(tail.xi_hat)),
        log_Z_S=S.log_Z_S,
        xi_hat=tail.xi_hat,
        xi_stderr=stderr,
        log_ci=(S.log_Z_S + float(np.log(low)), S.log_Z_S + float(np.log(high))),
        completed_tours=tail.n_completed,
        capped_tours=tail.n_capped,
    )


def lvs_gradient(data_batch, W: rbm.RbmParams, S: StoppingSet, cfg: tours.TourConfig, R: int,
                 rng: np.random.Generator, normalize: bool = True, workers: int = 1) -> GradientEstimate:
    """
    Las Vegas slope gradient from R tours.

    Positive phase: E_hat[xi] times the data statistics with E[h|v_n] in place of a sampled h.
    Negative phase: sum of v h^T (and v, h) over every state of every completed tour, divided
    by the number of completed tours. With normalize the difference is divided by E_hat[xi].

    Raises:
        NoCompletedTours: If no tour completed; callers skip the update.
    """
    data_batch = np.atleast_2d(np.asarray(data_batch, dtype=np.uint8))
    if data_batch.shape[0] == 0:
        raise ValueError("A non-empty data batch is required")
    R = R or data_batch.shape[0]
    stat = tours.StatisticSpec.energy_gradient()
    records, tail = tours.run_batch(W, S, cfg, [stat], R, rng, workers=workers)
    completed = _completed(records)
    xi_hat = tail.xi_hat

    # the statistic accumulates dE/dW = (-v h^T, -v, -h)
    neg_flat = -np.sum([r.stat_sum[stat.name] for r in completed], axis=0) / len(completed)
    neg_w, neg_v, neg_h = tours.split_energy_gradient(neg_flat, W)
    pos_w, pos_v, pos_h = data_statistics(W, data_batch)

    scale = 1.0 / xi_hat if normalize else 1.0
    return GradientEstimate(
        d_weights=(xi_hat * pos_w - neg_w) * scale,
        d_visible_bias=(xi_hat * pos_v - neg_v) * scale,
        d_hidden_bias=(xi_hat * pos_h - neg_h) * scale,
        xi_hat=xi_hat,
        completed_fraction=tail.completed_fraction,
        normalized=normalize,
        completed_tours=tail.n_completed,
        capped_tours=tail.n_capped,
        log_bias_bound=empirical_log_bias_bound(records, S, stat.sup_norm(W), cfg),
    )


def _negative_statistics(W: rbm.RbmParams, x: rbm.JointState) -> tuple:
    # Rao-Blackwellised over the final hidden layer
    v = x.visible.astype(np.float64)
    eh = rbm.hidden_conditional(v, W)
    return v.T @ eh / v.shape[0], v.mean(axis=0), eh.mean(axis=0)


def _advance(x: rbm.JointState, W: rbm.RbmParams, K: int, rng: np.random.Generator,
             scan: rbm.GibbsScan) -> rbm.JointState:
    for _ in range(K):
        x = rbm.gibbs_step(x, W, scan, rng)
    return x


def cd_chain(data_batch, W: rbm.RbmParams, K: int, rng: np.random.Generator, hidden=None,
             scan: rbm.GibbsScan = rbm.GibbsScan.ALTERNATING_VH) -> rbm.JointState:
    """Final states of CD-K chains started at (v_n, h_n), h_n ~ p(h|v_n) unless given."""
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    v = np.atleast_2d(np.asarray(data_batch, dtype=np.uint8))
    h = rbm.sample_hidden(v, W, rng) if hidden is None else np.atleast_2d(np.asarray(hidden, dtype=np.uint8))
    return _advance(rbm.JointState(v, h), W, K, rng, scan)


def cd_gradient(data_batch, W: rbm.RbmParams, K: int, rng: np.random.Generator,
                scan: rbm.GibbsScan = rbm.GibbsScan.ALTERNATING_VH) -> GradientEstimate:
    final = cd_chain(data_batch, W, K, rng, scan=scan)
    pos = data_statistics(W, data_batch)
    neg = _negative_statistics(W, final)
    return GradientEstimate(pos[0] - neg[0], pos[1] - neg[1], pos[2] - neg[2])


def pcd_gradient(data_batch, W: rbm.RbmParams, K: int, chains: PersistentChains, rng: np.random.Generator,
                 scan: rbm.GibbsScan = rbm.GibbsScan.ALTERNATING_VH) -> GradientEstimate:
    """
    Persistent CD: chains start from the batch on the first call, then carry over.

    The chain count is fixed by the first batch; ``chains`` is updated in place.
    """
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    if chains.state is None:
        v = np.atleast_2d(np.asarray(data_batch, dtype=np.uint8))
        chains.state = rbm.JointState(v, rbm.sample_hidden(v, W, rng))
    chains.state = _advance(chains.state, W, K, rng, scan)
    pos = data_statistics(W, data_batch)
    neg = _negative_statistics(W, chains.state)
    return GradientEstimate(pos[0] - neg[0], pos[1] - neg[1], pos[2] - neg[2])


def _length_frame(lengths: np.ndarray) -> pd.DataFrame:
    counts = np.bincount(lengths)
    k = np.flatnonzero(counts)
    return pd.DataFrame({'k': k, 'count': counts[k], 'probability': counts[k] / counts.sum()})


def inspection_paradox_report(W: rbm.RbmParams, S: StoppingSet, R: int, rng: np.random.Generator,
                              cfg: tours.TourConfig = None, n_probes: int = None) -> InspectionReport:
    """
    Compare plain tour lengths with the lengths of tours that contain a fixed time.

    The completed tours are laid end to end and probed at uniform times, as a chain run for a
    fixed number of steps would be; the probed tour's length follows k p(xi = k) / E[xi].
    """
    cfg = cfg or tours.TourConfig.dynamic()
    records, _ = tours.run_batch(W, S, cfg, [], R, rng)
    lengths = np.array([r.length for r in _completed(records)], dtype=np.int64)
    ends = np.cumsum(lengths)
    probes = rng.integers(ends[-1], size=n_probes or len(lengths))
    probed = lengths[np.searchsorted(ends, probes, side='right')]
    return InspectionReport(
        plain=_length_frame(lengths),
        length_biased=_length_frame(probed),
        plain_mean=float(lengths.mean()),
        length_biased_mean=float(probed.mean()),
        completed_tours=len(lengths),
    )
