"""
S-stopped tours.

A tour starts at X(1) drawn from the stopping set with probability
e^{-E}/Z_S and runs the Gibbs chain until a step lands back in the set
(completed) or the step limit is reached (truncated). Its length xi counts
X(1)..X(xi); the state X(xi+1) that ended it is kept as ``next_state``.
Registered statistics are summed over the visited states, X(1) included.

Tours of a batch advance together as one vectorised chain; finished rows are
dropped from the active set at every step.
"""
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

import rbm
import settings
import stopping_set
from stopping_set import StoppingSet

logger = logging.getLogger(__name__)

# fit_geometric_tail requirements
MIN_TAIL_TOURS = 100
MIN_POINT_COUNT = 30


class StatisticKind(enum.Enum):
    UNIT_F1 = 'unit'
    ENERGY_GRADIENT = 'energy_gradient'
    CUSTOM = 'custom'


@dataclass(frozen=True)
class StatisticSpec:
    kind: StatisticKind
    name: str
    fn: Optional[Callable] = None
    dim: Optional[int] = None
    # sup over states of ||f||_1, when known
    bound: Optional[float] = None
    nonnegative: bool = False

    @classmethod
    def unit(cls) -> 'StatisticSpec':
        return cls(StatisticKind.UNIT_F1, 'f1', dim=1, bound=1.0, nonnegative=True)

    @classmethod
    def energy_gradient(cls) -> 'StatisticSpec':
        return cls(StatisticKind.ENERGY_GRADIENT, 'energy_gradient')

    @classmethod
    def custom(cls, name: str, fn: Callable, dim: int, bound: float = None, nonnegative: bool = False) -> 'StatisticSpec':
        return cls(StatisticKind.CUSTOM, name, fn=fn, dim=dim, bound=bound, nonnegative=nonnegative)

    def dimension(self, W: rbm.RbmParams) -> int:
        if self.kind == StatisticKind.ENERGY_GRADIENT:
            return W.n_visible * W.n_hidden + W.n_visible + W.n_hidden
        return self.dim

    def sup_norm(self, W: rbm.RbmParams) -> Optional[float]:
        if self.kind == StatisticKind.ENERGY_GRADIENT:
            # every entry of (-v h^T, -v, -h) is 0 or -1
            return float(self.dimension(W))
        return self.bound

    def evaluate(self, x: rbm.JointState, W: rbm.RbmParams) -> np.ndarray:
        """Values of f for a batch of states, shape (batch, dimension)."""
        n = x.visible.shape[0]
        if self.kind == StatisticKind.UNIT_F1:
            return np.ones((n, 1))
        if self.kind == StatisticKind.ENERGY_GRADIENT:
            d_w, d_v, d_h = rbm.energy_gradient(x)
            return np.concatenate([d_w.reshape(n, -1), d_v, d_h], axis=1)
        return np.asarray(self.fn(x), dtype=np.float64).reshape(n, self.dim)


def split_energy_gradient(flat: np.ndarray, W: rbm.RbmParams) -> tuple:
    """Undo the (weights, visible bias, hidden bias) flattening of the energy-gradient statistic."""
    n_w = W.n_visible * W.n_hidden
    return (flat[:n_w].reshape(W.n_visible, W.n_hidden),
            flat[n_w:n_w + W.n_visible],
            flat[n_w + W.n_visible:])


@dataclass
class TourConfig:
    # None runs dynamic K: grow until the tour returns, up to k_dyn_cap
    k_max: Optional[int] = 1
    k_dyn_cap: int = settings.K_DYN_CAP
    scan: rbm.GibbsScan = rbm.GibbsScan.ALTERNATING_VH

    def __post_init__(self):
        if self.k_max is not None and self.k_max < 1:
            raise ValueError(f"k_max must be positive, got {self.k_max}")
        if self.k_dyn_cap < 1:
            raise ValueError(f"k_dyn_cap must be positive, got {self.k_dyn_cap}")
        if self.k_max is not None and self.k_dyn_cap < self.k_max:
            raise ValueError(f"k_dyn_cap ({self.k_dyn_cap}) must be at least k_max ({self.k_max})")

    @classmethod
    def dynamic(cls, k_dyn_cap: int = settings.K_DYN_CAP, scan: rbm.GibbsScan = rbm.GibbsScan.ALTERNATING_VH) -> 'TourConfig':
        return cls(k_max=None, k_dyn_cap=k_dyn_cap, scan=scan)

    @property
    def is_dynamic(self) -> bool:
        return self.k_max is None

    @property
    def limit(self) -> int:
        return self.k_dyn_cap if self.is_dynamic else self.k_max

    def describe(self) -> str:
        return 'dynamic' if self.is_dynamic else str(self.k_max)


@dataclass
class TourRecord:
    length: int
    completed: bool
    stat_sum: dict
    next_state: rbm.JointState
    capped: bool = False
    start_index: Optional[int] = None
    start_label: Optional[int] = None


@dataclass
class TailSummary:
    # completed_counts[k] = |C_k|, entry 0 unused
    completed_counts: np.ndarray
    # survival[k] = empirical p(xi > k), k = 0..K
    survival: np.ndarray
    xi_hat: Optional[float]
    xi_std: Optional[float]
    n_tours: int
    n_completed: int
    n_capped: int

    @property
    def completed_fraction(self) -> float:
        return self.n_completed / self.n_tours if self.n_tours else 0.0

    def mean_tour_length_ci(self, sigmas: float = 3.0) -> Optional[tuple]:
        if not self.n_completed:
            return None
        half = sigmas * (self.xi_std or 0.0) / np.sqrt(self.n_completed)
        return self.xi_hat - half, self.xi_hat + half

    def ccdf_frame(self) -> pd.DataFrame:
        k = np.arange(1, len(self.survival))
        return pd.DataFrame({
            'k': k,
            'count': self.completed_counts[1:len(self.survival)],
            'p_gt_k': self.survival[1:],
        })


def summarize(records: list) -> TailSummary:
    lengths = np.array([r.length for r in records], dtype=np.int64)
    completed = np.array([r.completed for r in records], dtype=bool)
    capped = int(sum(r.capped for r in records))
    K = int(lengths.max()) if len(lengths) else 0
    completed_counts = np.bincount(lengths[completed], minlength=K + 1)
    # a truncated tour of observed length K has xi > K
    effective = np.where(completed, lengths, K + 1)
    survival = np.ones(1)
    if len(lengths):
        running = len(lengths) - np.cumsum(np.bincount(effective, minlength=K + 2))
        survival = running[:K + 1] / len(lengths)
    done = lengths[completed]
    return TailSummary(
        completed_counts=completed_counts,
        survival=survival,
        xi_hat=float(done.mean()) if len(done) else None,
        xi_std=float(done.std(ddof=1)) if len(done) > 1 else None,
        n_tours=len(records),
        n_completed=int(completed.sum()),
        n_capped=capped,
    )


def _run_tours(W: rbm.RbmParams, S: StoppingSet, cfg: TourConfig, stats: list, n: int,
               rng: np.random.Generator, start: rbm.JointState = None, labels=None) -> list:
    if start is None:
        first, start_index = stopping_set.sample_start(S, W, rng, size=n, return_index=True)
    else:
        first = rbm.JointState(np.atleast_2d(start.visible), np.atleast_2d(start.hidden))
        start_index = None
        n = first.visible.shape[0]

    visible = first.visible.copy()
    hidden = first.hidden.copy()
    next_visible = np.zeros_like(visible)
    next_hidden = np.zeros_like(hidden)
    lengths = np.zeros(n, dtype=np.int64)
    completed = np.zeros(n, dtype=bool)
    sums = {s.name: np.zeros((n, s.dimension(W))) for s in stats}
    active = np.arange(n)
    limit = cfg.limit

    t = 0
    while active.size:
        t += 1
        current = rbm.JointState(visible[active], hidden[active])
        for s in stats:
            sums[s.name][active] += s.evaluate(current, W)
        lengths[active] = t

        step = rbm.gibbs_step(current, W, cfg.scan, rng)
        hit = S.contains_rows(step.hidden)
        completed[active[hit]] = True
        done = hit | (t >= limit)
        next_visible[active[done]] = step.visible[done]
        next_hidden[active[done]] = step.hidden[done]

        keep = ~done
        visible[active[keep]] = step.visible[keep]
        hidden[active[keep]] = step.hidden[keep]
        active = active[keep]

    capped = ~completed & cfg.is_dynamic
    if capped.any():
        logger.warning(f"{int(capped.sum())} dynamic tours hit the cap of {cfg.k_dyn_cap} steps")

    start_labels = None
    if labels is not None and start_index is not None and S.origins is not None:
        start_labels = np.asarray(labels)[S.origins[start_index]]

    return [
        TourRecord(
            length=int(lengths[r]),
            completed=bool(completed[r]),
            stat_sum={name: sums[name][r] for name in sums},
            next_state=rbm.JointState(next_visible[r], next_hidden[r]),
            capped=bool(capped[r]),
            start_index=None if start_index is None else int(start_index[r]),
            start_label=None if start_labels is None else int(start_labels[r]),
        )
        for r in range(n)
    ]


def run_tour(W: rbm.RbmParams, S: StoppingSet, cfg: TourConfig, stats: list,
             rng: np.random.Generator, start: rbm.JointState = None) -> TourRecord:
    """
    Run one S-stopped tour.

    X(1) is drawn from the stopping set unless ``start`` is given. X(1)'s hidden part is
    in S by construction but does not stop the tour; only states reached by a step do.
    """
    return _run_tours(W, S, cfg, stats, 1, rng, start=start)[0]


def run_batch(W: rbm.RbmParams, S: StoppingSet, cfg: TourConfig, stats: list, R: int,
              rng: np.random.Generator, workers: int = 1, labels=None) -> tuple:
    """
    Run R independent tours.

    With workers > 1 the tours are split into contiguous chunks, one per worker, each
    with its own stream spawned from rng; the result depends only on (rng state, workers).

    Returns:
        (list of TourRecord, TailSummary)
    """
    if R < 1:
        raise ValueError(f"At least one tour is required, got R={R}")
    if workers <= 1:
        records = _run_tours(W, S, cfg, stats, R, rng, labels=labels)
    else:
        streams = rng.spawn(workers)
        chunks = [len(c) for c in np.array_split(np.arange(R), workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(
                lambda job: _run_tours(W, S, cfg, stats, job[0], job[1], labels=labels) if job[0] else [],
                zip(chunks, streams),
            )
            records = [record for part in parts for record in part]
    tail = summarize(records)
    logger.debug(f"Ran {R} tours (K={cfg.describe()}): {tail.n_completed} completed, mean length {tail.xi_hat}")
    return records, tail


def fit_geometric_tail(records: list) -> Optional[tuple]:
    """
    Fit log p(xi > k) = k log(alpha) + c by least squares.

    Uses k = 1.. up to the largest k at which at least MIN_POINT_COUNT tours are still
    running. Returns (alpha_hat, (k_first, k_last)), or None when fewer than
    MIN_TAIL_TOURS completed tours have length >= 2 or fewer than two points qualify.
    """
    long_tours = sum(1 for r in records if r.completed and r.length >= 2)
    if long_tours < MIN_TAIL_TOURS:
        logger.info(f"Only {long_tours} completed tours of length >= 2; no tail fit")
        return None
    tail = summarize(records)
    counts = np.rint(tail.survival * tail.n_tours)
    k = np.arange(len(counts))
    usable = np.flatnonzero((k >= 1) & (counts >= MIN_POINT_COUNT))
    if len(usable) < 2:
        logger.info("Too few tail points with enough tours for a fit")
        return None
    k_last = int(usable.max())
    ks = np.arange(1, k_last + 1)
    slope, _ = np.polyfit(ks, np.log(tail.survival[ks]), 1)
    alpha = float(np.clip(np.exp(slope), 1e-12, 1.0 - 1e-12))
    return alpha, (1, k_last)


def tail_slope(records: list, min_count: int = MIN_POINT_COUNT) -> Optional[float]:
    """
    Asymptotic slope of the empirical log p(xi > k).

    Weighted least squares over the second half of the k range where at least
    min_count tours are still running, each point weighted by sqrt(tours running).
    None when that range has fewer than two points.
    """
    tail = summarize(records)
    counts = np.rint(tail.survival * tail.n_tours)
    usable = np.flatnonzero((np.arange(len(counts)) >= 1) & (counts >= min_count))
    if len(usable) < 2:
        return None
    k_last = int(usable.max())
    ks = np.arange(max(1, k_last // 2), k_last + 1)
    if len(ks) < 2:
        return None
    slope, _ = np.polyfit(ks, np.log(tail.survival[ks]), 1, w=np.sqrt(counts[ks]))
    return float(slope)


def grouped_ccdf(records: list) -> pd.DataFrame:
    """CCDF of tour lengths per starting example's label (records without a label are skipped)."""
    frames = []
    labels = sorted({r.start_label for r in records if r.start_label is not None})
    for label in labels:
        frame = summarize([r for r in records if r.start_label == label]).ccdf_frame()
        frame.insert(0, 'label', label)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=['label', 'k', 'count', 'p_gt_k'])
    return pd.concat(frames, ignore_index=True)
