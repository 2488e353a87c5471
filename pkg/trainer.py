"""
Mini-batch stochastic gradient ascent on the average log-likelihood.

One random stream drives everything (initialisation, shuffling, estimators),
so a serial run is a function of the seed. There is no momentum and no
weight decay.
"""
import dataclasses
import enum
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

import data_utils
import estimators
import oracle
import rbm
import settings
import stopping_set
import tours
from stopping_set import EmptyDataError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'RBM1'
CHECKPOINT_HEADER = struct.Struct('<4sII')

LOG_COLUMNS = ['epoch', 'estimator', 'lr', 'train_ll', 'test_ll', 'xi_hat', 'completed_fraction',
               'log_bias_bound', 'skipped_updates', 'capped_tours', 'stopping_set_size']


class NonFiniteParams(FloatingPointError):
    def __init__(self, message: str, dump_path: Path = None):
        super().__init__(message)
        self.dump_path = dump_path


class Estimator(enum.Enum):
    CD = 'cd'
    PCD = 'pcd'
    LVS = 'lvs'
    EXACT = 'exact'


@dataclass
class TrainConfig:
    estimator: Estimator = Estimator.LVS
    # None with LVS runs dynamic K
    k: Optional[int] = 1
    epochs: int = settings.EPOCHS
    warmup_epochs: int = settings.WARMUP_EPOCHS
    batch_size: int = settings.BATCH_SIZE
    lr0: float = settings.LEARNING_RATE
    tau: float = settings.RM_TAU
    m: int = settings.M
    seed: int = settings.DEFAULT_SEED
    eval_every: int = 1
    n_hidden: int = settings.HIDDEN_UNITS
    # tours per LVS estimate; None uses the batch size
    tours_per_batch: Optional[int] = None
    threads: int = 1
    k_dyn_cap: int = settings.K_DYN_CAP
    # batches between stopping set rebuilds; None rebuilds at each epoch start only
    rebuild_every: Optional[int] = None

    def __post_init__(self):
        self.estimator = Estimator(self.estimator)
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not self.epochs >= self.warmup_epochs >= 0:
            raise ValueError(f"Need epochs >= warmup_epochs >= 0, got {self.epochs} and {self.warmup_epochs}")
        if self.k is None and self.estimator != Estimator.LVS:
            raise ValueError("Dynamic K is only defined for the LVS estimator")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.batch_size < 1 or self.m < 1 or self.n_hidden < 1 or self.eval_every < 1:
            raise ValueError("batch_size, m, n_hidden and eval_every must be positive")
        if self.rebuild_every is not None and self.rebuild_every < 1:
            raise ValueError(f"rebuild_every must be positive, got {self.rebuild_every}")

    def label(self) -> str:
        if self.estimator == Estimator.EXACT:
            return 'exact'
        return f"{self.estimator.value}-{'dyn' if self.k is None else self.k}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d['estimator'] = self.estimator.value
        return d


@dataclass
class TrainLogRow:
    epoch: int
    estimator: str
    lr: float
    train_ll: Optional[float]
    test_ll: Optional[float]
    xi_hat: Optional[float]
    completed_fraction: Optional[float]
    # largest per-batch bound on the fixed-K bias, log scale
    log_bias_bound: Optional[float]
    skipped_updates: int
    capped_tours: int
    stopping_set_size: Optional[int]
    wall_time: float


@dataclass
class TrainResult:
    params: rbm.RbmParams
    log: list = field(default_factory=list)
    skipped_updates: int = 0
    capped_tours: int = 0
    updates: int = 0

    def __iter__(self):
        return iter((self.params, self.log))

    def log_frame(self, timings: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame([dataclasses.asdict(row) for row in self.log])
        columns = LOG_COLUMNS + (['wall_time'] if timings else [])
        return frame.reindex(columns=columns)


def robbins_monro(lr0: float, tau: float, t: int) -> float:
    """lr0 * tau / (tau + t): sum of rates diverges, sum of squares converges."""
    return lr0 * tau / (tau + t)


def init_params(data, n_hidden: int, rng: np.random.Generator) -> rbm.RbmParams:
    """
    Weights uniform in +-0.1/sqrt(n_V + n_H), hidden biases 0, visible biases
    log(p_i / (1 - p_i)) with p_i clamped to [1/(2N), 1 - 1/(2N)].

    Raises:
        EmptyDataError: If data has no rows.
    """
    data = np.atleast_2d(np.asarray(data))
    if data.shape[0] == 0 or data.size == 0:
        raise EmptyDataError("Training data is required to initialise parameters")
    n, n_visible = data.shape
    p = np.clip(data_utils.pixel_means(data), 1.0 / (2 * n), 1.0 - 1.0 / (2 * n))
    scale = 0.1 / np.sqrt(n_visible + n_hidden)
    return rbm.RbmParams(
        weights=rng.uniform(-scale, scale, size=(n_visible, n_hidden)),
        visible_bias=np.log(p / (1.0 - p)),
        hidden_bias=np.zeros(n_hidden),
    )


def evaluate(W: rbm.RbmParams, data, log_Z: float = None) -> float:
    """
    Mean log-likelihood (1/N) sum_n -F_V(v_n) - log Z.

    Raises:
        BudgetExceeded: If log_Z is not given and neither layer is small enough to enumerate.
    """
    return oracle.exact_log_likelihood(W, data, log_Z)


def _try_log_z(W: rbm.RbmParams) -> Optional[float]:
    try:
        return oracle.exact_partition(W)
    except oracle.BudgetExceeded as e:
        logger.debug(f"No exact evaluation: {e}")
        return None


def save_checkpoint(W: rbm.RbmParams, path) -> Path:
    """RBM1 format: magic, u32 n_V, u32 n_H, then W', b, a as row-major little-endian float64."""
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, W.n_visible, W.n_hidden))
        for array in (W.weights, W.visible_bias, W.hidden_bias):
            f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())
    logger.info(f"Saved {W.n_visible}x{W.n_hidden} checkpoint to {path}")
    return path


def load_checkpoint(path) -> rbm.RbmParams:
    '''
    Raises:
        FileNotFoundError: If the file does not exist.
        data_utils.BadMagic: If the file does not start with RBM1.
        data_utils.TruncatedFile: If the size does not match the header.
    '''
    path = Path(path)
    try:
        content = path.read_bytes()
    except FileNotFoundError:
        logger.error(f"Checkpoint not found: {path}")
        raise
    if len(content) < CHECKPOINT_HEADER.size:
        raise data_utils.TruncatedFile(f"{path}: too short for a checkpoint header")
    magic, n_visible, n_hidden = CHECKPOINT_HEADER.unpack_from(content)
    if magic != CHECKPOINT_MAGIC:
        raise data_utils.BadMagic(f"{path}: magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    count = n_visible * n_hidden + n_visible + n_hidden
    if len(content) != CHECKPOINT_HEADER.size + 8 * count:
        raise data_utils.TruncatedFile(f"{path}: expected {count} parameters")
    values = np.frombuffer(content, dtype='<f8', offset=CHECKPOINT_HEADER.size).astype(np.float64)
    n_w = n_visible * n_hidden
    return rbm.RbmParams(
        weights=values[:n_w].reshape(n_visible, n_hidden),
        visible_bias=values[n_w:n_w + n_visible],
        hidden_bias=values[n_w + n_visible:],
    )


def _dump_nonfinite(dump_dir: Path, epoch: int, batch: int, W: rbm.RbmParams,
                    gradient: estimators.GradientEstimate, eta: float) -> Path:
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_epoch{epoch}_batch{batch}.npz"
    np.savez(
        path,
        weights=W.weights, visible_bias=W.visible_bias, hidden_bias=W.hidden_bias,
        d_weights=gradient.d_weights, d_visible_bias=gradient.d_visible_bias,
        d_hidden_bias=gradient.d_hidden_bias, eta=eta,
        xi_hat=np.nan if gradient.xi_hat is None else gradient.xi_hat,
    )
    return path


class _EpochStats:
    def __init__(self):
        self.xi = []
        self.completed = []
        self.bounds = []
        self.skipped = 0
        self.capped = 0

    def add(self, gradient: estimators.GradientEstimate):
        if gradient.xi_hat is not None:
            self.xi.append(gradient.xi_hat)
            self.completed.append(gradient.completed_fraction)
            self.capped += gradient.capped_tours
        if gradient.log_bias_bound is not None:
            self.bounds.append(gradient.log_bias_bound)


def train(data, test, cfg: TrainConfig, dump_dir=None, W: rbm.RbmParams = None) -> TrainResult:
    '''
    Trains an RBM with the configured estimator.

    Args:
        data: array (N, n_V) of training bits.
        test: array of test bits, or None.
        cfg: TrainConfig.
        dump_dir: where a diagnostic .npz goes if the parameters stop being finite
            (default settings.OUT_DIR).
        W: starting parameters; init_params(data, cfg.n_hidden) when None.

    Returns:
        TrainResult - unpacks as (params, log rows).

    Raises:
        EmptyDataError: If data has no rows.
        NonFiniteParams: If an update produces NaN or Inf.
    '''
    data = np.atleast_2d(np.asarray(data, dtype=np.uint8))
    if data.shape[0] == 0 or data.size == 0:
        raise EmptyDataError("Training data is required")
    rng = rbm.make_rng(cfg.seed)
    if W is None:
        W = init_params(data, cfg.n_hidden, rng)
    dump_dir = Path(dump_dir or settings.OUT_DIR)
    result = TrainResult(params=W)
    chains = estimators.PersistentChains()
    tour_cfg = None
    if cfg.estimator == Estimator.LVS:
        tour_cfg = tours.TourConfig(k_max=cfg.k, k_dyn_cap=cfg.k_dyn_cap) if cfg.k else tours.TourConfig.dynamic(cfg.k_dyn_cap)
    n = data.shape[0]
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        eta = robbins_monro(cfg.lr0, cfg.tau, epoch)
        warmup = cfg.estimator == Estimator.LVS and epoch < cfg.warmup_epochs
        epoch_stats = _EpochStats()
        S = None
        if cfg.estimator == Estimator.LVS and not warmup:
            S = stopping_set.build(data, W, cfg.m, rng)

        order = rng.permutation(n)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            rows = data[order[start:start + cfg.batch_size]]
            if warmup or cfg.estimator == Estimator.CD:
                gradient = estimators.cd_gradient(rows, W, 1 if warmup else cfg.k, rng)
            elif cfg.estimator == Estimator.PCD:
                gradient = estimators.pcd_gradient(rows, W, cfg.k, chains, rng)
            elif cfg.estimator == Estimator.EXACT:
                gradient = oracle.exact_gradient(W, rows)
            else:
                if cfg.rebuild_every and batch and batch % cfg.rebuild_every == 0:
                    S = stopping_set.build(data, W, cfg.m, rng)
                elif S.is_stale(W):
                    # tour starts must follow e^{-E}/Z_S under the current parameters
                    S = S.reweighted(W)
                try:
                    gradient = estimators.lvs_gradient(rows, W, S, tour_cfg, cfg.tours_per_batch or len(rows),
                                                       rng, normalize=True, workers=cfg.threads)
                except estimators.NoCompletedTours as e:
                    epoch_stats.skipped += 1
                    logger.warning(f"Epoch {epoch} batch {batch}: update skipped, {e}")
                    continue
            epoch_stats.add(gradient)

            updated = W.add_scaled(gradient.d_weights, gradient.d_visible_bias, gradient.d_hidden_bias, eta)
            if not updated.is_finite():
                path = _dump_nonfinite(dump_dir, epoch, batch, W, gradient, eta)
                logger.error(f"Non-finite parameters at epoch {epoch}, batch {batch}; state dumped to {path}")
                raise NonFiniteParams(f"Non-finite parameters at epoch {epoch}, batch {batch}", path)
            W = updated
            result.updates += 1
            logger.debug(f"Epoch {epoch} batch {batch}: xi_hat={gradient.xi_hat}, |g|={np.linalg.norm(gradient.flat()):.4g}")

        result.skipped_updates += epoch_stats.skipped
        result.capped_tours += epoch_stats.capped
        if (epoch + 1) % cfg.eval_every and epoch + 1 != cfg.epochs:
            continue

        log_Z = _try_log_z(W)
        row = TrainLogRow(
            epoch=epoch + 1,
            estimator='cd-1' if warmup else cfg.label(),
            lr=eta,
            train_ll=None if log_Z is None else evaluate(W, data, log_Z),
            test_ll=None if log_Z is None or test is None or len(test) == 0 else evaluate(W, test, log_Z),
            xi_hat=float(np.mean(epoch_stats.xi)) if epoch_stats.xi else None,
            completed_fraction=float(np.mean(epoch_stats.completed)) if epoch_stats.completed else None,
            log_bias_bound=max(epoch_stats.bounds) if epoch_stats.bounds else None,
            skipped_updates=epoch_stats.skipped,
            capped_tours=epoch_stats.capped,
            stopping_set_size=None if S is None else len(S),
            wall_time=time.perf_counter() - started,
        )
        result.log.append(row)
        logger.info(f"Epoch {row.epoch}/{cfg.epochs} [{row.estimator}] lr={eta:.4g} train_ll={row.train_ll} "
                    f"test_ll={row.test_ll} xi_hat={row.xi_hat} completed={row.completed_fraction}")

    result.params = W
    return result


@dataclass
class Comparison:
    frame: pd.DataFrame
    p_value: float
    mean_difference: float


def reduced_scale_comparison(data, test, configs: dict, seeds: list) -> Comparison:
    """
    Train each named config once per seed and compare final test log-likelihoods.

    Returns:
        Comparison - the per-seed frame, the p-value and the mean paired difference.

    The first two entries of ``configs`` are compared with a one-sided paired t-test,
    alternative: the first has the higher mean.
    """
    if len(configs) < 2 or len(seeds) < 2:
        raise ValueError("Need at least two configs and two seeds")
    records = []
    for seed in seeds:
        for name, cfg in configs.items():
            params, _ = train(data, test, dataclasses.replace(cfg, seed=seed))
            records.append({'seed': seed, 'estimator': name, 'test_ll': evaluate(params, test)})
            logger.info(f"{name} seed {seed}: test_ll={records[-1]['test_ll']:.4f}")
    frame = pd.DataFrame(records)
    first, second = list(configs)[:2]
    a = frame[frame.estimator == first].sort_values('seed').test_ll.to_numpy()
    b = frame[frame.estimator == second].sort_values('seed').test_ll.to_numpy()
    test_result = stats.ttest_rel(a, b, alternative='greater')
    return Comparison(frame=frame, p_value=float(test_result.pvalue), mean_difference=float(np.mean(a - b)))
