"""
Stopping set built from the training data.

The set holds every joint state whose hidden part was sampled from a training
example's hidden conditional (m samples per example), paired with every
visible vector. Only the distinct hidden vectors are stored; membership of a
joint state therefore depends on its hidden part alone.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp

import rbm
import size

logger = logging.getLogger(__name__)


class EmptyDataError(ValueError):
    pass


def _row_keys(hidden: np.ndarray) -> list:
    hidden = np.atleast_2d(np.asarray(hidden, dtype=np.uint8))
    suffix = hidden.shape[1].to_bytes(4, 'little')
    return [row.tobytes() + suffix for row in np.packbits(hidden, axis=1)]


def _weights(hidden: np.ndarray, W: rbm.RbmParams) -> tuple:
    log_weights = -rbm.hidden_free_energy(hidden, W)
    log_Z_S = float(logsumexp(log_weights))
    cumulative = np.cumsum(np.exp(log_weights - log_Z_S))
    cumulative[-1] = 1.0
    return log_weights, log_Z_S, cumulative


@dataclass
class StoppingSet:
    hidden_states: np.ndarray
    log_weights: np.ndarray
    log_Z_S: float
    membership: dict
    m: int
    built_from: int
    params_fingerprint: str
    cumulative: np.ndarray = field(repr=False)
    # index of the training example that first produced each hidden state
    origins: np.ndarray = None
    stale_uses: int = 0

    @classmethod
    def from_hidden_states(cls, hidden_states, W: rbm.RbmParams, m: int = 1, built_from: int = 0, origins=None) -> 'StoppingSet':
        """Build a set from explicit hidden vectors; duplicates enter once, first occurrence kept."""
        hidden_states = np.atleast_2d(np.asarray(hidden_states, dtype=np.uint8))
        if hidden_states.shape[0] == 0:
            raise EmptyDataError("A stopping set needs at least one hidden state")
        if hidden_states.shape[1] != W.n_hidden:
            raise rbm.DimensionMismatch(f"Hidden states have {hidden_states.shape[1]} units, model has {W.n_hidden}")

        _, first = np.unique(hidden_states, axis=0, return_index=True)
        first = np.sort(first)
        distinct = hidden_states[first]
        log_weights, log_Z_S, cumulative = _weights(distinct, W)
        membership = {key: index for index, key in enumerate(_row_keys(distinct))}

        if len(distinct) >= 2 ** W.n_hidden:
            logger.warning(f"Stopping set covers all {2 ** W.n_hidden} hidden states; every tour has length 1")

        return cls(
            hidden_states=distinct,
            log_weights=log_weights,
            log_Z_S=log_Z_S,
            membership=membership,
            m=m,
            built_from=built_from,
            params_fingerprint=W.fingerprint(),
            cumulative=cumulative,
            origins=None if origins is None else np.asarray(origins)[first],
        )

    def reweighted(self, W: rbm.RbmParams) -> 'StoppingSet':
        """
        The same hidden states weighted under W.

        Only the weights, log Z_S and the sampling CDF are recomputed; the states,
        membership index and origins are shared with this set.
        """
        if W.n_hidden != self.n_hidden:
            raise rbm.DimensionMismatch(f"Model has {W.n_hidden} hidden units, stopping set has {self.n_hidden}")
        log_weights, log_Z_S, cumulative = _weights(self.hidden_states, W)
        return dataclasses.replace(self, log_weights=log_weights, log_Z_S=log_Z_S, cumulative=cumulative,
                                   params_fingerprint=W.fingerprint(), stale_uses=0)

    def __len__(self):
        return self.hidden_states.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.hidden_states.shape[1]

    def contains(self, h) -> bool:
        h = np.asarray(h, dtype=np.uint8)
        if h.shape != (self.n_hidden,):
            raise rbm.DimensionMismatch(f"Hidden vector has shape {h.shape}, expected ({self.n_hidden},)")
        return rbm.pack_bits(h) in self.membership

    def contains_rows(self, hidden: np.ndarray) -> np.ndarray:
        """Vector of memberships for a batch of hidden vectors."""
        if np.shape(hidden)[-1] != self.n_hidden:
            raise rbm.DimensionMismatch(f"Hidden vectors have {np.shape(hidden)[-1]} units, expected {self.n_hidden}")
        return np.fromiter((key in self.membership for key in _row_keys(hidden)), dtype=bool)

    def is_stale(self, W: rbm.RbmParams) -> bool:
        return W.fingerprint() != self.params_fingerprint

    def profile_memory(self) -> dict:
        return size.breakdown(self, ['hidden_states', 'log_weights', 'cumulative', 'membership'])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'state': np.arange(len(self)),
            'hidden_bits': [''.join(map(str, row)) for row in self.hidden_states],
            'log_weight': self.log_weights,
            'probability': np.exp(self.log_weights - self.log_Z_S),
        })

    def dump_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Wrote {len(self)} stopping states to {path}")
        return path


def build(data, W: rbm.RbmParams, m: int, rng: np.random.Generator) -> StoppingSet:
    """
    Sample m hidden vectors per training example and collect the distinct ones.

    Args:
        data: array of shape (N, n_V) with 0/1 entries.
        W: model parameters the hidden conditionals are taken from.
        m: number of hidden samples per example.
        rng: random stream.

    Returns:
        StoppingSet - weights are the states' free energies, not their sample multiplicities.

    Raises:
        EmptyDataError: If data has no rows.
        ValueError: If m is not positive.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.uint8))
    if data.shape[0] == 0 or data.size == 0:
        raise EmptyDataError("Training data is required to build a stopping set")
    if m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")

    probs = rbm.hidden_conditional(data, W)
    samples = (rng.random((m,) + probs.shape) < probs).astype(np.uint8)
    # example-major order, so the first occurrence follows the data order
    samples = samples.transpose(1, 0, 2).reshape(-1, W.n_hidden)
    origins = np.repeat(np.arange(data.shape[0]), m)
    S = StoppingSet.from_hidden_states(samples, W, m=m, built_from=data.shape[0], origins=origins)
    logger.info(f"Built stopping set with {len(S)} distinct hidden states from {data.shape[0]} examples (m={m}), log Z_S={S.log_Z_S:.4f}")
    return S


def sample_start(S: StoppingSet, W: rbm.RbmParams, rng: np.random.Generator, size: int = None,
                 return_index: bool = False):
    """
    Draw tour start states with probability e^{-E(v,h)}/Z_S over the stopping set.

    The hidden part is drawn by inverse CDF over the states' weights, the visible
    part from p(v|h). With size=None a single state is returned, otherwise a batch;
    return_index also returns the chosen rows of S.hidden_states.
    """
    if S.is_stale(W):
        S.stale_uses += 1
        # once per set; reweighted() gives a current one
        if S.stale_uses == 1:
            logger.warning("Sampling from a stopping set built against different parameters")
        else:
            logger.debug(f"Stale stopping set used {S.stale_uses} times")
    n = 1 if size is None else size
    index = np.searchsorted(S.cumulative, rng.random(n), side='right')
    index = np.minimum(index, len(S) - 1)
    hidden = S.hidden_states[index]
    visible = rbm.sample_visible(hidden, W, rng)
    state = rbm.JointState(visible[0], hidden[0]) if size is None else rbm.JointState(visible, hidden)
    if return_index:
        return state, index
    return state


def contains(S: StoppingSet, h) -> bool:
    return S.contains(h)
