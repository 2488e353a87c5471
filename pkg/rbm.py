"""
Binary restricted Boltzmann machine: energy, conditionals, free energies and
Gibbs transition kernels.

States are held unpacked as 0/1 ``uint8`` arrays whose last axis is the unit
axis; any leading axes are a batch. The packed form returned by ``pack_bits``
is only ever used as a hashing key, conditional sampling always reads the
unpacked arrays.
"""
import enum
import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

import settings

logger = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    pass


class GibbsScan(enum.Enum):
    # v' ~ p(v|h) then h' ~ p(h|v') in one step
    ALTERNATING_VH = 'alternating'
    # one uniformly chosen unit resampled per step, time reversible
    RANDOM_SCAN = 'random'


@dataclass
class RbmParams:
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.visible_bias = np.asarray(self.visible_bias, dtype=np.float64)
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionMismatch(f"Weights must be a matrix, got shape {self.weights.shape}")
        n_visible, n_hidden = self.weights.shape
        if n_visible < 1 or n_hidden < 1:
            raise DimensionMismatch("An RBM needs at least one visible and one hidden unit")
        if self.visible_bias.shape != (n_visible,):
            raise DimensionMismatch(f"Visible bias has shape {self.visible_bias.shape}, expected ({n_visible},)")
        if self.hidden_bias.shape != (n_hidden,):
            raise DimensionMismatch(f"Hidden bias has shape {self.hidden_bias.shape}, expected ({n_hidden},)")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.visible_bias).all()
                and np.isfinite(self.hidden_bias).all()):
            raise FloatingPointError("RBM parameters must all be finite")

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> 'RbmParams':
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @classmethod
    def random(cls, n_visible: int, n_hidden: int, rng: np.random.Generator, scale: float = 1.0) -> 'RbmParams':
        """Entries uniform in [-scale, scale]; used for the tiny test models."""
        return cls(
            rng.uniform(-scale, scale, size=(n_visible, n_hidden)),
            rng.uniform(-scale, scale, size=n_visible),
            rng.uniform(-scale, scale, size=n_hidden),
        )

    @property
    def n_visible(self) -> int:
        return self.weights.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> 'RbmParams':
        return RbmParams(self.weights.copy(), self.visible_bias.copy(), self.hidden_bias.copy())

    def add_scaled(self, d_weights, d_visible_bias, d_hidden_bias, eta: float) -> 'RbmParams':
        # no validation; callers check is_finite()
        new = object.__new__(RbmParams)
        new.weights = self.weights + eta * np.asarray(d_weights)
        new.visible_bias = self.visible_bias + eta * np.asarray(d_visible_bias)
        new.hidden_bias = self.hidden_bias + eta * np.asarray(d_hidden_bias)
        return new

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.visible_bias).all()
                    and np.isfinite(self.hidden_bias).all())

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for array in (self.weights, self.visible_bias, self.hidden_bias):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def l1_norm(self) -> float:
        return float(np.abs(self.weights).sum() + np.abs(self.visible_bias).sum() + np.abs(self.hidden_bias).sum())


@dataclass
class JointState:
    visible: np.ndarray
    hidden: np.ndarray

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=np.uint8)
        self.hidden = np.asarray(self.hidden, dtype=np.uint8)
        if self.visible.shape[:-1] != self.hidden.shape[:-1]:
            raise DimensionMismatch("Visible and hidden parts have different batch shapes")

    @property
    def batch_shape(self) -> tuple:
        return self.visible.shape[:-1]

    def __len__(self):
        return self.visible.shape[0] if self.visible.ndim > 1 else 1

    def row(self, index: int) -> 'JointState':
        return JointState(self.visible[index].copy(), self.hidden[index].copy())

    def copy(self) -> 'JointState':
        return JointState(self.visible.copy(), self.hidden.copy())


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def pack_bits(bits: np.ndarray) -> bytes:
    """Packed key of a single bit vector; equal vectors give equal keys."""
    bits = np.asarray(bits, dtype=np.uint8)
    return np.packbits(bits).tobytes() + len(bits).to_bytes(4, 'little')


def _check_units(bits, n: int, what: str):
    if np.shape(bits)[-1] != n:
        raise DimensionMismatch(f"{what} vector has length {np.shape(bits)[-1]}, expected {n}")


def _check_state(x: JointState, W: RbmParams):
    _check_units(x.visible, W.n_visible, "Visible")
    _check_units(x.hidden, W.n_hidden, "Hidden")


def softplus(x):
    """log(1 + e^x), overflow safe."""
    x = np.asarray(x, dtype=np.float64)
    cutoff = settings.SOFTPLUS_CUTOFF
    return np.where(x > cutoff, x, np.log1p(np.exp(np.minimum(x, cutoff))))


def energy(x: JointState, W: RbmParams):
    _check_state(x, W)
    v = x.visible.astype(np.float64)
    h = x.hidden.astype(np.float64)
    interaction = np.einsum('...i,ij,...j->...', v, W.weights, h)
    return -interaction - v @ W.visible_bias - h @ W.hidden_bias


def hidden_conditional(v, W: RbmParams) -> np.ndarray:
    """p(h_j = 1 | v) for every hidden unit."""
    _check_units(v, W.n_visible, "Visible")
    return expit(W.hidden_bias + np.asarray(v, dtype=np.float64) @ W.weights)


def visible_conditional(h, W: RbmParams) -> np.ndarray:
    """p(v_i = 1 | h) for every visible unit."""
    _check_units(h, W.n_hidden, "Hidden")
    return expit(W.visible_bias + np.asarray(h, dtype=np.float64) @ W.weights.T)


def _bernoulli(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(p.shape) < p).astype(np.uint8)


def sample_hidden(v, W: RbmParams, rng: np.random.Generator) -> np.ndarray:
    return _bernoulli(hidden_conditional(v, W), rng)


def sample_visible(h, W: RbmParams, rng: np.random.Generator) -> np.ndarray:
    return _bernoulli(visible_conditional(h, W), rng)


def gibbs_step(x: JointState, W: RbmParams, scan: GibbsScan, rng: np.random.Generator) -> JointState:
    """One transition of the Gibbs chain. Works on single states and batches."""
    _check_state(x, W)
    if scan == GibbsScan.ALTERNATING_VH:
        v = sample_visible(x.hidden, W, rng)
        h = sample_hidden(v, W, rng)
        return JointState(v, h)

    single = x.visible.ndim == 1
    v = np.atleast_2d(x.visible).copy()
    h = np.atleast_2d(x.hidden).copy()
    n_rows = v.shape[0]
    n_visible = W.n_visible
    unit = rng.integers(n_visible + W.n_hidden, size=n_rows)
    u = rng.random(n_rows)
    rows = np.arange(n_rows)

    on_visible = unit < n_visible
    if on_visible.any():
        r = rows[on_visible]
        i = unit[on_visible]
        field = W.visible_bias[i] + np.einsum('rj,rj->r', h[r].astype(np.float64), W.weights[i])
        v[r, i] = (u[on_visible] < expit(field)).astype(np.uint8)
    on_hidden = ~on_visible
    if on_hidden.any():
        r = rows[on_hidden]
        j = unit[on_hidden] - n_visible
        field = W.hidden_bias[j] + np.einsum('ri,ir->r', v[r].astype(np.float64), W.weights[:, j])
        h[r, j] = (u[on_hidden] < expit(field)).astype(np.uint8)

    if single:
        return JointState(v[0], h[0])
    return JointState(v, h)


def hidden_free_energy(h, W: RbmParams):
    """F_H(h) with exp(-F_H(h)) = sum_v exp(-E(v, h))."""
    _check_units(h, W.n_hidden, "Hidden")
    h = np.asarray(h, dtype=np.float64)
    return -(h @ W.hidden_bias) - softplus(W.visible_bias + h @ W.weights.T).sum(axis=-1)


def visible_free_energy(v, W: RbmParams):
    """F_V(v) with exp(-F_V(v)) = sum_h exp(-E(v, h))."""
    _check_units(v, W.n_visible, "Visible")
    v = np.asarray(v, dtype=np.float64)
    return -(v @ W.visible_bias) - softplus(W.hidden_bias + v @ W.weights).sum(axis=-1)


def energy_gradient(x: JointState) -> tuple:
    """dE/dW per state: (-v h^T, -v, -h), batched over leading axes."""
    v = x.visible.astype(np.float64)
    h = x.hidden.astype(np.float64)
    return -np.einsum('...i,...j->...ij', v, h), -v, -h
