"""Sparse signal generator: random support, bounded coefficients, Gaussian noise.

Randomness is derived per signal: signal ``i`` of a dataset with master seed
``seed`` uses ``SeedSequence(seed, spawn_key=(i,))``, so any signal can be
regenerated alone and datasets can be built in any order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .dictionary import as_matrix
from .errors import InvalidArgumentError

SIGNED_UNIFORM = "signed_uniform"


@dataclass(frozen=True)
class CoefficientModel:
    """Law of the nonzero coefficients: random sign times Uniform[alpha_lo, alpha_hi].

    ``sigma_alpha`` defaults to ``alpha_hi``, a valid sub-Gaussian parameter
    for any law bounded by ``alpha_hi``.
    """

    k: int
    alpha_lo: float = 0.1
    alpha_hi: float = 10.0
    sigma_alpha: float | None = None
    distribution: str = SIGNED_UNIFORM

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgumentError("sparsity k must be at least 1")
        if not 0 < self.alpha_lo <= self.alpha_hi:
            raise InvalidArgumentError("need 0 < alpha_lo <= alpha_hi")
        if self.distribution != SIGNED_UNIFORM:
            raise InvalidArgumentError(f"unknown coefficient distribution {self.distribution!r}")
        if self.sigma_alpha is None:
            object.__setattr__(self, "sigma_alpha", float(self.alpha_hi))
        elif self.sigma_alpha <= 0:
            raise InvalidArgumentError("sigma_alpha must be positive")

    @property
    def E_alpha2(self) -> float:
        a, b = self.alpha_lo, self.alpha_hi
        if a == b:
            return a * a
        return (b**3 - a**3) / (3.0 * (b - a))

    @property
    def E_abs_alpha(self) -> float:
        return 0.5 * (self.alpha_lo + self.alpha_hi)

    def descriptor(self) -> dict:
        return {"name": self.distribution, "alpha_lo": self.alpha_lo,
                "alpha_hi": self.alpha_hi, "sigma_alpha": self.sigma_alpha}


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgumentError("noise level sigma must be nonnegative")


@dataclass(frozen=True)
class GeneratedSignal:
    x: np.ndarray
    alpha0: np.ndarray
    support: np.ndarray
    sign: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class SignalBatch:
    """Column-stacked signals ``X = D0 A0 + E`` with their ground truth.

    ``supports`` is an n x k array of sorted atom indices.
    """

    X: np.ndarray
    A0: np.ndarray
    E: np.ndarray
    supports: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.A0.shape[0]

    @property
    def k(self) -> int:
        return self.supports.shape[1]

    @property
    def S0(self) -> np.ndarray:
        return np.sign(self.A0)

    @cached_property
    def signals(self) -> list[GeneratedSignal]:
        return [self[i] for i in range(self.n)]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> GeneratedSignal:
        a = self.A0[:, i].copy()
        return GeneratedSignal(self.X[:, i].copy(), a, self.supports[i].copy(),
                               np.sign(a), self.E[:, i].copy())

    def subset(self, idx) -> SignalBatch:
        idx = np.asarray(idx)
        return SignalBatch(self.X[:, idx], self.A0[:, idx], self.E[:, idx],
                           self.supports[idx], self.seed, dict(self.metadata))


def signal_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for signal ``index`` of the dataset with master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def draw_support(rng: np.random.Generator, p: int, k: int) -> np.ndarray:
    """Uniformly random sorted subset of ``k`` atom indices out of ``p``."""
    if not 1 <= k <= p:
        raise InvalidArgumentError(f"need 1 <= k <= p, got k={k}, p={p}")
    return np.sort(rng.choice(p, size=k, replace=False))


def draw_coefficients(rng: np.random.Generator, J, model: CoefficientModel, p: int) -> np.ndarray:
    J = np.asarray(J, dtype=np.intp)
    if J.size and (J.min() < 0 or J.max() >= p or np.unique(J).size != J.size):
        raise InvalidArgumentError("support must hold distinct indices in [0, p)")
    alpha = np.zeros(p)
    if J.size:
        mag = rng.uniform(model.alpha_lo, model.alpha_hi, size=J.size)
        sign = np.where(rng.integers(0, 2, size=J.size) == 1, 1.0, -1.0)
        alpha[J] = sign * mag
    return alpha


def draw_noise(rng: np.random.Generator, m: int, noise: NoiseModel) -> np.ndarray:
    if noise.sigma == 0:
        return np.zeros(m)
    return noise.sigma * rng.standard_normal(m)


def synthesize_signal(D0, alpha0, noise: NoiseModel, rng: np.random.Generator) -> GeneratedSignal:
    D = as_matrix(D0)
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    if alpha0.shape != (D.shape[1],):
        raise InvalidArgumentError("coefficient length must equal the number of atoms")
    eps = draw_noise(rng, D.shape[0], noise)
    support = np.flatnonzero(alpha0)
    return GeneratedSignal(D @ alpha0 + eps, alpha0, support, np.sign(alpha0), eps)


def generate_signal(D0, coeff: CoefficientModel, noise: NoiseModel, seed: int, index: int
                    ) -> GeneratedSignal:
    """Signal ``index`` of ``generate_dataset(D0, coeff, noise, n, seed)`` for any n > index."""
    D = as_matrix(D0)
    rng = signal_rng(seed, index)
    J = draw_support(rng, D.shape[1], coeff.k)
    alpha = draw_coefficients(rng, J, coeff, D.shape[1])
    return synthesize_signal(D, alpha, noise, rng)


def generate_dataset(D0, coeff: CoefficientModel, noise: NoiseModel, n: int, seed: int
                     ) -> SignalBatch:
    if n < 1:
        raise InvalidArgumentError("n must be at least 1")
    D = as_matrix(D0)
    m, p = D.shape
    k = coeff.k
    if k > p:
        raise InvalidArgumentError(f"sparsity {k} exceeds atom count {p}")
    X = np.empty((m, n))
    A0 = np.zeros((p, n))
    E = np.zeros((m, n))
    supports = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        rng = signal_rng(seed, i)
        J = draw_support(rng, p, k)
        A0[:, i] = draw_coefficients(rng, J, coeff, p)
        E[:, i] = draw_noise(rng, m, noise)
        supports[i] = J
        # same per-column product as synthesize_signal, for bitwise reproducibility
        X[:, i] = D @ A0[:, i] + E[:, i]
    meta = {"m": m, "p": p, "k": k, "sigma": noise.sigma, "seed": int(seed),
            "distribution": coeff.descriptor()}
    return SignalBatch(X, A0, E, supports, int(seed), meta)


def batch_from_arrays(D0, A0, E, seed: int = 0, metadata: dict | None = None) -> SignalBatch:
    """Wrap explicit coefficient and noise matrices as a batch (all supports of equal size)."""
    D = as_matrix(D0)
    A0 = np.asarray(A0, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    counts = np.count_nonzero(A0, axis=0)
    if counts.size and np.any(counts != counts[0]):
        raise InvalidArgumentError("all signals must have the same support size")
    supports = np.array([np.flatnonzero(A0[:, i]) for i in range(A0.shape[1])], dtype=np.intp)
    supports = supports.reshape(A0.shape[1], int(counts[0]) if counts.size else 0)
    return SignalBatch(D @ A0 + E, A0, E, supports, seed, dict(metadata or {}))
