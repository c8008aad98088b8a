"""Dictionaries with unit-norm atoms and their oblique-manifold perturbations.

A perturbation of a reference dictionary ``D0`` moves atom ``j`` along the
great circle through ``d0_j`` and a unit direction ``w_j`` orthogonal to it:

    d_j(t) = cos(v_j t) d0_j + sin(v_j t) w_j

with ``v`` a unit velocity vector and ``t >= 0`` the radius.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from math import comb

import numpy as np
import scipy.linalg

from .errors import CombinatorialGuardError, InvalidArgumentError

UNIT_TOL = 1e-10
PERTURB_TOL = 1e-8
RIP_ENUMERATION_LIMIT = 10**6


class Dictionary:
    """Immutable m x p matrix with unit-norm columns.

    Mutual coherence and spectral norm are computed lazily and cached.
    """

    def __init__(self, entries, *, atol: float = UNIT_TOL):
        D = np.array(entries, dtype=np.float64, copy=True)
        if D.ndim != 2 or D.size == 0:
            raise InvalidArgumentError("dictionary entries must be a non-empty 2-d array")
        norms = np.linalg.norm(D, axis=0)
        if np.max(np.abs(norms - 1.0)) > atol:
            raise InvalidArgumentError(
                f"columns must have unit norm (max deviation {np.max(np.abs(norms - 1.0)):.3e})")
        D.setflags(write=False)
        self._D = D

    @classmethod
    def from_unnormalized(cls, entries) -> Dictionary:
        D = np.asarray(entries, dtype=np.float64)
        norms = np.linalg.norm(D, axis=0)
        if np.any(norms == 0):
            raise InvalidArgumentError("cannot normalize a zero column")
        return cls(D / norms)

    @property
    def entries(self) -> np.ndarray:
        return self._D

    @property
    def shape(self) -> tuple[int, int]:
        return self._D.shape

    @property
    def m(self) -> int:
        return self._D.shape[0]

    @property
    def p(self) -> int:
        return self._D.shape[1]

    @cached_property
    def mu0(self) -> float:
        return coherence(self._D)

    @cached_property
    def spectral_norm(self) -> float:
        return spectral_norm(self._D)

    def __array__(self, dtype=None, copy=None):
        return self._D if dtype is None else self._D.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, Dictionary) and np.array_equal(self._D, other._D)

    def __hash__(self):
        return hash((self._D.shape, self._D.tobytes()))

    def __repr__(self):
        return f"Dictionary(m={self.m}, p={self.p})"


def as_matrix(D) -> np.ndarray:
    return D.entries if isinstance(D, Dictionary) else np.asarray(D, dtype=np.float64)


@dataclass(frozen=True)
class Perturbation:
    """Tangent directions ``W``, unit velocity ``v`` and radius ``t`` around ``D0``."""

    W: np.ndarray
    v: np.ndarray
    t: float

    def validate(self, D0, atol: float = UNIT_TOL) -> None:
        check_perturbation(as_matrix(D0), self.W, self.v, self.t, atol)


def check_perturbation(D0: np.ndarray, W: np.ndarray, v: np.ndarray, t: float,
                       atol: float = PERTURB_TOL) -> None:
    W = np.asarray(W)
    v = np.asarray(v)
    if W.shape != D0.shape or v.shape != (D0.shape[1],):
        raise InvalidArgumentError("W must match D0 in shape and v must have length p")
    if t < 0:
        raise InvalidArgumentError("radius t must be nonnegative")
    if np.max(np.abs(np.einsum("ij,ij->j", W, D0))) > atol:
        raise InvalidArgumentError("columns of W must be orthogonal to the matching atoms")
    if np.max(np.abs(np.einsum("ij,ij->j", W, W) - 1.0)) > atol:
        raise InvalidArgumentError("columns of W must have unit norm")
    if abs(np.linalg.norm(v) - 1.0) > atol:
        raise InvalidArgumentError("velocity v must have unit norm")


def _check_power_of_two(m: int) -> None:
    if not isinstance(m, (int, np.integer)) or m < 1 or (m & (m - 1)) != 0:
        raise InvalidArgumentError(f"m must be a power of 2, got {m}")


def hadamard(m: int) -> Dictionary:
    """Orthogonal Sylvester-Hadamard dictionary scaled to unit columns."""
    _check_power_of_two(m)
    return Dictionary(scipy.linalg.hadamard(m).astype(np.float64) / np.sqrt(m))


def hadamard_dirac(m: int) -> Dictionary:
    """Concatenation ``[H | I]`` of the Hadamard and canonical bases (p = 2m)."""
    _check_power_of_two(m)
    H = scipy.linalg.hadamard(m).astype(np.float64) / np.sqrt(m)
    return Dictionary(np.hstack([H, np.eye(m)]))


def coherence(D) -> float:
    """Largest absolute inner product between two distinct atoms."""
    D = as_matrix(D)
    if D.shape[1] < 2:
        return 0.0
    G = np.abs(D.T @ D)
    np.fill_diagonal(G, 0.0)
    return float(min(G.max(), 1.0))


def coherence_radius(mu0: float, t: float) -> float:
    """Coherence upper bound ``mu0 + 3t`` for dictionaries at radius ``t``."""
    return mu0 + 3.0 * t


def coherence_factor(k: int, mu_t: float) -> float:
    """``1 / sqrt(1 - k mu(t))``, infinite once ``k mu(t) >= 1``."""
    gap = 1.0 - k * mu_t
    return float(1.0 / np.sqrt(gap)) if gap > 0 else float("inf")


def spectral_norm(D, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on ``D^T D``."""
    D = as_matrix(D)
    G = D.T @ D
    z = np.full(D.shape[1], 1.0 / np.sqrt(D.shape[1]))
    eig = 0.0
    for _ in range(max_iter):
        y = G @ z
        new = float(z @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        z = y / ny
        if abs(new - eig) <= tol * max(new, 1.0):
            eig = new
            break
        eig = new
    return float(np.sqrt(max(eig, 0.0)))


def rip_constant(D, k: int) -> float:
    """Exact restricted isometry constant of order ``k`` by enumerating supports."""
    D = as_matrix(D)
    p = D.shape[1]
    if not 1 <= k <= p:
        raise InvalidArgumentError(f"need 1 <= k <= p, got k={k}, p={p}")
    if comb(p, k) > RIP_ENUMERATION_LIMIT:
        raise CombinatorialGuardError(
            f"C({p},{k}) supports exceed the enumeration limit", k * coherence(D))
    G = D.T @ D
    delta = 0.0
    supports = combinations(range(p), k)
    while True:
        chunk = np.array(list(_take(supports, 65536)), dtype=np.intp)
        if chunk.size == 0:
            break
        blocks = G[chunk[:, :, None], chunk[:, None, :]]
        eig = np.linalg.eigvalsh(blocks)
        delta = max(delta, float(np.max(eig[:, -1] - 1.0)), float(np.max(1.0 - eig[:, 0])))
    return delta


def _take(it, n):
    for _, item in zip(range(n), it):
        yield item


def sample_tangent(rng: np.random.Generator, D0) -> np.ndarray:
    """Random unit directions, each orthogonal to the matching atom of ``D0``."""
    D0 = as_matrix(D0)
    m, p = D0.shape
    if m < 2:
        raise InvalidArgumentError("no tangent direction exists when m = 1")
    W = np.empty_like(D0)
    todo = np.arange(p)
    while todo.size:
        Z = rng.standard_normal((m, todo.size))
        Z -= D0[:, todo] * np.einsum("ij,ij->j", D0[:, todo], Z)
        norms = np.linalg.norm(Z, axis=0)
        ok = norms > 1e-8
        W[:, todo[ok]] = Z[:, ok] / norms[ok]
        todo = todo[~ok]
    # second projection removes rounding left by the first
    W -= D0 * np.einsum("ij,ij->j", D0, W)
    W /= np.linalg.norm(W, axis=0)
    return W


def sample_velocity(rng: np.random.Generator, p: int, positive: bool = True) -> np.ndarray:
    """Uniform draw on the unit sphere, or on its nonnegative orthant."""
    while True:
        v = rng.standard_normal(p)
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            break
    v /= nv
    return np.abs(v) if positive else v


def perturb_matrix(D0: np.ndarray, W: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    """Unchecked matrix form of ``perturb``."""
    if t == 0:
        return D0.copy()
    return D0 * np.cos(v * t) + W * np.sin(v * t)


def perturb(D0, W, v, t: float) -> Dictionary:
    """Dictionary at radius ``t`` along ``(W, v)``; ``t = 0`` returns ``D0``."""
    D0m = as_matrix(D0)
    check_perturbation(D0m, W, v, t)
    return Dictionary(perturb_matrix(D0m, np.asarray(W, float), np.asarray(v, float), t))


def _orthogonal_unit(d: np.ndarray) -> np.ndarray:
    e = np.zeros_like(d)
    e[int(np.argmin(np.abs(d)))] = 1.0
    e -= d * (d @ e)
    return e / np.linalg.norm(e)


def decompose(D1, D2) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse of ``perturb``: find ``(W, v, tau)`` with ``perturb(D1, W, v, tau) = D2``.

    Angles lie in [0, pi], so the returned velocity is nonnegative. Columns
    where ``D1`` and ``D2`` agree get an arbitrary orthogonal direction.
    """
    A = as_matrix(D1)
    B = as_matrix(D2)
    if A.shape != B.shape:
        raise InvalidArgumentError("dictionaries must have the same shape")
    c = np.einsum("ij,ij->j", A, B)
    Z = B - A * c
    s = np.linalg.norm(Z, axis=0)
    theta = np.arctan2(s, c)
    W = np.empty_like(A)
    for j in range(A.shape[1]):
        # coincident or antipodal columns: any orthogonal direction works
        W[:, j] = Z[:, j] / s[j] if s[j] > 1e-14 else _orthogonal_unit(A[:, j])
    tau = float(np.linalg.norm(theta))
    if tau == 0.0:
        v = np.full(A.shape[1], 1.0 / np.sqrt(A.shape[1]))
    else:
        v = theta / tau
    return W, v, tau


def tangent_derivative(D0, W, v, t: float) -> np.ndarray:
    """Derivative of the perturbed dictionary with respect to the radius."""
    D0 = as_matrix(D0)
    v = np.asarray(v, float)
    return (-D0 * np.sin(v * t) + np.asarray(W, float) * np.cos(v * t)) * v
