"""Dictionary learning by alternating Lasso coding and exact atom updates.

Every training signal keeps a stored code. Each epoch walks through shuffled
minibatches: the minibatch is recoded from its stored codes by a monotone
solver, the new codes replace their previous contribution to the sufficient
statistics ``A = sum a a^T`` and ``B = sum x a^T``, and every atom then takes
exact unit-norm block-coordinate steps. Neither step can raise the mean of
``0.5 ||x - D a||^2 + lam ||a||_1`` over the stored codes. That mean bounds the
empirical risk ``F_n`` of the current dictionary from above and equals it at
the start, once the initial codes are optimal, so ``F_n`` of the result never
exceeds ``F_n`` of the initial dictionary.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dictionary import Dictionary, as_matrix
from .errors import InvalidArgumentError, TuningFailedError
from .model import SignalBatch
from .sparse import lasso_batch, lasso_objectives, lasso_prox_batch

log = logging.getLogger(__name__)

UNUSED_ATOM_TOL = 1e-12
DUPLICATE_TOL = 1e-10
SUPPORT_TOL = 1e-12
INITIAL_ITERATIONS = 200
DEFAULT_GRID = tuple(np.logspace(-4, 1, 20))
INIT_KINDS = ("random", "oracle")
ERROR_MODES = ("overcomplete", "orthogonal")


@dataclass(frozen=True)
class LearnConfig:
    """Learner settings; ``init="oracle"`` starts from ``init_dictionary``."""

    lam: float
    batch_size: int = 128
    epochs: int = 25
    init: str = "random"
    init_dictionary: np.ndarray | None = field(default=None, compare=False, repr=False)
    tol: float = 1e-8
    max_iter: int = 20
    atom_sweeps: int = 1
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.max_iter, self.atom_sweeps) < 1:
            raise InvalidArgumentError("batch_size, epochs, max_iter and atom_sweeps must be at least 1")
        if self.lam <= 0:
            raise InvalidArgumentError("lam must be positive")
        if self.init not in INIT_KINDS:
            raise InvalidArgumentError(f"init must be one of {INIT_KINDS}")
        if self.init == "oracle" and self.init_dictionary is None:
            raise InvalidArgumentError("oracle initialization needs init_dictionary")

    def descriptor(self) -> dict:
        return {"lam": self.lam, "batch_size": self.batch_size, "epochs": self.epochs,
                "init": self.init, "tol": self.tol, "max_iter": self.max_iter,
                "atom_sweeps": self.atom_sweeps, "seed": self.seed}


def _initial_dictionary(X: np.ndarray, p: int, config: LearnConfig,
                        rng: np.random.Generator) -> np.ndarray:
    m = X.shape[0]
    if config.init == "oracle":
        D = as_matrix(config.init_dictionary).copy()
        if D.shape != (m, p):
            raise InvalidArgumentError(f"init dictionary must be {m}x{p}")
        return D
    # normalized training signals, Gaussian columns when the data run short
    norms = np.linalg.norm(X, axis=0)
    usable = np.flatnonzero(norms > 0)
    pick = rng.permutation(usable)[:p]
    D = np.empty((m, p))
    D[:, :pick.size] = X[:, pick] / norms[pick]
    for j in range(pick.size, p):
        g = rng.standard_normal(m)
        D[:, j] = g / np.linalg.norm(g)
    return D


def _atom_sweep(D: np.ndarray, A: np.ndarray, B: np.ndarray, residual_source) -> None:
    """One exact unit-norm update per atom, in place."""
    for j in range(D.shape[1]):
        if A[j, j] < UNUSED_ATOM_TOL:
            # the objective does not depend on an unused atom, so any unit vector keeps it
            D[:, j] = residual_source(D)
            log.info("atom %d unused; replaced by the worst-fit residual", j)
            continue
        u = B[:, j] - D @ A[:, j] + D[:, j] * A[j, j]
        nu = np.linalg.norm(u)
        if nu > 0:
            D[:, j] = u / nu


def _merge_duplicates(D: np.ndarray, codes: np.ndarray, X: np.ndarray, lam: float,
                      residual) -> int:
    """Fold each atom that repeats an earlier one (up to sign) into it, in place.

    The merged code leaves ``D a`` unchanged up to rounding and cannot raise
    ``||a||_1``; a merge is kept only if the stored-code objective does not
    rise. The freed atom then takes the worst-fit residual. Returns the number
    of merges.
    """
    merged = 0
    for j in range(1, D.shape[1]):
        corr = D[:, :j].T @ D[:, j]
        i = int(np.argmax(np.abs(corr)))
        if abs(corr[i]) < 1.0 - DUPLICATE_TOL:
            continue
        cols = np.flatnonzero(codes[j])
        if cols.size:
            before = lasso_objectives(D, X[:, cols], codes[:, cols], lam).sum()
            trial = codes[:, cols].copy()
            trial[i] += np.sign(corr[i]) * trial[j]
            trial[j] = 0.0
            if lasso_objectives(D, X[:, cols], trial, lam).sum() > before:
                continue
            codes[:, cols] = trial
        D[:, j] = residual(D)
        log.info("atom %d repeats atom %d; merged and replaced", j, i)
        merged += 1
    return merged


def learn_dictionary(batch: SignalBatch | np.ndarray, p: int, config: LearnConfig,
                     history: list | None = None) -> Dictionary:
    """Learn a ``p``-atom dictionary from the signals of ``batch``.

    If ``history`` is given, the mean stored-code objective at the current
    dictionary is appended at the start and after every epoch. It is an upper
    bound on the empirical risk, exact when the stored codes are optimal, and
    never increases. Coding steps run at most ``max_iter`` warm-started
    proximal-gradient iterations.
    """
    X = batch.X if isinstance(batch, SignalBatch) else np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidArgumentError("batch must hold at least one signal")
    if p < 1:
        raise InvalidArgumentError("p must be at least 1")
    m, n = X.shape
    lam, tol = config.lam, config.tol
    rng = np.random.default_rng(config.seed)
    D = _initial_dictionary(X, p, config, rng)
    codes = np.zeros((p, n))
    bs = config.batch_size

    def code(Dm, cols, init):
        A, _ = lasso_prox_batch(Dm, X[:, cols], lam, init, config.max_iter, tol)
        return A

    def worst_residual(Dm, cols=None):
        cols = cur if cols is None else cols
        R = X[:, cols] - Dm @ codes[:, cols]
        i = int(np.argmax(np.einsum("ij,ij->j", R, R)))
        r = R[:, i]
        nr = np.linalg.norm(r)
        if nr == 0:
            r = rng.standard_normal(m)
            nr = np.linalg.norm(r)
        return r / nr

    def initial(Dm, cols, init):
        # closed forms on greedy supports settle most columns exactly
        A, kkt = lasso_batch(Dm, X[:, cols], lam, tol, 0, strict=False)
        rest = kkt > tol
        if rest.any():
            A[:, rest], _ = lasso_prox_batch(Dm, X[:, cols[rest]], lam, A[:, rest],
                                             INITIAL_ITERATIONS, tol)
        return A

    codes = _code_all(initial, D, codes, n, bs)
    A = codes @ codes.T
    B = X @ codes.T

    def record(epoch):
        value = float(np.mean(lasso_objectives(D, X, codes, lam)))
        if history is not None:
            history.append(value)
        if config.checkpoint_dir is not None:
            from .serialization import write_checkpoint
            write_checkpoint(config.checkpoint_dir, epoch, D, config.descriptor(),
                             {"stored_code_objective": value})

    record(0)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            cur = order[start:start + bs]
            old = codes[:, cur]
            new = code(D, cur, old)
            A += new @ new.T - old @ old.T
            B += X[:, cur] @ (new - old).T
            codes[:, cur] = new
            for _ in range(config.atom_sweeps):
                _atom_sweep(D, A, B, worst_residual)
        # the unit-norm step is exact; renormalizing only removes rounding
        D /= np.linalg.norm(D, axis=0)
        _merge_duplicates(D, codes, X, lam, lambda Dm: worst_residual(Dm, slice(None)))
        # rebuilding the statistics stops rounding drift from the running updates
        A = codes @ codes.T
        B = X @ codes.T
        record(epoch)
    return Dictionary(D)


def _code_all(code, D, codes, n, bs):
    out = np.empty_like(codes)
    chunk = max(bs, 4096)
    for start in range(0, n, chunk):
        cols = np.arange(start, min(start + chunk, n))
        out[:, cols] = code(D, cols, codes[:, cols])
    return out


# ---------------------------------------------------------------- lambda tuning

@dataclass(frozen=True)
class TuningResult:
    lam: float
    mean_support: float
    evaluated: tuple

    def __float__(self) -> float:
        return self.lam


def tune_lambda_report(aux_batch: SignalBatch | np.ndarray, D, grid=None, target_k: float = 1.0,
                       tol: float = 1e-8) -> TuningResult:
    """Grid point whose mean Lasso support size is closest to ``target_k``.

    The grid is visited from the largest value down, each solve warm-started
    from the previous one. The walk stops once the mean support exceeds
    ``target_k + 1`` and keeps growing, since smaller values only add atoms.
    Ties go to the larger value.
    """
    X = aux_batch.X if isinstance(aux_batch, SignalBatch) else np.asarray(aux_batch, dtype=np.float64)
    grid = np.asarray(DEFAULT_GRID if grid is None else grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0):
        raise InvalidArgumentError("grid must be nonempty and positive")
    D = as_matrix(D)
    codes = None
    best = None
    prev = -math.inf
    evaluated = []
    for lam in np.sort(grid)[::-1]:
        codes, _ = lasso_batch(D, X, float(lam), tol, init=codes, greedy=0 if codes is not None else 8)
        size = float(np.mean(np.count_nonzero(np.abs(codes) > SUPPORT_TOL, axis=0)))
        evaluated.append((float(lam), size))
        if best is None or abs(size - target_k) < abs(best[1] - target_k):
            best = (float(lam), size)
        if size - target_k > 1 and size > prev:
            break
        prev = size
    if all(size == 0 for _, size in evaluated):
        if grid.size > 1:
            raise TuningFailedError("every grid value gives empty supports; extend the grid downward")
        warnings.warn("single grid value gives empty supports", RuntimeWarning, stacklevel=2)
    return TuningResult(best[0], best[1], tuple(evaluated))


def tune_lambda(aux_batch, D, grid=None, target_k: float = 1.0, tol: float = 1e-8) -> float:
    return tune_lambda_report(aux_batch, D, grid, target_k, tol).lam


# ---------------------------------------------------------------- matching and errors

@dataclass(frozen=True)
class MatchResult:
    """``D_hat[:, permutation] * signs`` is the alignment of ``D_hat`` onto ``D0``."""

    permutation: np.ndarray
    signs: np.ndarray
    matched_error: float
    normalized_error: float
    m: int
    p: int

    def apply(self, D_hat) -> np.ndarray:
        return as_matrix(D_hat)[:, self.permutation] * self.signs


def _normalizer(m: int, p: int, mode: str) -> float:
    if mode == "overcomplete":
        return math.sqrt(m * p**3)
    if mode == "orthogonal":
        return math.sqrt(m)
    raise InvalidArgumentError(f"mode must be one of {ERROR_MODES}")


def match_atoms(D_hat, D0, mode: str | None = None) -> MatchResult:
    """Align ``D_hat`` to ``D0`` over atom permutations and sign flips.

    ``mode`` picks the normalizer; by default ``overcomplete`` when p > m.
    """
    Dh, Dr = as_matrix(D_hat), as_matrix(D0)
    if Dh.shape != Dr.shape:
        raise InvalidArgumentError("dictionaries must have the same shape")
    m, p = Dr.shape
    mode = mode or ("overcomplete" if p > m else "orthogonal")
    corr = Dr.T @ Dh
    rows, cols = linear_sum_assignment(1.0 - np.abs(corr))
    perm = cols[np.argsort(rows)]
    c = corr[np.arange(p), perm]
    signs = np.where(c < 0, -1.0, 1.0)
    err = float(np.linalg.norm(Dr - Dh[:, perm] * signs))
    return MatchResult(perm, signs, err, err / _normalizer(m, p, mode), m, p)


def normalized_error(match: MatchResult, mode: str) -> float:
    return match.matched_error / _normalizer(match.m, match.p, mode)

