"""Lasso coding, sign-restricted closed forms and exact-recovery certificates.

Notation: for a dictionary ``D`` and support ``J``, ``Theta_J`` is the inverse
Gram matrix ``(D_J^T D_J)^{-1}`` and ``P_J = D_J Theta_J D_J^T`` the orthogonal
projector onto the span of the selected atoms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dictionary import as_matrix, coherence_factor
from .errors import (ConditionViolatedError, ConvergenceError, InvalidArgumentError,
                     SingularSupportError)

GRAM_COND_LIMIT = 1e12


@dataclass(frozen=True)
class LassoSolution:
    alpha: np.ndarray
    support: np.ndarray
    sign: np.ndarray
    objective: float
    kkt_residual: float
    n_iter: int = 0
    history: tuple = ()


@dataclass(frozen=True)
class SupportLinearAlgebra:
    theta: np.ndarray
    projector: np.ndarray
    gram_condition_ok: bool


@dataclass(frozen=True)
class RecoveryCertificate:
    recovered: bool
    sign_margin: float
    dual_margin: float


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def lasso_objective(D, x, alpha, lam: float) -> float:
    D = as_matrix(D)
    r = x - D @ alpha
    return 0.5 * float(r @ r) + lam * float(np.abs(alpha).sum())


def lasso_objectives(D: np.ndarray, X: np.ndarray, A: np.ndarray, lam: float) -> np.ndarray:
    R = X - D @ A
    return 0.5 * np.einsum("ij,ij->j", R, R) + lam * np.abs(A).sum(axis=0)


def kkt_residuals(G: np.ndarray, C: np.ndarray, A: np.ndarray, lam: float) -> np.ndarray:
    """Largest violation of the Lasso optimality conditions, per column.

    ``G = D^T D`` and ``C = D^T X``; on the support the residual correlation
    must equal ``lam * sign``, elsewhere its magnitude must not exceed ``lam``.
    """
    g = C - G @ A
    on = A != 0
    viol = np.where(on, np.abs(g - lam * np.sign(A)), np.maximum(np.abs(g) - lam, 0.0))
    return viol.max(axis=0)


def _solve_stack(Gs: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve a stack of small symmetric systems, flagging numerically singular ones.

    Returns the solutions (zero where singular) and the mask of solved systems.
    """
    try:
        return np.linalg.solve(Gs, rhs[:, :, None])[:, :, 0], np.ones(len(Gs), dtype=bool)
    except np.linalg.LinAlgError:
        good = np.linalg.cond(Gs) < GRAM_COND_LIMIT
        sol = np.zeros(rhs.shape)
        if good.any():
            sol[good] = np.linalg.solve(Gs[good], rhs[good][:, :, None])[:, :, 0]
        return sol, good


def _polish(G, C, A, lam, tol, rounds: int = 4, max_guess: int = 8):
    """Replace columns by the exact solution on their current sign pattern.

    Coordinates whose closed-form value disagrees in sign are dropped and the
    system re-solved, up to ``rounds`` times; remaining columns try the
    supports made of their ``r`` largest coordinates. Returns the candidate
    matrix and a mask of columns whose candidate satisfies the optimality
    conditions.
    """
    n = A.shape[1]
    out = A.copy()
    found = np.zeros(n, dtype=bool)
    on = A != 0
    S = np.sign(A)
    todo = np.arange(n)
    for _ in range(rounds):
        if todo.size == 0:
            break
        sizes = on[:, todo].sum(axis=0)
        retry = []
        for s in np.unique(sizes):
            cols = todo[sizes == s]
            if s == 0:
                out[:, cols] = 0.0
                found[cols] = True
                continue
            J = np.nonzero(on[:, cols].T)[1].reshape(cols.size, s)
            Sj = S[J, cols[:, None]]
            Gs = G[J[:, :, None], J[:, None, :]]
            sol, good = _solve_stack(Gs, C[J, cols[:, None]] - lam * Sj)
            cols, J, Sj, sol = cols[good], J[good], Sj[good], sol[good]
            if cols.size == 0:
                continue
            agree = np.sign(sol) == Sj
            full = agree.all(axis=1)
            c_ok, J_ok = cols[full], J[full]
            out[:, c_ok] = 0.0
            out[J_ok, c_ok[:, None]] = sol[full]
            found[c_ok] = True
            c_bad = cols[~full]
            on[J[~full], c_bad[:, None]] &= agree[~full]
            retry.append(c_bad)
        todo = np.concatenate(retry) if retry else np.empty(0, dtype=np.intp)
    found &= kkt_residuals(G, C, out, lam) <= tol
    # fall back to the r largest coordinates as support guesses
    order = np.argsort(-np.abs(A), axis=0, kind="stable")
    nnz = (A != 0).sum(axis=0)
    for r in range(1, min(max_guess, int(nnz.max(initial=0))) + 1):
        cols = np.flatnonzero(~found & (nnz >= r))
        if cols.size == 0:
            continue
        J = order[:r, cols].T
        Sj = np.sign(A[J, cols[:, None]])
        Gs = G[J[:, :, None], J[:, None, :]]
        sol, good = _solve_stack(Gs, C[J, cols[:, None]] - lam * Sj)
        cols, J, Sj, sol = cols[good], J[good], Sj[good], sol[good]
        if cols.size == 0:
            continue
        full = (np.sign(sol) == Sj).all(axis=1)
        cols, J, sol = cols[full], J[full], sol[full]
        cand = np.zeros((A.shape[0], cols.size))
        cand[J, np.arange(cols.size)[:, None]] = sol
        ok = kkt_residuals(G, C[:, cols], cand, lam) <= tol
        out[:, cols[ok]] = cand[:, ok]
        found[cols[ok]] = True
    return out, found


def _homotopy(G, c, lam: float, max_steps: int):
    """Exact Lasso minimizer by following the solution path down from ``max|c|``.

    ``G = D^T D`` and ``c = D^T x`` for a single signal. Returns ``None`` if
    the path meets a singular active Gram matrix or exceeds ``max_steps``.
    """
    p = c.size
    alpha = np.zeros(p)
    cur = float(np.max(np.abs(c), initial=0.0))
    if cur <= lam:
        return alpha
    E = [int(np.argmax(np.abs(c)))]
    s = [float(np.sign(c[E[0]]))]
    for _ in range(max_steps):
        GE = G[np.ix_(E, E)]
        if np.linalg.cond(GE) >= GRAM_COND_LIMIT:
            return None
        a0 = np.linalg.solve(GE, c[E])
        w = np.linalg.solve(GE, np.array(s))
        u = c - G[:, E] @ a0
        v = G[:, E] @ w
        nxt, event = lam, None
        for j in range(p):
            if j in E:
                continue
            for num, den in ((u[j], 1.0 - v[j]), (-u[j], 1.0 + v[j])):
                if den > 1e-14:
                    cand = num / den
                    if nxt < cand < cur * (1 - 1e-12):
                        nxt, event = cand, ("add", j, 1.0 if den == 1.0 - v[j] else -1.0)
        for i, j in enumerate(E):
            if w[i] != 0:
                cand = a0[i] / w[i]
                if nxt < cand < cur * (1 - 1e-12):
                    nxt, event = cand, ("drop", i, 0.0)
        if event is None:
            alpha[:] = 0.0
            alpha[E] = a0 - lam * w
            return alpha
        cur = nxt
        kind, j, sign = event
        if kind == "add":
            E.append(j)
            s.append(sign)
        else:
            del E[j]
            del s[j]
            if not E:
                return None
    return None


def _greedy_start(G, C, lam, tol, max_size: int):
    """Exact solutions found on greedily grown supports.

    Each step adds the atom that most violates the optimality conditions at
    the current sign-restricted solution, with the sign of its residual
    correlation, then re-solves in closed form.
    """
    p, n = C.shape
    out = np.zeros((p, n))
    found = kkt_residuals(G, C, out, lam) <= tol
    J = np.empty((n, 0), dtype=np.intp)
    S = np.empty((n, 0))
    g = C.copy()
    rows = np.arange(n)[:, None]
    for r in range(1, max_size + 1):
        gs = np.abs(g)
        gs[J, rows] = -np.inf
        pick = np.argmax(gs, axis=0)
        J = np.concatenate([J, pick[:, None]], axis=1)
        S = np.concatenate([S, np.sign(g[pick, np.arange(n)])[:, None]], axis=1)
        Gs = G[J[:, :, None], J[:, None, :]]
        sol, good = _solve_stack(Gs, C[J, rows] - lam * S)
        if not good.any():
            break
        g = C - np.einsum("pnr,nr->pn", G[:, J], sol)
        agree = good & (np.sign(sol) == S).all(axis=1)
        cols = np.flatnonzero(agree & ~found)
        S = np.where(sol != 0, np.sign(sol), S)
        if cols.size == 0:
            continue
        cand = np.zeros((p, cols.size))
        cand[J[cols], np.arange(cols.size)[:, None]] = sol[cols]
        ok = kkt_residuals(G, C[:, cols], cand, lam) <= tol
        out[:, cols[ok]] = cand[:, ok]
        found[cols[ok]] = True
        if found.all():
            break
    return out, found


def lasso_batch(D, X, lam: float, tol: float = 1e-10, max_iter: int = 100_000,
                init: np.ndarray | None = None, polish_every: int = 4,
                greedy: int = 8, history: list | None = None,
                strict: bool = True, path_after: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Solve the Lasso for every column of ``X`` by cyclic coordinate descent.

    Coordinate sweeps are vectorized across signals. Before the sweeps, closed
    forms on greedily grown supports of size up to ``greedy`` are tried; every
    ``polish_every`` sweeps each unfinished column is replaced, when this is
    optimal, by the exact minimizer on its current sign pattern. Columns still
    open after ``path_after`` sweeps are solved by exact path following. A candidate
    is accepted only if it meets the optimality conditions within ``tol``.
    Returns the p x n code matrix and the per-column optimality residuals.
    With ``strict`` off, hitting ``max_iter`` returns the current iterate,
    whose objective is never above that of ``init``, instead of raising.
    """
    if lam <= 0:
        raise InvalidArgumentError("lam must be positive")
    D = as_matrix(D)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != D.shape[0]:
        raise InvalidArgumentError("signal length must equal the number of dictionary rows")
    p, n = D.shape[1], X.shape[1]
    G = D.T @ D
    C = D.T @ X
    gdiag = np.diag(G).copy()
    # an optimal support never needs more than m atoms
    guess = min(D.shape[0], p)
    A = np.zeros((p, n)) if init is None else np.array(init, dtype=np.float64, copy=True)
    kkt = kkt_residuals(G, C, A, lam)
    if history is not None:
        history.append(lasso_objectives(D, X, A, lam))
    act = np.flatnonzero(kkt > tol)
    if act.size and init is not None:
        cand, ok = _polish(G, C[:, act], A[:, act], lam, tol, max_guess=guess)
        A[:, act[ok]] = cand[:, ok]
        kkt[act[ok]] = kkt_residuals(G, C[:, act[ok]], cand[:, ok], lam)
        act = act[~ok]
    if act.size and greedy:
        cand, ok = _greedy_start(G, C[:, act], lam, tol, min(D.shape[0], p, greedy))
        if history is None:
            A[:, act[ok]] = cand[:, ok]
            kkt[act[ok]] = kkt_residuals(G, C[:, act[ok]], cand[:, ok], lam)
            act = act[~ok]
        elif ok.all():
            # the exact optimum can only lower the objective
            A[:, act] = cand
            kkt[act] = kkt_residuals(G, C[:, act], cand, lam)
            history.append(lasso_objectives(D, X, A, lam))
            act = act[:0]
    sweep = 0
    while act.size:
        if sweep >= max_iter:
            if not strict:
                break
            worst = int(act[np.argmax(kkt[act])])
            raise ConvergenceError("coordinate descent did not converge", float(kkt[worst]), worst)
        Aw = A[:, act]
        Cw = C[:, act]
        Q = Cw - G @ Aw
        for j in range(p):
            aj = Aw[j]
            new = soft_threshold(Q[j] + gdiag[j] * aj, lam) / gdiag[j]
            d = new - aj
            if np.any(d):
                Aw[j] = new
                Q -= np.outer(G[:, j], d)
        sweep += 1
        if sweep % polish_every == 0:
            cand, ok = _polish(G, Cw, Aw, lam, tol, max_guess=guess)
            Aw[:, ok] = cand[:, ok]
        if sweep == path_after:
            for i in range(act.size):
                sol = _homotopy(G, Cw[:, i], lam, 50 * p)
                if sol is not None and kkt_residuals(G, Cw[:, i:i + 1], sol[:, None], lam)[0] <= tol:
                    Aw[:, i] = sol
        A[:, act] = Aw
        if history is not None:
            history.append(lasso_objectives(D, X, A, lam))
        kkt[act] = kkt_residuals(G, Cw, Aw, lam)
        act = act[kkt[act] > tol]
    return A, kkt


def lasso_prox_batch(D, X, lam: float, init: np.ndarray | None = None, n_iter: int = 20,
                     tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Approximate Lasso codes by monotone accelerated proximal gradient.

    Runs at most ``n_iter`` iterations on all columns at once. Each column
    keeps the best iterate seen, so no objective ever exceeds its value at
    ``init``; columns meeting the optimality conditions within ``tol`` stop
    early. Returns the p x n codes and per-column optimality residuals.
    """
    if lam <= 0:
        raise InvalidArgumentError("lam must be positive")
    D = as_matrix(D)
    X = np.asarray(X, dtype=np.float64)
    G = D.T @ D
    C = D.T @ X
    xx = np.einsum("ij,ij->j", X, X)
    step = 1.0 / max(float(np.linalg.eigvalsh(G)[-1]), 1e-300)

    def objective(A):
        return 0.5 * (xx - 2 * np.einsum("ij,ij->j", A, C) + np.einsum("ij,ij->j", A, G @ A)) \
            + lam * np.abs(A).sum(axis=0)

    A = np.zeros((G.shape[0], X.shape[1])) if init is None else np.array(init, dtype=np.float64)
    best = objective(A)
    Y = A.copy()
    s = 1.0
    for it in range(1, n_iter + 1):
        Z = soft_threshold(Y - step * (G @ Y - C), step * lam)
        fz = objective(Z)
        better = fz < best
        prev = A
        A = np.where(better, Z, A)
        best = np.where(better, fz, best)
        s_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * s * s))
        Y = A + (s / s_next) * (Z - A) + ((s - 1.0) / s_next) * (A - prev)
        s = s_next
        if it % 5 == 0 and np.all(kkt_residuals(G, C, A, lam) <= tol):
            break
    return A, kkt_residuals(G, C, A, lam)


def lasso_solve(D, x, lam: float, tol: float = 1e-10, max_iter: int = 100_000,
                record_history: bool = False) -> LassoSolution:
    """Minimize ``0.5 ||x - D a||^2 + lam ||a||_1`` over ``a``."""
    D = as_matrix(D)
    x = np.asarray(x, dtype=np.float64)
    hist: list | None = [] if record_history else None
    A, kkt = lasso_batch(D, x[:, None], lam, tol, max_iter, history=hist)
    alpha = A[:, 0]
    sign = np.where(np.abs(alpha) > tol, np.sign(alpha), 0.0)
    return LassoSolution(alpha, np.flatnonzero(sign), sign, lasso_objective(D, x, alpha, lam),
                         float(kkt[0]), max(len(hist) - 1, 0) if hist is not None else 0,
                         tuple(float(h[0]) for h in hist) if hist is not None else ())


def lasso_values(D, X, lam: float, tol: float = 1e-10, max_iter: int = 100_000,
                 init: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-signal optimal Lasso values and the codes attaining them."""
    D = as_matrix(D)
    A, _ = lasso_batch(D, X, lam, tol, max_iter, init=init)
    return lasso_objectives(D, np.asarray(X, float), A, lam), A


def _gram_inverse(Gs: np.ndarray, index_offset: int = 0) -> np.ndarray:
    """Inverse of a Gram matrix, or a stack of them, through Cholesky factors."""
    single = Gs.ndim == 2
    G3 = Gs[None] if single else Gs
    cond = np.linalg.cond(G3)
    bad = ~(cond < GRAM_COND_LIMIT)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise SingularSupportError(f"support Gram condition number {cond[i]:.3e} exceeds "
                                   f"{GRAM_COND_LIMIT:.0e}", None if single else index_offset + i)
    Linv = np.linalg.inv(np.linalg.cholesky(G3))
    theta = np.swapaxes(Linv, -1, -2) @ Linv
    return theta[0] if single else theta


def support_linear_algebra(D, J) -> SupportLinearAlgebra:
    D = as_matrix(D)
    DJ = D[:, np.asarray(J, dtype=np.intp)]
    Gs = DJ.T @ DJ
    ok = bool(np.linalg.cond(Gs) < GRAM_COND_LIMIT) if Gs.size else True
    if not ok:
        return SupportLinearAlgebra(np.full(Gs.shape, np.nan), np.full((D.shape[0],) * 2, np.nan), False)
    theta = _gram_inverse(Gs) if Gs.size else Gs
    return SupportLinearAlgebra(theta, DJ @ theta @ DJ.T, True)


def _support_sign(J, s, p):
    J = np.asarray(J, dtype=np.intp)
    s = np.asarray(s, dtype=np.float64)
    if s.size == J.size:
        return J, s.reshape(J.shape)
    if s.size == p:
        return J, s[J]
    raise InvalidArgumentError("sign must be given on the support or as a length-p vector")


def restricted_solution(D, x, J, s, lam: float) -> np.ndarray:
    """Minimizer of ``0.5 ||x - D a||^2 + lam s^T a`` over vectors supported on ``J``."""
    D = as_matrix(D)
    J, sJ = _support_sign(J, s, D.shape[1])
    DJ = D[:, J]
    theta = _gram_inverse(DJ.T @ DJ)
    alpha = np.zeros(D.shape[1])
    alpha[J] = theta @ (DJ.T @ x - lam * sJ)
    return alpha


def phi(D, x, J, s, lam: float) -> float:
    """Optimal value of the sign-restricted problem solved by ``restricted_solution``."""
    D = as_matrix(D)
    J, sJ = _support_sign(J, s, D.shape[1])
    DJ = D[:, J]
    theta = _gram_inverse(DJ.T @ DJ)
    b = DJ.T @ x - lam * sJ
    return 0.5 * (float(x @ x) - float(b @ theta @ b))


def _support_stack(D: np.ndarray, supports: np.ndarray):
    """Atoms and inverse Grams for a stack of equal-size supports."""
    DJ = np.swapaxes(D[:, supports], 0, 1)  # n x m x k
    Gs = np.swapaxes(DJ, 1, 2) @ DJ
    return DJ, _gram_inverse(Gs)


def batch_signs(A0: np.ndarray, supports: np.ndarray) -> np.ndarray:
    return np.sign(A0[supports, np.arange(supports.shape[0])[:, None]])


def phi_batch(D, X: np.ndarray, supports: np.ndarray, signs: np.ndarray, lam: float
              ) -> np.ndarray:
    """Vector of sign-restricted values, one per column of ``X``."""
    D = as_matrix(D)
    DJ, theta = _support_stack(D, supports)
    b = np.einsum("nmk,mn->nk", DJ, X) - lam * signs
    return 0.5 * (np.einsum("mn,mn->n", X, X) - np.einsum("nk,nkl,nl->n", b, theta, b))


def restricted_batch(D, X, supports, signs, lam):
    """Closed-form restricted solutions, as a p x n code matrix."""
    D = as_matrix(D)
    DJ, theta = _support_stack(D, supports)
    b = np.einsum("nmk,mn->nk", DJ, X) - lam * signs
    A = np.zeros((D.shape[1], X.shape[1]))
    A[supports, np.arange(X.shape[1])[:, None]] = np.einsum("nkl,nl->nk", theta, b)
    return A


def certify_batch(D, X: np.ndarray, supports: np.ndarray, signs: np.ndarray, lam: float
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact-recovery test for every column; returns (recovered, sign_margin, dual_margin)."""
    D = as_matrix(D)
    n = X.shape[1]
    DJ, theta = _support_stack(D, supports)
    b = np.einsum("nmk,mn->nk", DJ, X) - lam * signs
    alpha = np.einsum("nkl,nl->nk", theta, b)
    sign_margin = (signs * alpha).min(axis=1)
    coef = np.einsum("nkl,nmk,mn->nl", theta, DJ, X)
    R = X - np.einsum("nmk,nk->mn", DJ, coef)
    off = np.ones((D.shape[1], n), dtype=bool)
    off[supports, np.arange(n)[:, None]] = False
    corr = np.where(off, np.abs(D.T @ R), 0.0).max(axis=0)
    M = np.einsum("mp,nmk,nkl->npl", D, DJ, theta)
    irrep = np.where(off.T, np.abs(M).sum(axis=2), 0.0).max(axis=1)
    dual_margin = lam - (corr + lam * irrep)
    return (sign_margin > 0) & (dual_margin > 0), sign_margin, dual_margin


def certify_exact_recovery(D, x, alpha0, lam: float) -> RecoveryCertificate:
    """Check that the Lasso solution is unique and carries the sign pattern of ``alpha0``."""
    D = as_matrix(D)
    x = np.asarray(x, dtype=np.float64)
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    J = np.flatnonzero(alpha0)
    if J.size == D.shape[1]:
        raise InvalidArgumentError("certificate needs a nonempty complement of the support")
    rec, sm, dm = certify_batch(D, x[:, None], J[None, :], np.sign(alpha0[J])[None, :], lam)
    return RecoveryCertificate(bool(rec[0]), float(sm[0]), float(dm[0]))


def _as_batch_arrays(batch):
    if hasattr(batch, "X"):
        return batch.X, batch.A0, batch.supports
    raise InvalidArgumentError("expected a SignalBatch")


def empirical_risk(D, batch, lam: float, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    """Mean optimal Lasso value over the signals of ``batch`` (a SignalBatch or m x n matrix)."""
    X = batch.X if hasattr(batch, "X") else np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InvalidArgumentError("batch must be nonempty")
    values, _ = lasso_values(D, X, lam, tol, max_iter)
    return float(np.mean(values))


def surrogate_risk(D, batch, lam: float) -> float:
    """Mean sign-restricted value using each signal's ground-truth sign pattern."""
    X, A0, supports = _as_batch_arrays(batch)
    return float(np.mean(phi_batch(D, X, supports, batch_signs(A0, supports), lam)))


def noiseless_recovery_condition(k: int, mu_t: float, t: float, alpha_hi: float,
                                 alpha_lo: float, lam: float) -> bool:
    """Window on ``lam`` guaranteeing sign recovery for noiseless signals at radius ``t``."""
    if k * mu_t >= 0.5:
        raise ConditionViolatedError("k*mu(t) < 1/2", f"k*mu(t) = {k * mu_t:.6g}")
    Q2 = coherence_factor(k, mu_t) ** 2
    return bool(np.sqrt(k) * alpha_hi * t / (2.0 - Q2) < lam <= 4.0 / 9.0 * alpha_lo)
