import itertools

import numpy as np
import pytest

from sparse_localmin.dictionary import Dictionary

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


def random_dictionary(rng, m, p):
    return Dictionary.from_unnormalized(rng.standard_normal((m, p)))


def lasso_by_enumeration(D, x, lam):
    """Exhaustive Lasso: every sign pattern in {-1, 0, 1}^p, feasible closed forms only."""
    D = np.asarray(D, dtype=float)
    p = D.shape[1]
    best_val, best = 0.5 * float(x @ x), np.zeros(p)
    for pattern in itertools.product((-1, 0, 1), repeat=p):
        s = np.array(pattern, dtype=float)
        J = np.flatnonzero(s)
        if J.size == 0 or J.size > D.shape[0]:
            continue
        DJ = D[:, J]
        G = DJ.T @ DJ
        if np.linalg.cond(G) > 1e12:
            continue
        a = np.linalg.solve(G, DJ.T @ x - lam * s[J])
        if np.any(np.sign(a) != s[J]):
            continue
        alpha = np.zeros(p)
        alpha[J] = a
        r = x - D @ alpha
        val = 0.5 * float(r @ r) + lam * float(np.abs(alpha).sum())
        if val < best_val:
            best_val, best = val, alpha
    return best_val, best


def match_by_enumeration(D_hat, D0):
    """Best permutation and signs by trying all p! permutations."""
    D_hat, D0 = np.asarray(D_hat, float), np.asarray(D0, float)
    p = D0.shape[1]
    best = (np.inf, None, None)
    for perm in itertools.permutations(range(p)):
        perm = np.array(perm)
        c = np.einsum("ij,ij->j", D0, D_hat[:, perm])
        signs = np.where(c < 0, -1.0, 1.0)
        err = float(np.linalg.norm(D0 - D_hat[:, perm] * signs))
        if err < best[0]:
            best = (err, perm, signs)
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
