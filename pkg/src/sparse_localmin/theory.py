"""Quantities from the local-minimum analysis of sparse coding, and their numerical checks.

The objects compared are the mean Lasso value ``F_n`` and its sign-restricted
surrogate ``Phi_n`` at a perturbed dictionary ``D(W, v, t)`` versus the
reference ``D0``. Randomized probing of ``(W, v)`` stands in for the uniform
infimum over all perturbations and therefore yields an upper bound on it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dictionary import (Dictionary, as_matrix, coherence, coherence_factor, coherence_radius,
                         perturb_matrix, rip_constant, sample_tangent, sample_velocity,
                         tangent_derivative)
from .errors import CombinatorialGuardError, ConditionViolatedError, InvalidArgumentError
from .model import CoefficientModel, GeneratedSignal, NoiseModel, SignalBatch, generate_dataset
from .sparse import (batch_signs, certify_batch, lasso_batch, lasso_objectives, phi,
                     phi_batch, support_linear_algebra)

SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class ModelScalars:
    E_alpha2: float
    E_abs_alpha: float
    sigma_alpha: float
    alpha_lower: float
    alpha_upper: float

    @classmethod
    def from_model(cls, model: CoefficientModel) -> ModelScalars:
        return cls(model.E_alpha2, model.E_abs_alpha, float(model.sigma_alpha),
                   model.alpha_lo, model.alpha_hi)

    @property
    def q_alpha(self) -> float:
        return self.E_alpha2 / self.sigma_alpha**2

    @property
    def Q_alpha(self) -> float:
        return self.E_alpha2 / (self.sigma_alpha * self.E_abs_alpha)

    @property
    def q_alpha_bounded(self) -> float:
        return self.E_alpha2 / (self.alpha_upper * self.E_abs_alpha)


@dataclass(frozen=True)
class UniversalConstants:
    """Unspecified constants of the radius bound; every default is 1."""

    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c_lambda: float = 1.0

    @property
    def c_gamma(self) -> float:
        return SQRT5 / 3.0 * self.c_lambda

    @classmethod
    def from_dict(cls, d: dict) -> UniversalConstants:
        unknown = set(d) - {"c0", "c1", "c2", "c3", "c_lambda"}
        if unknown:
            raise InvalidArgumentError(f"unknown constants {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class DictionaryStats:
    """Reference-dictionary inputs of the bounds.

    ``delta_k`` is exact when enumerable, otherwise the coherence bound ``k mu0``.
    """

    mu0: float
    spectral_norm: float
    delta_k: float
    delta_k_exact: bool = True

    @classmethod
    def from_dictionary(cls, D, k: int) -> DictionaryStats:
        D = D if isinstance(D, Dictionary) else Dictionary(D)
        try:
            return cls(D.mu0, D.spectral_norm, rip_constant(D, k), True)
        except CombinatorialGuardError as err:
            return cls(D.mu0, D.spectral_norm, err.bound, False)


@dataclass(frozen=True)
class ZetaTerms:
    z_aa: float
    z_ae: float
    z_ee: float
    z_sa: float
    z_se: float
    z_ss: float

    @property
    def total(self) -> float:
        return self.z_aa + self.z_ae + self.z_ee + self.z_sa + self.z_se + self.z_ss


@dataclass
class BoundReport:
    mu_t: float
    Q_t: float
    C_t: float
    gamma: float
    gamma_D0: float
    K_script: float
    A_const: float
    B_const: float
    radius: float
    lambda_window: tuple
    coherence_ok: bool
    sample_ok: bool
    probability_floor: float
    lower_bound: float = float("nan")
    lambda_in_window: bool = False
    gamma_ok: bool = False
    window_nonempty: bool = False
    sample_size_ok: bool = False
    tau: float = float("nan")
    gamma_radius: float = float("nan")
    radius_probability_floor: float = float("nan")
    radius_noiseless: float = float("nan")
    coherence_ok_noiseless: bool = False
    sample_ok_noiseless: bool = False
    inputs: dict = field(default_factory=dict)

    def to_json(self, **kw) -> str:
        d = asdict(self)
        d["lambda_window"] = list(self.lambda_window)
        return json.dumps(_finite(d), **kw)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def conditioning_factor(delta_k: float, t: float) -> float:
    """``1 / (sqrt(1 - delta_k) - t)``, infinite once the denominator vanishes."""
    gap = math.sqrt(max(1.0 - delta_k, 0.0)) - t
    return 1.0 / gap if gap > 0 else float("inf")


def _log_tail(mp: float, n: int) -> float:
    """``(mpn/9)^(-mp/2)`` evaluated in log space."""
    return math.exp(-0.5 * mp * math.log(mp * n / 9.0)) if mp * n > 9 else 1.0


def bound_report(m: int, p: int, k: int, stats: DictionaryStats, scalars: ModelScalars,
                 sigma: float, lam: float, t: float, n: int,
                 constants: UniversalConstants | None = None) -> BoundReport:
    """Evaluate the explicit bounds at radius ``t`` for regularization ``lam``."""
    if min(m, p, k, n) < 1 or k > p or lam <= 0 or t < 0 or sigma < 0:
        raise InvalidArgumentError("need positive m, p, k <= p, n, lam and nonnegative t, sigma")
    c = constants or UniversalConstants()
    sa, Ea2, Ea = scalars.sigma_alpha, scalars.E_alpha2, scalars.E_abs_alpha
    mu_t = coherence_radius(stats.mu0, t)
    if k * mu_t >= 0.5:
        raise ConditionViolatedError("k*mu(t) < 1/2", f"k*mu(t) = {k * mu_t:.6g}")
    if t >= math.sqrt(max(1.0 - stats.delta_k, 0.0)):
        raise ConditionViolatedError("t < sqrt(1 - delta_k)",
                                     f"t = {t:.6g}, delta_k = {stats.delta_k:.6g}")
    Q_t = coherence_factor(k, mu_t)
    C_t = conditioning_factor(stats.delta_k, t)
    Q2 = Q_t * Q_t
    scale = math.sqrt(t * t * sa * sa + m * sigma * sigma)
    gamma = lam * (2.0 - Q2) / (SQRT5 * scale) if scale > 0 else float("inf")
    window = (3.0 * scale / (2.0 - Q2), 4.0 / 9.0 * scalars.alpha_lower)
    norm = stats.spectral_norm
    K = C_t * (norm * math.sqrt(k / p) + t)
    A = 367.0 * (t * t * sa * sa + 2 * m * sigma**2 + 2 * lam * k * sa)
    B = 3045.0 * (k * sa * sa * t + 2 * m * sigma**2 + 2 * lam * k * sa)
    conc = math.sqrt(m * p * math.log(n) / n)
    tail = gamma * gamma * math.exp(-gamma * gamma) if math.isfinite(gamma) else 0.0
    lower = ((1.0 - K * K) * Ea2 / 2.0 * (k / p) * t * t
             - Q2 * (16.0 / 9.0 * Q2 + 3.0) * Ea * t * (k / p) * norm * k * mu_t * lam
             - A * tail
             - B * conc)
    exp_term = math.exp(-4.0 * n * math.exp(-gamma * gamma)) if math.isfinite(gamma) else 0.0
    prob = 1.0 - _log_tail(m * p, n) - exp_term

    # radius bound, up to the configured constants
    coh = norm * k * stats.mu0
    gamma_D0 = 1.0 / coh if coh > 0 else float("inf")
    tau = min(scalars.alpha_lower / sa, scalars.Q_alpha / (3.0 * c.c0 * k * norm))
    g_cap = (scalars.Q_alpha / (2.0 * math.sqrt(2.0) * c.c0 * c.c_gamma * coh)
             if coh > 0 else float("inf"))
    g1 = 0.5 * min(math.sqrt(2.0 * math.log(n)), g_cap)
    radius = max(4.0 * math.sqrt(2.0) * c.c_gamma / scalars.q_alpha * p
                 * (c.c1 * g1**3 * math.exp(-g1 * g1)
                    + 2.0 * c.c2 * g1 * math.sqrt(m * p * math.log(n) / n)),
                 sigma / sa * math.sqrt(m))
    log_arg = 69.0 * c.c1 * c.c_gamma**2 / scalars.q_alpha * p / tau
    coh_cap = (scalars.Q_alpha / (4.0 * math.sqrt(2.0) * c.c0 * c.c_gamma * math.sqrt(math.log(log_arg)))
               if log_arg > 1 else float("inf"))
    sample_ok = (math.log(n) / n <= scalars.q_alpha**2 / c.c3 * tau**2 / (m * p**3 * g1**4)
                 if g1 > 0 else False)
    radius_prob = 1.0 - _log_tail(m * p, n) - math.exp(-4.0 * math.sqrt(n))
    # noiseless, bounded-coefficient variant
    qb = scalars.q_alpha_bounded
    radius_nl = 8.0 * c.c1 * c.c_lambda / qb * math.sqrt(k * m * p**3 * math.log(n) / n)
    coh_nl = norm * k**1.5 * stats.mu0 <= qb / (c.c0 * c.c_lambda)
    tau_nl = min(scalars.alpha_lower / sa, scalars.Q_alpha / (5.0 * c.c0 * k * norm))
    sample_nl = (math.log(n) / n <= 1.0 / (k * k * m * p**3)
                 * (Ea2 / scalars.alpha_upper**2 / (9.0 * c.c1 * c.c_lambda**2) * tau_nl) ** 2)

    return BoundReport(
        mu_t=mu_t, Q_t=Q_t, C_t=C_t, gamma=gamma, gamma_D0=gamma_D0, K_script=K,
        A_const=A, B_const=B, radius=radius, lambda_window=window,
        coherence_ok=bool(coh <= coh_cap), sample_ok=bool(sample_ok),
        probability_floor=prob, lower_bound=lower,
        lambda_in_window=bool(window[0] <= lam <= window[1]),
        gamma_ok=bool(gamma >= math.sqrt(2.0 * math.log(2.0))),
        window_nonempty=bool(window[0] <= window[1]),
        sample_size_ok=bool(n / math.log(n) >= m * p) if n > 1 else False,
        tau=tau, gamma_radius=g1, radius_probability_floor=radius_prob,
        radius_noiseless=radius_nl, coherence_ok_noiseless=bool(coh_nl),
        sample_ok_noiseless=bool(sample_nl),
        inputs={"m": m, "p": p, "k": k, "mu0": stats.mu0, "spectral_norm": norm,
                "delta_k": stats.delta_k, "sigma": sigma, "lam": lam, "t": t, "n": n,
                "sigma_alpha": sa, "constants": asdict(c)})


# ---------------------------------------------------------------- surrogate differences

def _support_ops(D: np.ndarray, J: np.ndarray):
    ops = support_linear_algebra(D, J)
    if not ops.gram_condition_ok:
        from .errors import SingularSupportError
        raise SingularSupportError("support Gram matrix is singular")
    return ops.theta, ops.projector


def zeta_decomposition(signal: GeneratedSignal, D0, W, v, t: float, lam: float) -> ZetaTerms:
    """Split the change of the sign-restricted value into six quadratic and bilinear terms."""
    D0 = as_matrix(D0)
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    J = np.asarray(signal.support, dtype=np.intp)
    s = np.sign(signal.alpha0[J])
    th0, P0 = _support_ops(D0, J)
    tht, Pt = _support_ops(Dt, J)
    y = D0 @ signal.alpha0
    e = signal.eps
    dP = P0 - Pt
    Bm = th0 @ D0[:, J].T - tht @ Dt[:, J].T
    return ZetaTerms(
        z_aa=0.5 * float(y @ dP @ y),
        z_ae=float(y @ dP @ e),
        z_ee=0.5 * float(e @ dP @ e),
        z_sa=-lam * float(s @ Bm @ y),
        z_se=-lam * float(s @ Bm @ e),
        z_ss=0.5 * lam * lam * float(s @ (th0 - tht) @ s),
    )


def delta_phi_signal(signal: GeneratedSignal, D0, W, v, t: float, lam: float) -> float:
    D0 = as_matrix(D0)
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    J = signal.support
    s = np.sign(signal.alpha0[J])
    return phi(Dt, signal.x, J, s, lam) - phi(D0, signal.x, J, s, lam)


@dataclass
class _Reference:
    """Per-signal quantities at ``D0`` reused across perturbations."""

    f0: np.ndarray
    codes0: np.ndarray
    phi0: np.ndarray
    loss0: np.ndarray
    certified0: np.ndarray
    signs: np.ndarray


def _reference(batch: SignalBatch, D0: np.ndarray, lam: float, tol: float) -> _Reference:
    signs = batch_signs(batch.A0, batch.supports)
    codes0, _ = lasso_batch(D0, batch.X, lam, tol)
    f0 = lasso_objectives(D0, batch.X, codes0, lam)
    rec0, _, _ = certify_batch(D0, batch.X, batch.supports, signs, lam)
    return _Reference(f0, codes0, phi_batch(D0, batch.X, batch.supports, signs, lam),
                      lasso_objectives(D0, batch.X, batch.A0, lam), rec0, signs)


@dataclass(frozen=True)
class Evaluation:
    delta_F: float
    delta_Phi: float
    r_n: float

    @property
    def pathwise_ok(self) -> bool:
        slack = 1e-10 * max(1.0, abs(self.delta_F), abs(self.delta_Phi), self.r_n)
        return self.delta_F >= self.delta_Phi - self.r_n - slack


def _evaluate(batch: SignalBatch, D0: np.ndarray, Dt: np.ndarray, lam: float, ref: _Reference,
              tol: float) -> Evaluation:
    codes, _ = lasso_batch(Dt, batch.X, lam, tol, init=ref.codes0, greedy=0)
    ft = lasso_objectives(Dt, batch.X, codes, lam)
    phit = phi_batch(Dt, batch.X, batch.supports, ref.signs, lam)
    rect, _, _ = certify_batch(Dt, batch.X, batch.supports, ref.signs, lam)
    failed = ~(rect & ref.certified0)
    losst = lasso_objectives(Dt, batch.X, batch.A0, lam)
    r = np.where(failed, losst + ref.loss0, 0.0)
    return Evaluation(float(np.mean(ft - ref.f0)), float(np.mean(phit - ref.phi0)), float(np.mean(r)))


def evaluate_perturbation(batch: SignalBatch, D0, W, v, t: float, lam: float,
                          tol: float = 1e-10) -> Evaluation:
    """``(Delta F_n, Delta Phi_n, r_n)`` for one perturbation."""
    D0 = as_matrix(D0)
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    return _evaluate(batch, D0, Dt, lam, _reference(batch, D0, lam, tol), tol)


def delta_F(batch: SignalBatch, D0, W, v, t: float, lam: float, tol: float = 1e-10) -> float:
    """Change of the mean Lasso value when ``D0`` moves to ``D(W, v, t)``."""
    D0 = as_matrix(D0)
    if lam <= 0:
        raise InvalidArgumentError("lam must be positive")
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    A0, _ = lasso_batch(D0, batch.X, lam, tol)
    At, _ = lasso_batch(Dt, batch.X, lam, tol, init=A0)
    return float(np.mean(lasso_objectives(Dt, batch.X, At, lam) - lasso_objectives(D0, batch.X, A0, lam)))


def delta_Phi(batch: SignalBatch, D0, W, v, t: float, lam: float) -> float:
    """Change of the mean sign-restricted value along the same perturbation."""
    D0 = as_matrix(D0)
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    signs = batch_signs(batch.A0, batch.supports)
    return float(np.mean(phi_batch(Dt, batch.X, batch.supports, signs, lam)
                         - phi_batch(D0, batch.X, batch.supports, signs, lam)))


def residual_rn(batch: SignalBatch, D0, W, v, t: float, lam: float) -> float:
    """Mean loss of the signals whose sign recovery is not certified at ``D0`` or ``D(t)``."""
    D0 = as_matrix(D0)
    Dt = perturb_matrix(D0, np.asarray(W, float), np.asarray(v, float), t)
    signs = batch_signs(batch.A0, batch.supports)
    rec0, _, _ = certify_batch(D0, batch.X, batch.supports, signs, lam)
    rect, _, _ = certify_batch(Dt, batch.X, batch.supports, signs, lam)
    loss = lasso_objectives(Dt, batch.X, batch.A0, lam) + lasso_objectives(D0, batch.X, batch.A0, lam)
    return float(np.mean(np.where(rec0 & rect, 0.0, loss)))


@dataclass
class ProbeResult:
    min_delta_F: float
    min_delta_Phi: float
    argmin_W: np.ndarray
    argmin_v: np.ndarray
    evaluations: list
    pathwise_ok: bool

    @property
    def n_evaluations(self) -> int:
        return len(self.evaluations)


def probe_infimum(batch: SignalBatch, D0, t: float, lam: float, n_probe: int = 256,
                  rng: np.random.Generator | None = None, include_axes: bool = True,
                  tol: float = 1e-10) -> ProbeResult:
    """Minimum of ``Delta F_n`` and ``Delta Phi_n`` over sampled perturbations at radius ``t``.

    Samples ``n_probe`` pairs ``(W, v)`` with ``v`` in the nonnegative orthant,
    followed, when ``include_axes`` is set, by the ``p`` coordinate velocities
    ``v = e_j`` each with a fresh ``W``. The minimum over samples is an upper
    bound on the infimum over all perturbations.
    """
    if n_probe < 1:
        raise InvalidArgumentError("n_probe must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    D0 = as_matrix(D0)
    p = D0.shape[1]
    ref = _reference(batch, D0, lam, tol)
    velocities = [None] * n_probe + (list(np.eye(p)) if include_axes else [])
    evals = []
    best = (np.inf, None, None)
    min_phi = np.inf
    for v in velocities:
        W = sample_tangent(rng, D0)
        if v is None:
            v = sample_velocity(rng, p, positive=True)
        ev = _evaluate(batch, D0, perturb_matrix(D0, W, v, t), lam, ref, tol)
        evals.append(ev)
        if ev.delta_F < best[0]:
            best = (ev.delta_F, W, v)
        min_phi = min(min_phi, ev.delta_Phi)
    return ProbeResult(best[0], min_phi, best[1], best[2], evals, all(e.pathwise_ok for e in evals))


# ---------------------------------------------------------------- exact recovery frequency

@dataclass(frozen=True)
class CoincideConfig:
    """Recovery experiment: signals from ``D0`` coded at ``D(t_prime)``.

    ``t`` is the radius whose coherence bound enters the guarantee; it
    defaults to ``t_prime``.
    """

    D0: Dictionary
    coeff: CoefficientModel
    sigma: float
    t_prime: float
    lam: float
    t: float | None = None

    @property
    def radius(self) -> float:
        return self.t_prime if self.t is None else self.t


@dataclass(frozen=True)
class CoincideResult:
    frequency: float
    floor: float
    n_trials: int
    std_error: float
    n_recovered: int


def recovery_floor(k: int, mu_t: float, lam: float, t_prime: float, sigma_alpha: float,
                   m: int, sigma: float) -> float:
    """Lower bound on the probability of exact sign recovery at radius ``t_prime``."""
    Q2 = coherence_factor(k, mu_t) ** 2
    denom = 5.0 * (t_prime**2 * sigma_alpha**2 + m * sigma**2)
    if denom == 0:
        return 1.0
    return 1.0 - 2.0 * math.exp(-lam**2 * (2.0 - Q2) ** 2 / denom)


def coincide_frequency(config: CoincideConfig, n_trials: int, rng: np.random.Generator
                       ) -> CoincideResult:
    """Fraction of fresh signals whose sign pattern is certified at a sampled ``D(t_prime)``."""
    D0 = config.D0 if isinstance(config.D0, Dictionary) else Dictionary(config.D0)
    k = config.coeff.k
    t = config.radius
    if config.t_prime > t:
        raise ConditionViolatedError("t_prime <= t")
    mu_t = coherence_radius(D0.mu0, t)
    if k * mu_t >= 0.5:
        raise ConditionViolatedError("k*mu(t) < 1/2", f"k*mu(t) = {k * mu_t:.6g}")
    if not 0 < config.lam <= 4.0 / 9.0 * config.coeff.alpha_lo:
        raise ConditionViolatedError("0 < lam <= 4*alpha_lo/9", f"lam = {config.lam:.6g}")
    seed = int(rng.integers(2**63))
    batch = generate_dataset(D0, config.coeff, NoiseModel(config.sigma), n_trials, seed)
    signs = batch_signs(batch.A0, batch.supports)
    M = as_matrix(D0)
    recovered = 0
    for i in range(n_trials):
        W = sample_tangent(rng, M)
        v = sample_velocity(rng, M.shape[1], positive=True)
        Dt = perturb_matrix(M, W, v, config.t_prime)
        ok, _, _ = certify_batch(Dt, batch.X[:, i:i + 1], batch.supports[i:i + 1],
                                 signs[i:i + 1], config.lam)
        recovered += int(ok[0])
    freq = recovered / n_trials
    floor = recovery_floor(k, mu_t, config.lam, config.t_prime, config.coeff.sigma_alpha,
                           M.shape[0], config.sigma)
    return CoincideResult(freq, floor, n_trials, math.sqrt(max(freq * (1 - freq), 0.0) / n_trials),
                          recovered)


# ---------------------------------------------------------------- expectation identities

@dataclass(frozen=True)
class MonteCarloCheck:
    name: str
    mean: float
    std_error: float
    target: float
    is_upper_bound: bool = False

    @property
    def passed(self) -> bool:
        if self.is_upper_bound:
            return self.mean <= self.target + 3 * self.std_error + 1e-12
        return abs(self.mean - self.target) <= 3 * self.std_error + 1e-12


@dataclass(frozen=True)
class ExpectationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> MonteCarloCheck:
        return next(c for c in self.checks if c.name == name)


def random_supports(rng: np.random.Generator, p: int, k: int, n: int) -> np.ndarray:
    """``n`` independent uniformly random size-``k`` supports, as sorted rows."""
    return np.sort(np.argsort(rng.random((n, p)), axis=1)[:, :k], axis=1)


def _mc(name, values, target, upper=False):
    values = np.asarray(values, dtype=np.float64)
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return MonteCarloCheck(name, float(np.mean(values)), se, float(target), upper)


def expectation_identities(D0, k: int, n_mc: int, rng: np.random.Generator,
                           t: float = 0.01) -> ExpectationReport:
    """Monte-Carlo check of the support-averaging identities.

    Uses one random unit velocity ``v`` and, for the cross term, one random
    perturbation at radius ``t``.
    """
    if n_mc < 1000:
        raise InvalidArgumentError("n_mc must be at least 1000")
    D0 = as_matrix(D0)
    p = D0.shape[1]
    v = sample_velocity(rng, p, positive=False)
    W = sample_tangent(rng, D0)
    J = random_supports(rng, p, k, n_mc)
    vJ2 = (v[J] ** 2).sum(axis=1)
    off = D0.T @ D0 - np.eye(p)
    offJ2 = (off[J[:, :, None], J[:, None, :]] ** 2).sum(axis=(1, 2))
    total_off2 = float((off**2).sum())
    pair = k * (k - 1) / (p * (p - 1)) if p > 1 else 0.0
    checks = [_mc("norm_vJ_sq", vJ2, k / p), _mc("gram_offdiag_sq", offJ2, total_off2 * pair)]
    try:
        delta = rip_constant(D0, k)
    except CombinatorialGuardError as err:
        delta = err.bound
    Ct = conditioning_factor(delta, t)
    if math.isfinite(Ct):
        Dt = perturb_matrix(D0, W, v, t)
        offt = Dt.T @ Dt - np.eye(p)
        cross = np.sqrt((offt[J[:, :, None], J[:, None, :]] ** 2).sum(axis=(1, 2))) * np.sqrt(vJ2)
        bound = (math.sqrt(total_off2) * math.sqrt((k - 1) / (p - 1)) * k / p if p > 1 else 0.0) \
            + 2.0 * Ct * t * k / p
        checks.append(_mc("cross_offdiag_v", cross, bound, upper=True))
    return ExpectationReport(tuple(checks))


# ---------------------------------------------------------------- operator derivatives

def projector_derivative(D, dD, J) -> np.ndarray:
    """Derivative of ``P_J`` given the derivative ``dD`` of the dictionary."""
    D, dD = as_matrix(D), np.asarray(dD, float)
    J = np.asarray(J, dtype=np.intp)
    th, P = _support_ops(D, J)
    R = D[:, J] @ th @ dD[:, J].T
    S = R @ (np.eye(D.shape[0]) - P)
    return S + S.T


def inverse_gram_derivative(D, dD, J) -> np.ndarray:
    """Derivative of ``Theta_J``."""
    D, dD = as_matrix(D), np.asarray(dD, float)
    J = np.asarray(J, dtype=np.intp)
    th, _ = _support_ops(D, J)
    S = th @ dD[:, J].T @ D[:, J] @ th
    return -(S + S.T)


def pseudo_inverse_derivative(D, dD, J) -> np.ndarray:
    """Derivative of ``Theta_J D_J^T``."""
    D, dD = as_matrix(D), np.asarray(dD, float)
    J = np.asarray(J, dtype=np.intp)
    th, P = _support_ops(D, J)
    R = D[:, J] @ th @ dD[:, J].T
    return th @ (dD[:, J].T @ (np.eye(D.shape[0]) - P) - D[:, J].T @ R.T)


def _rel(a, b) -> float:
    # absolute below unit scale: single-atom Gram inverses have zero derivative
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def derivative_errors(D0, W, v, t: float, J, h: float = 1e-6) -> dict:
    """Mixed relative/absolute errors of the closed-form derivatives against central differences."""
    D0 = as_matrix(D0)
    J = np.asarray(J, dtype=np.intp)

    def ops(s):
        Ds = perturb_matrix(D0, W, v, s)
        th, P = _support_ops(Ds, J)
        return Ds, th, P, th @ Ds[:, J].T

    Dp, thp, Pp, Mp = ops(t + h)
    Dm, thm, Pm, Mm = ops(t - h)
    Dt = perturb_matrix(D0, W, v, t)
    dD = tangent_derivative(D0, W, v, t)
    return {
        "dictionary": _rel(dD, (Dp - Dm) / (2 * h)),
        "projector": _rel(projector_derivative(Dt, dD, J), (Pp - Pm) / (2 * h)),
        "inverse_gram": _rel(inverse_gram_derivative(Dt, dD, J), (thp - thm) / (2 * h)),
        "pseudo_inverse": _rel(pseudo_inverse_derivative(Dt, dD, J), (Mp - Mm) / (2 * h)),
    }


def operator_differences(D0, W, v, t: float, J) -> dict:
    """Operator changes between radius 0 and ``t`` next to their bounds."""
    D0 = as_matrix(D0)
    J = np.asarray(J, dtype=np.intp)
    Dt = perturb_matrix(D0, W, v, t)
    th0, P0 = _support_ops(D0, J)
    tht, Pt = _support_ops(Dt, J)
    try:
        delta = rip_constant(D0, J.size)
    except CombinatorialGuardError as err:
        delta = err.bound
    Ct = conditioning_factor(delta, t)
    vJ = float(np.linalg.norm(np.asarray(v)[J]))
    return {
        "projector": float(np.linalg.norm(Pt - P0)),
        "projector_bound": 2 * t * Ct * vJ,
        "inverse_gram": float(np.linalg.norm(tht - th0, 2)),
        "inverse_gram_bound": 2 * t * Ct**3 * vJ,
        "residual_atoms": float(np.linalg.norm((np.eye(D0.shape[0]) - Pt) @ D0[:, J])),
        "residual_atoms_bound": t * vJ,
    }


def irrepresentability(D, J) -> float:
    """``|||D_{J^c}^T D_J Theta_J|||_inf`` (largest absolute row sum)."""
    D = as_matrix(D)
    J = np.asarray(J, dtype=np.intp)
    th, _ = _support_ops(D, J)
    Jc = np.setdiff1d(np.arange(D.shape[1]), J)
    return float(np.abs(D[:, Jc].T @ D[:, J] @ th).sum(axis=1).max())


# ---------------------------------------------------------------- invariant suites

@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _random_dictionary(rng, m, p):
    return Dictionary.from_unnormalized(rng.standard_normal((m, p)))


def _suite_zeta(rng, n_inst=200):
    from .dictionary import hadamard
    worst = 0.0
    for _ in range(n_inst):
        p = int(rng.choice([16, 32]))
        D0 = hadamard(16) if p == 16 else _random_dictionary(rng, 16, 32)
        k = int(rng.integers(1, 4))
        sigma = float(rng.choice([0.0, 0.1]))
        t = float(rng.choice([0.0, 0.01, 0.1]))
        sig = generate_dataset(D0, CoefficientModel(k), NoiseModel(sigma), 1,
                               int(rng.integers(2**63)))[0]
        W = sample_tangent(rng, D0)
        v = sample_velocity(rng, p)
        z = zeta_decomposition(sig, D0, W, v, t, 0.05)
        worst = max(worst, abs(delta_phi_signal(sig, D0, W, v, t, 0.05) - z.total))
    return SuiteResult("zeta_identity", worst <= 1e-10, f"max |delta phi - sum zeta| = {worst:.2e}")


def _suite_derivatives(rng, n_conf=30):
    worst = 0.0
    for _ in range(n_conf):
        m, p, k = 12, 20, int(rng.integers(1, 5))
        D0 = _random_dictionary(rng, m, p)
        W = sample_tangent(rng, D0)
        v = sample_velocity(rng, p)
        J = np.sort(rng.choice(p, k, replace=False))
        errs = derivative_errors(D0, W, v, float(rng.uniform(0.0, 0.3)), J)
        worst = max(worst, max(errs.values()))
    return SuiteResult("derivatives", worst <= 1e-5, f"max relative error = {worst:.2e}")


def _suite_operator_differences(rng, n_draws=300):
    from .dictionary import hadamard_dirac
    D0 = hadamard_dirac(8)
    viol = 0
    for _ in range(n_draws):
        k = int(rng.integers(1, 4))
        J = np.sort(rng.choice(16, k, replace=False))
        W = sample_tangent(rng, D0)
        v = sample_velocity(rng, 16)
        d = operator_differences(D0, W, v, float(rng.uniform(0.0, 0.1)), J)
        viol += int(d["projector"] > d["projector_bound"] + 1e-9)
        viol += int(d["inverse_gram"] > d["inverse_gram_bound"] + 1e-9)
        viol += int(d["residual_atoms"] > d["residual_atoms_bound"] + 1e-9)
    return SuiteResult("operator_differences", viol == 0, f"{viol} violations in {n_draws} draws")


def _suite_irrepresentability(rng):
    from itertools import combinations

    from .dictionary import hadamard, hadamard_dirac
    viol = 0
    cases = [(hadamard(8), 2, 0.03), (hadamard_dirac(16), 1, 0.05), (hadamard(16), 2, 0.05)]
    for D0, k, t in cases:
        mu_t = coherence_radius(D0.mu0, t)
        cap = coherence_factor(k, mu_t) ** 2 - 1.0
        W = sample_tangent(rng, D0)
        v = sample_velocity(rng, D0.p)
        for tp in (0.0, t / 2, t):
            Dt = perturb_matrix(D0.entries, W, v, tp)
            for J in combinations(range(D0.p), k):
                viol += int(irrepresentability(Dt, np.array(J)) > cap + 1e-12)
    return SuiteResult("irrepresentability", viol == 0, f"{viol} violations")


def _suite_expectations(rng):
    from .dictionary import hadamard_dirac
    rep = expectation_identities(hadamard_dirac(8), 3, 20_000, rng)
    detail = ", ".join(f"{c.name}={c.mean:.4g}+-{c.std_error:.1g} vs {c.target:.4g}" for c in rep.checks)
    return SuiteResult("expectation_identities", rep.passed, detail)


def _suite_pathwise(rng, n_batches=10):
    from .dictionary import hadamard
    D0 = hadamard(16)
    bad = 0
    for _ in range(n_batches):
        batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(float(rng.choice([0.0, 0.05]))),
                                 200, int(rng.integers(2**63)))
        W = sample_tangent(rng, D0)
        v = sample_velocity(rng, 16)
        ev = evaluate_perturbation(batch, D0, W, v, float(rng.choice([0.01, 0.1, 0.3])), 0.05)
        bad += int(not ev.pathwise_ok)
    return SuiteResult("pathwise_sandwich", bad == 0, f"{bad} violations in {n_batches} batches")


def coherence_radius_violations(rng, D0, t: float, n_draws: int = 200) -> int:
    """Count draws where the coherence of ``D(t)`` exceeds ``mu0 + 3t`` (reported, not asserted)."""
    M = as_matrix(D0)
    mu0 = coherence(M)
    count = 0
    for _ in range(n_draws):
        Dt = perturb_matrix(M, sample_tangent(rng, M), sample_velocity(rng, M.shape[1]), t)
        count += int(coherence(Dt) > coherence_radius(mu0, t) + 1e-12)
    return count


def run_invariant_suites(seed: int = 0) -> list[SuiteResult]:
    """Run every randomized invariant check; each suite draws from its own substream."""
    suites = [_suite_zeta, _suite_derivatives, _suite_operator_differences,
              _suite_irrepresentability, _suite_expectations, _suite_pathwise]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(suites))]
    return [suite(r) for suite, r in zip(suites, rngs)]
