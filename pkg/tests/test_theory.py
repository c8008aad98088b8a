import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparse_localmin.dictionary import (Dictionary, coherence_factor, hadamard, hadamard_dirac,
                                        perturb_matrix, sample_tangent, sample_velocity)
from sparse_localmin.errors import ConditionViolatedError, InvalidArgumentError
from sparse_localmin.model import CoefficientModel, NoiseModel, generate_dataset
from sparse_localmin.sparse import batch_signs, certify_batch, empirical_risk
from sparse_localmin.theory import (SQRT5, CoincideConfig, DictionaryStats, ModelScalars,
                                    UniversalConstants, bound_report, coincide_frequency,
                                    conditioning_factor, delta_F, delta_phi_signal, delta_Phi,
                                    derivative_errors, evaluate_perturbation, expectation_identities,
                                    irrepresentability, operator_differences, probe_infimum,
                                    recovery_floor, residual_rn, run_invariant_suites,
                                    zeta_decomposition)
from sparse_localmin.theory import _evaluate, _reference

from conftest import random_dictionary


def perturbation(rng, D0, positive=True):
    D0 = np.asarray(D0, float)
    return sample_tangent(rng, D0), sample_velocity(rng, D0.shape[1], positive)


# ---------------------------------------------------------------- zeta terms

def z_aa_from_scratch(D0, Dt, J, alpha0):
    P0 = D0[:, J] @ np.linalg.pinv(D0[:, J])
    Pt = Dt[:, J] @ np.linalg.pinv(Dt[:, J])
    y = D0 @ alpha0
    return 0.5 * y @ (P0 - Pt) @ y


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.sampled_from([16, 32]), k=st.integers(1, 3),
       sigma=st.sampled_from([0.0, 0.1]), t=st.sampled_from([0.0, 0.01, 0.1]))
def test_zeta_sum_identity(seed, p, k, sigma, t):
    rng = np.random.default_rng(seed)
    D0 = hadamard(16) if p == 16 else random_dictionary(rng, 16, 32)
    sig = generate_dataset(D0, CoefficientModel(k), NoiseModel(sigma), 1, seed)[0]
    W, v = perturbation(rng, D0)
    z = zeta_decomposition(sig, D0, W, v, t, 0.05)
    assert abs(delta_phi_signal(sig, D0, W, v, t, 0.05) - z.total) <= 1e-10


def test_zeta_special_cases(rng):
    D0 = hadamard_dirac(8)
    W, v = perturbation(rng, D0)
    sig = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.0), 1, 1)[0]
    z = zeta_decomposition(sig, D0, W, v, 0.1, 0.05)
    assert z.z_ae == 0.0 and z.z_ee == 0.0 and z.z_se == 0.0
    noisy = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.1), 1, 1)[0]
    z0 = zeta_decomposition(noisy, D0, W, v, 0.0, 0.05)
    assert all(getattr(z0, f) == 0.0 for f in ("z_aa", "z_ae", "z_ee", "z_sa", "z_se", "z_ss"))


def test_z_aa_independent_assembly(rng):
    D0 = hadamard_dirac(8)
    for seed in range(20):
        sig = generate_dataset(D0, CoefficientModel(3), NoiseModel(0.1), 1, seed)[0]
        W, v = perturbation(rng, D0)
        Dt = perturb_matrix(D0.entries, W, v, 0.1)
        z = zeta_decomposition(sig, D0, W, v, 0.1, 0.05)
        assert z.z_aa == pytest.approx(z_aa_from_scratch(D0.entries, Dt, sig.support, sig.alpha0),
                                       abs=1e-10)


# ---------------------------------------------------------------- batch differences

def test_differences_vanish_at_zero(rng):
    D0 = hadamard(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.05), 100, 2)
    W, v = perturbation(rng, D0)
    assert delta_F(batch, D0, W, v, 0.0, 0.1) == 0.0
    assert delta_Phi(batch, D0, W, v, 0.0, 0.1) == 0.0


def test_delta_F_is_difference_of_risks(rng):
    D0 = hadamard_dirac(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.05), 200, 3)
    W, v = perturbation(rng, D0)
    Dt = perturb_matrix(D0.entries, W, v, 0.2)
    expect = empirical_risk(Dt, batch, 0.1) - empirical_risk(D0, batch, 0.1)
    assert delta_F(batch, D0, W, v, 0.2, 0.1) == pytest.approx(expect, abs=1e-10)
    assert evaluate_perturbation(batch, D0, W, v, 0.2, 0.1).delta_F == pytest.approx(expect, abs=1e-10)


def test_delta_Phi_is_mean_of_zeta_sums(rng):
    D0 = hadamard_dirac(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.1), 100, 4)
    W, v = perturbation(rng, D0)
    zsum = np.mean([zeta_decomposition(s, D0, W, v, 0.05, 0.1).total for s in batch.signals])
    assert delta_Phi(batch, D0, W, v, 0.05, 0.1) == pytest.approx(zsum, abs=1e-10)


def test_certified_batch_differences_coincide(rng):
    D0 = hadamard(16)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.001), 400, 5)
    W, v = perturbation(rng, D0)
    t, lam = 0.002, 0.04
    Dt = perturb_matrix(D0.entries, W, v, t)
    signs = batch_signs(batch.A0, batch.supports)
    for D in (D0.entries, Dt):
        assert certify_batch(D, batch.X, batch.supports, signs, lam)[0].all()
    assert residual_rn(batch, D0, W, v, t, lam) == 0.0
    assert abs(delta_F(batch, D0, W, v, t, lam) - delta_Phi(batch, D0, W, v, t, lam)) <= 1e-8


def test_pathwise_sandwich_on_random_batches(rng):
    D0 = hadamard_dirac(4)
    for i in range(100):
        sigma = float(rng.choice([0.0, 0.05, 0.3]))
        batch = generate_dataset(D0, CoefficientModel(int(rng.integers(1, 3))), NoiseModel(sigma), 30, i)
        W, v = perturbation(rng, D0)
        t, lam = float(rng.choice([0.01, 0.1, 0.5])), float(rng.choice([0.02, 0.2]))
        ev = evaluate_perturbation(batch, D0, W, v, t, lam)
        assert ev.r_n >= 0.0
        assert ev.r_n == pytest.approx(residual_rn(batch, D0, W, v, t, lam), abs=1e-12)
        assert ev.delta_Phi == pytest.approx(delta_Phi(batch, D0, W, v, t, lam), abs=1e-10)
        assert ev.pathwise_ok
        assert ev.delta_F + ev.r_n >= ev.delta_Phi - 1e-10


def test_surrogate_difference_positive_in_noiseless_window():
    D0 = hadamard(16)
    coeff = CoefficientModel(2, 1.0, 2.0)
    t = 0.05
    mu_t = 3 * t
    Q2 = coherence_factor(2, mu_t) ** 2
    lo, hi = math.sqrt(2) * 2.0 * t / (2 - Q2), 4 / 9 * 1.0
    lam = 0.5 * (lo + hi)
    batch = generate_dataset(D0, coeff, NoiseModel(0.0), 10_000, 6)
    rng = np.random.default_rng(6)
    for _ in range(5):
        W, v = perturbation(rng, D0)
        assert delta_Phi(batch, D0, W, v, t, lam) > 0


# ---------------------------------------------------------------- probing

def test_single_probe_is_one_evaluation():
    D0 = hadamard(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.01), 200, 7)
    res = probe_infimum(batch, D0, 0.1, 0.05, 1, np.random.default_rng(9), include_axes=False)
    rng = np.random.default_rng(9)
    W = sample_tangent(rng, D0.entries)
    v = sample_velocity(rng, 8)
    assert res.n_evaluations == 1
    assert res.min_delta_F == pytest.approx(delta_F(batch, D0, W, v, 0.1, 0.05), abs=1e-12)
    assert np.array_equal(res.argmin_v, v)


def test_probe_minimum_over_prefix():
    D0 = hadamard(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.01), 200, 8)
    short = probe_infimum(batch, D0, 0.1, 0.05, 6, np.random.default_rng(3), include_axes=False)
    long = probe_infimum(batch, D0, 0.1, 0.05, 12, np.random.default_rng(3), include_axes=False)
    assert [e.delta_F for e in long.evaluations[:6]] == [e.delta_F for e in short.evaluations]
    assert long.min_delta_F <= short.min_delta_F
    assert long.min_delta_Phi <= short.min_delta_Phi


def test_probe_axes_and_validation():
    D0 = hadamard(4)
    batch = generate_dataset(D0, CoefficientModel(1), NoiseModel(0.0), 50, 1)
    res = probe_infimum(batch, D0, 0.05, 0.02, 2, np.random.default_rng(0))
    assert res.n_evaluations == 2 + 4
    assert res.pathwise_ok
    with pytest.raises(InvalidArgumentError):
        probe_infimum(batch, D0, 0.05, 0.02, 0)


def test_reference_reuse_matches_fresh_evaluation(rng):
    D0 = hadamard(8)
    batch = generate_dataset(D0, CoefficientModel(2), NoiseModel(0.02), 100, 2)
    ref = _reference(batch, D0.entries, 0.05, 1e-10)
    W, v = perturbation(rng, D0)
    a = _evaluate(batch, D0.entries, perturb_matrix(D0.entries, W, v, 0.1), 0.05, ref, 1e-10)
    b = evaluate_perturbation(batch, D0, W, v, 0.1, 0.05)
    assert a == b


# ---------------------------------------------------------------- recovery frequency

def test_noiseless_unperturbed_frequency_is_one():
    cfg = CoincideConfig(hadamard(16), CoefficientModel(2), 0.0, 0.0, 0.02, t=0.05)
    res = coincide_frequency(cfg, 300, np.random.default_rng(0))
    assert res.frequency == 1.0 and res.floor == 1.0 and res.n_recovered == 300


def test_frequency_is_deterministic():
    cfg = CoincideConfig(hadamard(16), CoefficientModel(2), 0.01, 0.01, 0.04)
    a = coincide_frequency(cfg, 200, np.random.default_rng(5))
    b = coincide_frequency(cfg, 200, np.random.default_rng(5))
    assert a == b


def test_frequency_above_floor_on_grid():
    D0 = hadamard(16)
    coeff = CoefficientModel(2)
    lam = 2 / 9 * coeff.alpha_lo
    for tp, sigma in itertools.product((0.0, 0.05), (0.0, 0.01)):
        cfg = CoincideConfig(D0, coeff, sigma, tp, lam, t=0.05)
        res = coincide_frequency(cfg, 400, np.random.default_rng(11))
        se = math.sqrt(max(res.floor * (1 - res.floor), 0.0) / res.n_trials)
        assert res.frequency >= res.floor - 3 * max(se, res.std_error)


def test_recovery_floor_formula():
    Q2 = coherence_factor(2, 0.1) ** 2
    expect = 1 - 2 * math.exp(-0.04**2 * (2 - Q2) ** 2 / (5 * (0.01**2 * 100 + 16 * 0.005**2)))
    assert recovery_floor(2, 0.1, 0.04, 0.01, 10.0, 16, 0.005) == pytest.approx(expect, rel=1e-14)


def test_frequency_preconditions():
    coeff = CoefficientModel(2)
    with pytest.raises(ConditionViolatedError):
        coincide_frequency(CoincideConfig(hadamard_dirac(4), coeff, 0.0, 0.0, 0.02), 10,
                           np.random.default_rng(0))
    with pytest.raises(ConditionViolatedError):
        coincide_frequency(CoincideConfig(hadamard(16), coeff, 0.0, 0.0, 0.05), 10,
                           np.random.default_rng(0))
    with pytest.raises(ConditionViolatedError):
        coincide_frequency(CoincideConfig(hadamard(16), coeff, 0.0, 0.05, 0.02, t=0.01), 10,
                           np.random.default_rng(0))


# ---------------------------------------------------------------- bound report

def orthogonal_inputs(k=2):
    D0 = hadamard(16)
    return D0, DictionaryStats.from_dictionary(D0, k), ModelScalars.from_model(CoefficientModel(k))


def test_scalars_and_constants():
    s = ModelScalars.from_model(CoefficientModel(2, 0.1, 10.0))
    assert s.q_alpha == pytest.approx(33.67 / 100, abs=1e-4)
    assert s.q_alpha <= 1
    assert s.Q_alpha == pytest.approx(s.E_alpha2 / (10.0 * 5.05))
    assert s.q_alpha_bounded == pytest.approx(s.Q_alpha)
    c = UniversalConstants.from_dict({"c1": 2, "c_lambda": 3})
    assert c.c1 == 2.0 and c.c0 == 1.0 and c.c_gamma == pytest.approx(SQRT5)
    with pytest.raises(InvalidArgumentError):
        UniversalConstants.from_dict({"c9": 1})


def test_dictionary_stats_fallback():
    stats = DictionaryStats.from_dictionary(hadamard_dirac(64), 4)
    assert not stats.delta_k_exact
    assert stats.delta_k == pytest.approx(0.5)
    assert DictionaryStats.from_dictionary(hadamard(8), 2).delta_k_exact


def test_orthogonal_report_at_zero_radius():
    D0, stats, scalars = orthogonal_inputs()
    rep = bound_report(16, 16, 2, stats, scalars, 0.01, 0.04, 0.0, 10_000)
    assert rep.Q_t == 1.0 and rep.C_t == pytest.approx(1.0, abs=1e-12)
    assert rep.mu_t == pytest.approx(0.0, abs=1e-15)
    assert rep.gamma_D0 == math.inf


def test_gamma_inverts_to_lambda():
    D0, stats, scalars = orthogonal_inputs()
    sigma, t = 0.005, 0.05
    probe = bound_report(16, 16, 2, stats, scalars, sigma, 0.04, t, 10_000)
    lam = probe.lambda_window[0]
    rep = bound_report(16, 16, 2, stats, scalars, sigma, lam, t, 10_000)
    scale = math.sqrt(t**2 * scalars.sigma_alpha**2 + 16 * sigma**2)
    assert rep.gamma * SQRT5 * scale / (2 - rep.Q_t**2) == pytest.approx(lam, rel=1e-12)
    assert rep.gamma == pytest.approx(3 / SQRT5, rel=1e-12)


def test_report_formulas():
    D0, stats, scalars = orthogonal_inputs()
    m, p, k, sigma, lam, t, n = 16, 16, 2, 0.005, 0.03, 0.02, 20_000
    rep = bound_report(m, p, k, stats, scalars, sigma, lam, t, n)
    sa = scalars.sigma_alpha
    mu_t = 3 * t
    Q_t = 1 / math.sqrt(1 - k * mu_t)
    C_t = 1 / (1 - t)
    assert rep.mu_t == pytest.approx(mu_t)
    assert rep.Q_t == pytest.approx(Q_t)
    assert rep.C_t == pytest.approx(C_t)
    assert rep.K_script == pytest.approx(C_t * (math.sqrt(k / p) + t))
    assert rep.A_const == pytest.approx(367 * (t**2 * sa**2 + 2 * m * sigma**2 + 2 * lam * k * sa))
    assert rep.B_const == pytest.approx(3045 * (k * sa**2 * t + 2 * m * sigma**2 + 2 * lam * k * sa))
    scale = math.sqrt(t**2 * sa**2 + m * sigma**2)
    assert rep.lambda_window[0] == pytest.approx(3 * scale / (2 - Q_t**2))
    assert rep.lambda_window[1] == pytest.approx(4 / 9 * scalars.alpha_lower)
    assert rep.Q_t >= rep.C_t >= 1
    assert rep.probability_floor <= 1


def test_report_conditions():
    D0, stats, scalars = orthogonal_inputs()
    with pytest.raises(ConditionViolatedError) as info:
        bound_report(16, 16, 2, stats, scalars, 0.0, 0.04, 0.1, 1000)
    assert "mu" in info.value.condition
    bad = DictionaryStats(0.0, 1.0, 0.999)
    with pytest.raises(ConditionViolatedError) as info:
        bound_report(16, 16, 2, bad, scalars, 0.0, 0.04, 0.05, 1000)
    assert "delta_k" in info.value.condition
    with pytest.raises(InvalidArgumentError):
        bound_report(16, 16, 2, stats, scalars, 0.0, 0.0, 0.05, 1000)
    assert conditioning_factor(0.5, 1.0) == math.inf


def test_report_json_names_every_field():
    D0, stats, scalars = orthogonal_inputs()
    rep = bound_report(16, 16, 2, stats, scalars, 0.0, 0.04, 0.0, 1000)
    data = json.loads(rep.to_json())
    for name in ("mu_t", "Q_t", "C_t", "gamma", "gamma_D0", "K_script", "A_const", "B_const",
                 "radius", "lambda_window", "coherence_ok", "sample_ok", "probability_floor"):
        assert name in data
    assert data["gamma"] == "inf" and data["gamma_D0"] == "inf"


def test_lower_bound_below_probed_minimum():
    D0 = hadamard(16)
    coeff = CoefficientModel(2, 1.0, 2.0)
    stats, scalars = DictionaryStats.from_dictionary(D0, 2), ModelScalars.from_model(coeff)
    t, sigma, n = 0.01, 0.0, 2000
    rep = bound_report(16, 16, 2, stats, scalars, sigma, 0.25, t, n)
    assert rep.lambda_in_window and rep.gamma_ok
    exceed = 0
    for seed in range(20):
        batch = generate_dataset(D0, coeff, NoiseModel(sigma), n, seed)
        res = probe_infimum(batch, D0, t, 0.25, 4, np.random.default_rng(seed), include_axes=False)
        exceed += int(rep.lower_bound > res.min_delta_F)
    assert exceed <= 1


# ---------------------------------------------------------------- expectations and operators

def test_expectation_identities_exact_cases(rng):
    D = hadamard_dirac(4)
    rep = expectation_identities(D, 8, 1000, rng)
    assert rep["norm_vJ_sq"].std_error <= 1e-15
    assert rep["norm_vJ_sq"].mean == pytest.approx(1.0, abs=1e-12)
    rep = expectation_identities(hadamard(8), 3, 1000, rng)
    assert rep["gram_offdiag_sq"].mean == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(InvalidArgumentError):
        expectation_identities(D, 2, 999, rng)


def test_expectation_identities_hadamard_dirac():
    rep = expectation_identities(hadamard_dirac(8), 3, 100_000, np.random.default_rng(8))
    assert rep["norm_vJ_sq"].target == pytest.approx(3 / 16)
    assert rep.passed, rep.checks


def test_derivative_formulas(rng):
    for _ in range(20):
        D0 = random_dictionary(rng, 10, 16)
        W, v = perturbation(rng, D0)
        J = np.sort(rng.choice(16, int(rng.integers(1, 5)), replace=False))
        errs = derivative_errors(D0, W, v, float(rng.uniform(0, 0.3)), J)
        assert max(errs.values()) <= 1e-5, errs


def test_operator_difference_bounds(rng):
    D0 = hadamard_dirac(8)
    for _ in range(200):
        k = int(rng.integers(1, 4))
        J = np.sort(rng.choice(16, k, replace=False))
        W, v = perturbation(rng, D0)
        d = operator_differences(D0, W, v, float(rng.uniform(0, 0.1)), J)
        for name in ("projector", "inverse_gram", "residual_atoms"):
            assert d[name] <= d[name + "_bound"] + 1e-9


def test_irrepresentability_bound(rng):
    D0 = hadamard_dirac(16)
    k, t = 1, 0.05
    cap = coherence_factor(k, D0.mu0 + 3 * t) ** 2 - 1
    W, v = perturbation(rng, D0)
    for tp in (0.0, t):
        Dt = perturb_matrix(D0.entries, W, v, tp)
        for j in range(D0.p):
            assert irrepresentability(Dt, [j]) <= cap + 1e-12


def test_invariant_suites_pass():
    results = run_invariant_suites(0)
    assert len(results) == 6
    assert all(r.passed for r in results), [(r.name, r.detail) for r in results if not r.passed]


def test_dictionary_type_accepted_everywhere(rng):
    D0 = hadamard(8)
    assert isinstance(D0, Dictionary)
    batch = generate_dataset(D0, CoefficientModel(1), NoiseModel(0.0), 10, 0)
    W, v = perturbation(rng, D0)
    assert delta_Phi(batch, D0, W, v, 0.1, 0.05) == pytest.approx(
        delta_Phi(batch, D0.entries, W, v, 0.1, 0.05), abs=0.0)
