import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from msvmc import ansatz as az
from msvmc import estimators as est
from msvmc import sampler as smp

HO = est.Harmonic1D(1.0)


def hermite(n_states, degree, alpha=0.5, noise=0.0, seed=0):
    m = az.HermiteGaussianModel(n_states, degree)
    g = m.layout.unflatten(m.canonical_params(alpha))
    g["coeffs"] = g["coeffs"] + noise * np.random.default_rng(seed).normal(size=g["coeffs"].shape)
    return m, m.layout.flatten(g)


def exact_pooled(m, p, n_per_state, rng, samplers=None):
    samplers = samplers or [smp.ExactSampler1D(m, p, s) for s in range(m.n_states)]
    return smp.pooled_from_samples(m, p, [sp.sample(n_per_state, rng) for sp in samplers])


def simpson_grid():
    return np.linspace(-8.0, 8.0, 2001)


def quad_energy(m, p, state, ham=HO):
    x = simpson_grid()
    v = m.log_psi(p, state, x)
    psi = v.sign * np.exp(v.log_abs)
    dpsi = np.gradient(psi, x, edge_order=2)
    kin = 0.5 * integrate.simpson(dpsi**2, x=x)
    pot = integrate.simpson(ham.potential(x[:, None, None]) * psi**2, x=x)
    return (kin + pot) / integrate.simpson(psi**2, x=x)


# ---------------------------------------------------------------- Hamiltonians


def test_molecular_potential_terms():
    ham = est.MolecularHamiltonian([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]], [1.0, 2.0])
    x = np.array([[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]])
    r12 = math.sqrt(2.0)
    attract = -(1 / 1 + 2 / 1) - (1 / 1 + 2 / math.sqrt(5.0))
    expected = 1 / r12 + attract + 2.0 / 2.0
    assert np.isclose(ham.potential(x)[0], expected)
    assert ham.nuclear_repulsion == 1.0


def test_polynomial_potential():
    ham = est.Polynomial1D((1.0, 0.0, 2.0))
    np.testing.assert_allclose(ham.potential(np.array([0.0, 1.0, 2.0])[:, None, None]), [1.0, 3.0, 9.0])


# ---------------------------------------------------------------- local energy / gradient


def test_local_energy_eigenstates():
    m, p = hermite(3, 3)
    x = np.linspace(-3, 3, 13) + 0.01
    np.testing.assert_allclose(est.local_energy(HO, m, p, 0, x), 0.5, atol=1e-12)
    np.testing.assert_allclose(est.local_energy(HO, m, p, 2, x), 2.5, atol=1e-10)


def test_local_energy_perturbed_is_variational():
    m, p = hermite(1, 3, noise=0.3, seed=1)
    x = np.linspace(-3, 3, 13)
    e = est.local_energy(HO, m, p, 0, x)
    assert np.ptp(e) > 1e-3
    assert quad_energy(m, p, 0) >= 0.5


def test_energy_grad_zero_at_eigenstate():
    m, p = hermite(2, 2)
    x = np.random.default_rng(0).normal(size=500) + 0.001
    e = est.energy_and_grad(HO, m, p, 1, x)
    assert np.isclose(e.energy, 1.5)
    np.testing.assert_allclose(e.grad, 0.0, atol=1e-10)


def test_single_sample_gradient_is_zero():
    m, p = hermite(1, 2, noise=0.2)
    e = est.energy_and_grad(HO, m, p, 0, np.array([0.3]))
    assert np.all(e.grad == 0.0)


def test_energy_gradient_matches_quadrature_oracle():
    m = az.HermiteGaussianModel(1, 1)
    p = m.layout.flatten({"coeffs": np.array([[1.0, 0.1]]), "alpha": np.array([0.5])})
    oracle = np.zeros(m.layout.size)
    for k in range(m.layout.size):
        dp = np.zeros_like(p)
        dp[k] = 1e-5
        oracle[k] = (quad_energy(m, p + dp, 0) - quad_energy(m, p - dp, 0)) / 2e-5
    rng = np.random.default_rng(2)
    sampler = smp.ExactSampler1D(m, p, 0)
    grads = np.array([est.energy_and_grad(HO, m, p, 0, sampler.sample(4096, rng)).grad for _ in range(40)])
    mean, se = grads.mean(axis=0), grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    assert np.all(np.abs(mean - oracle) <= 3 * se + 1e-12)


def test_all_samples_node_flagged_raises():
    m, p = hermite(2, 2)
    with pytest.raises(est.EmptyBatchError):
        est.energy_and_grad(HO, m, p, 1, np.zeros(4))


def test_node_flags_threshold():
    logs = np.array([0.0, -1.0, -40.0, 0.5])
    flags = est.node_flags(logs, np.array([1, 1, 1, 0]))
    np.testing.assert_array_equal(flags, [False, False, True, True])


def test_clip_outliers_bounds():
    v = np.concatenate([np.zeros(99), [1e6]])
    c = est.clip_outliers(v)
    assert c.max() < 1e6 and c[:99].tolist() == [0.0] * 99


# ---------------------------------------------------------------- single-state overlap


def test_single_state_identical_is_one_per_sample():
    m, p = hermite(2, 2, noise=0.2)
    g = m.layout.unflatten(p)
    g["coeffs"][1] = g["coeffs"][0]
    p = m.layout.flatten(g)
    pooled = exact_pooled(m, p, 100, np.random.default_rng(3))
    vals = est.ratio_samples(pooled, 0, 1)[0]
    np.testing.assert_allclose(vals, 1.0)
    assert np.isclose(est.overlap_single_state(pooled, 0, 1).value, 1.0)


def test_single_state_orthogonal_states():
    m, p = hermite(2, 1)
    rng = np.random.default_rng(4)
    samplers = [smp.ExactSampler1D(m, p, s) for s in range(2)]
    reps = np.array([est.overlap_single_state_known_ratio(exact_pooled(m, p, 2048, rng, samplers),
                                                          m.exact_ratios(p))[0, 1] for _ in range(30)])
    se = reps.std(ddof=1)
    one = est.overlap_single_state(exact_pooled(m, p, 2048, rng, samplers), 0, 1).value
    assert abs(reps.mean()) < 5 * se / math.sqrt(len(reps))
    assert one < 5 * se


def test_single_state_variance_for_overlapping_pair():
    # unit Gaussians two apart overlap by exp(-1/2)
    fam = smp.GaussianFamily((1.0, 1.0), (-1.0, 1.0), dim=1)
    s_true = math.exp(-0.5)
    rng = np.random.default_rng(5)
    n_batch = 2000
    vals = np.array([est.overlap_single_state(fam.pooled(n_batch // 2, rng), 0, 1).value for _ in range(300)])
    assert abs(vals.mean() - s_true) < 5 * vals.std(ddof=1) / math.sqrt(len(vals))
    predicted = 2 * (1 - s_true**2) / (2 * n_batch)
    assert predicted / 2 <= vals.var(ddof=1) <= 2 * predicted


# ---------------------------------------------------------------- MSIS


def test_msis_single_state_is_one():
    m, p = hermite(1, 2, noise=0.2)
    pooled = exact_pooled(m, p, 50, np.random.default_rng(6))
    assert est.overlap_msis(pooled, [1.0])[0, 0] == 1.0


def test_msis_identical_states_integrand_is_one():
    m, p = hermite(2, 2, noise=0.2)
    g = m.layout.unflatten(p)
    g["coeffs"][1] = g["coeffs"][0]
    p = m.layout.flatten(g)
    pooled = exact_pooled(m, p, 100, np.random.default_rng(7))
    f = est.msis_integrand(pooled, [1.0, 1.0])
    np.testing.assert_allclose(f[:, 0, 1], 1.0, atol=1e-12)


def test_msis_orthogonal_pair_and_variance_bound():
    m, p = hermite(2, 1)
    r = m.exact_ratios(p)
    rng = np.random.default_rng(8)
    samplers = [smp.ExactSampler1D(m, p, s) for s in range(2)]
    n = 1024
    vals, fs = [], []
    for _ in range(200):
        pooled = exact_pooled(m, p, n // 2, rng, samplers)
        vals.append(est.overlap_msis(pooled, r)[0, 1])
        fs.append(est.bhattacharyya(pooled, r)[0, 1])
    vals = np.array(vals)
    assert abs(vals.mean()) < 5 * vals.std(ddof=1) / math.sqrt(len(vals))
    assert vals.var(ddof=1) <= 2 * np.mean(fs) / (2 * n) * 1.2


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_msis_bound_holds_for_any_positive_ratios(S, seed, noise):
    m, p = hermite(S, S + 1, noise=noise, seed=seed)
    rng = np.random.default_rng(seed)
    pooled = smp.pooled_from_samples(m, p, [rng.normal(scale=2.0, size=40) for _ in range(S)])
    ratios = np.exp(rng.normal(size=S))
    f = est.msis_integrand(pooled, ratios)
    off = ~np.eye(S, dtype=bool)
    assert np.all(np.abs(f[:, off]) <= S / 2 + 1e-9)


def test_msis_negative_ratio_trips_bound():
    m, p = hermite(3, 4, noise=0.3, seed=9)
    rng = np.random.default_rng(9)
    pooled = smp.pooled_from_samples(m, p, [rng.normal(scale=2.0, size=300) for _ in range(3)])
    bad = m.exact_ratios(p)
    bad[2] = -bad[2]
    with pytest.raises(est.MSISBoundError):
        est.msis_integrand(pooled, bad)


def test_msis_single_ratio_relation():
    m, p = hermite(3, 3, noise=0.3, seed=10)
    r = m.exact_ratios(p)
    pooled = exact_pooled(m, p, 300, np.random.default_rng(10))
    s_hat = est.overlap_msis(pooled, r)
    o_hat = est.msis_single_ratio(pooled, r)
    np.testing.assert_allclose(o_hat, s_hat * np.sqrt(r[:, None] / r[None, :]), atol=1e-12)


def test_msis_estimates_gram_overlaps():
    m, p = hermite(3, 3, noise=0.3, seed=11)
    gram = m.gram(p)
    exact = gram / np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    rng = np.random.default_rng(11)
    samplers = [smp.ExactSampler1D(m, p, s) for s in range(3)]
    reps = np.array([est.overlap_msis(exact_pooled(m, p, 1000, rng, samplers), m.exact_ratios(p))
                     for _ in range(20)])
    mean, se = reps.mean(axis=0), reps.std(axis=0, ddof=1) / math.sqrt(20)
    assert np.all(np.abs(mean - exact) <= 5 * se + 1e-12)


def test_joint_variance_bound_three_states():
    m, p = hermite(3, 2)
    r = m.exact_ratios(p)
    rng = np.random.default_rng(12)
    samplers = [smp.ExactSampler1D(m, p, s) for s in range(3)]
    n = 600
    iu = np.triu_indices(3, 1)
    vals = np.array([est.overlap_msis(exact_pooled(m, p, n // 3, rng, samplers), r)[iu] for _ in range(200)])
    assert vals.var(axis=0, ddof=1).sum() <= 3 * 2 / (2 * n) * 1.2


# ---------------------------------------------------------------- Bhattacharyya


def test_bhattacharyya_identical_and_disjoint():
    fam = smp.GaussianFamily((1.0, 1.0))
    pooled = fam.pooled(200, np.random.default_rng(13))
    np.testing.assert_allclose(est.bhattacharyya(pooled, [1.0, 1.0])[0, 1], 1.0)
    far = smp.GaussianFamily((0.5, 0.5), (-20.0, 20.0)).pooled(200, np.random.default_rng(14))
    assert est.bhattacharyya(far, [1.0, 1.0])[0, 1] < 1e-10


def test_bhattacharyya_hermite_pair_matches_quadrature():
    m, p = hermite(2, 1)
    x = simpson_grid()
    sign, logs = m.log_psi_all(p, x)
    psi = np.exp(logs)
    norms = np.sqrt(integrate.simpson(psi**2, x=x, axis=0))
    exact = integrate.simpson(psi[:, 0] * psi[:, 1], x=x) / (norms[0] * norms[1])
    rng = np.random.default_rng(15)
    samplers = [smp.ExactSampler1D(m, p, s) for s in range(2)]
    reps = np.array([est.bhattacharyya(exact_pooled(m, p, 1000, rng, samplers), m.exact_ratios(p))[0, 1]
                     for _ in range(30)])
    assert abs(reps.mean() - exact) <= 3 * reps.std(ddof=1) / math.sqrt(len(reps))


# ---------------------------------------------------------------- ESS


def test_kish_weights_limits():
    assert est.kish_ess_weights(np.ones(50)) == 50
    assert est.kish_ess_weights(np.r_[np.zeros(9), 3.0]) == 1


def test_identical_states_normalized_ess_is_S():
    m, p = hermite(3, 2)
    g = m.layout.unflatten(p)
    g["coeffs"][:] = g["coeffs"][0]
    p = m.layout.flatten(g)
    pooled = exact_pooled(m, p, 200, np.random.default_rng(16))
    np.testing.assert_allclose(est.kish_ess(pooled, [1.0, 1.0, 1.0]).normalized, 3.0, rtol=1e-2)


def test_ess_bounds_and_baseline():
    m, p = hermite(4, 4, noise=0.4, seed=17)
    pooled = exact_pooled(m, p, 100, np.random.default_rng(17))
    e = est.kish_ess(pooled, m.exact_ratios(p))
    assert np.all(e.ess >= 1 - 1e-9) and np.all(e.ess <= pooled.n_total + 1e-9)
    assert est.single_state_baseline_ess(1000, 4)[1] == 1.0
    assert est.kish_ess(pooled, m.exact_ratios(p), state=2) == e.ess[2]


def test_mixture_summary_agrees_with_separate_estimators():
    m, p = hermite(3, 3, noise=0.3, seed=18)
    r = m.exact_ratios(p)
    pooled = exact_pooled(m, p, 200, np.random.default_rng(18))
    summ = est.mixture_summary(pooled, r)
    np.testing.assert_allclose(summ.s_hat, est.overlap_msis(pooled, r), atol=1e-14)
    np.testing.assert_allclose(summ.f_hat, est.bhattacharyya(pooled, r), atol=1e-14)
    np.testing.assert_allclose(summ.ess.ess, est.kish_ess(pooled, r).ess, rtol=1e-12)
    np.testing.assert_allclose(summ.o_hat, est.msis_single_ratio(pooled, r), atol=1e-14)


# ---------------------------------------------------------------- bridge sampling


def test_bridge_identical_is_exact_after_one_iteration():
    pooled = smp.GaussianFamily((1.0, 1.0, 1.0)).pooled(300, np.random.default_rng(19))
    res = est.bridge_ratios(pooled, iters=1)
    np.testing.assert_allclose(res.ratios, 1.0, atol=1e-14)


def test_bridge_gaussian_ratio():
    fam = smp.GaussianFamily((1.0, 2.0))
    res = est.bridge_ratios(fam.pooled(10000, np.random.default_rng(20)))
    assert abs(res.ratios[1] - 0.25) / 0.25 < 0.02


def test_bridge_scale_invariance():
    fam = smp.GaussianFamily((1.0, 2.0, 1.5))
    rng = np.random.default_rng(21)
    pooled = fam.pooled(2000, rng)
    a = est.bridge_ratios(pooled).ratios
    pooled.log_abs = pooled.log_abs + 7.3
    b = est.bridge_ratios(pooled).ratios
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_bridge_needs_intermediate_state():
    rng = np.random.default_rng(22)
    bridged = smp.GaussianFamily((0.3, 3.0, 0.3), (-4.0, 0.0, 4.0))
    res = est.bridge_ratios(bridged.pooled(4000, rng), iters=30)
    assert res.converged
    # the outer states share little mass with the wide one, so 4000 draws only pin r to ~15%
    np.testing.assert_allclose(res.ratios, bridged.true_ratios(), rtol=0.3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lone = smp.GaussianFamily((0.3, 0.3), (-4.0, 4.0))
        res = est.bridge_ratios(lone.pooled(4000, rng), iters=30)
    assert not res.converged


def test_bridge_singular_system_is_regularized():
    fam = smp.GaussianFamily((0.1, 0.1), (-50.0, 50.0))
    with pytest.warns(RuntimeWarning):
        res = est.bridge_ratios(fam.pooled(50, np.random.default_rng(23)), iters=3)
    assert res.regularized
    assert np.all(np.isfinite(res.ratios)) and np.all(res.ratios > 0)


def test_bridge_update_clip():
    fam = smp.GaussianFamily((1.0, 8.0))
    res = est.bridge_ratios(fam.pooled(2000, np.random.default_rng(24)), iters=1, clip=2.0)
    assert res.ratios[1] >= 0.5 - 1e-12


def test_bridge_single_state():
    pooled = smp.GaussianFamily((1.0,)).pooled(10, np.random.default_rng(25))
    assert est.bridge_ratios(pooled).ratios.tolist() == [1.0]


# ---------------------------------------------------------------- report


def test_overlap_report_json():
    fam = smp.GaussianFamily((1.0, 1.3))
    pooled = fam.pooled(300, np.random.default_rng(26))
    rep = est.overlap_report(pooled, est.bridge_ratios(pooled), step=4)
    d = json.loads(rep.to_json())
    assert d["step"] == 4
    s = np.array(d["S_hat"])
    np.testing.assert_allclose(s, s.T)
    assert np.all(np.diag(s) == 1.0)
    assert all(1 <= e <= pooled.n_total for e in d["ess"])
