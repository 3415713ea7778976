"""End-to-end acceptance checks. Each test covers one numbered criterion and
the terminal summary prints one PASS/FAIL line per criterion."""

import json
import math
import time

import numpy as np
import pytest
from scipy import linalg, stats

from helpers import CORE_DIFFUSE_CROSS, chain_structures
from msvmc import ansatz as az
from msvmc import cli
from msvmc import estimators as est
from msvmc import numerics as nm
from msvmc import pretraining as pt
from msvmc import sampler as smp
from msvmc import training as tr
from test_training import quad_energy, quad_sq_overlap, sampled_terms, make_state, two_state_model

pytestmark = pytest.mark.slow


def report(n, msg):
    print(f"criterion {n}: {msg}")


# ---------------------------------------------------------------- 1


@pytest.mark.criterion(1)
def test_oscillator_spectrum(request, tmp_path):
    config = request.config.rootpath / "examples" / "ho3.json"
    t0 = time.perf_counter()
    code = cli.main(["--output-dir", str(tmp_path), "run", str(config)])
    elapsed = time.perf_counter() - t0
    assert code == cli.EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    e = np.array(rep["energies"])
    ov = np.abs(np.array(rep["overlap"]) - np.eye(3)).max()
    report(1, f"energies {e.round(5).tolist()} max|overlap| {ov:.4f} runtime {elapsed:.0f}s")
    assert np.all(np.abs(e - [0.5, 1.5, 2.5]) < 1e-2)
    assert ov < 0.05
    assert elapsed < 600


# ---------------------------------------------------------------- 2


@pytest.mark.criterion(2)
def test_msis_pointwise_bound():
    rng = np.random.default_rng(0)
    n_samples = violations = 0
    for S in (2, 3, 4, 6):
        for trial in range(25):
            m = az.HermiteGaussianModel(S, S + 2)
            g = m.layout.unflatten(m.canonical_params(0.5 + rng.random()))
            g["coeffs"] = g["coeffs"] + rng.random() * rng.normal(size=g["coeffs"].shape)
            p = m.layout.flatten(g)
            pooled = smp.pooled_from_samples(m, p, [rng.normal(scale=3.0, size=200) for _ in range(S)])
            f = est.msis_integrand(pooled, np.exp(rng.normal(size=S)), check_bound=False)
            off = ~np.eye(S, dtype=bool)
            violations += int(np.sum(np.abs(f[:, off]) > S / 2 * (1 + 1e-12)))
            n_samples += f[:, off].size
    m = az.HermiteGaussianModel(3, 4)
    g = m.layout.unflatten(m.canonical_params())
    g["coeffs"] = g["coeffs"] + 0.3 * rng.normal(size=g["coeffs"].shape)
    p = m.layout.flatten(g)
    pooled = smp.pooled_from_samples(m, p, [rng.normal(scale=2.0, size=300) for _ in range(3)])
    bad = m.exact_ratios(p)
    bad[2] = -bad[2]
    with pytest.raises(est.MSISBoundError):
        est.msis_integrand(pooled, bad)
    report(2, f"{violations} violations in {n_samples} integrand values; corrupted ratios trip the bound")
    assert violations == 0


# ---------------------------------------------------------------- 3


@pytest.mark.criterion(3)
def test_joint_variance_bound():
    n_batch, n_batches, reps = 3072, 200, 20
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    wins = total = 0
    worst = 0.0
    for S in (2, 3, 4, 6):
        m = az.HermiteGaussianModel(S, S - 1)
        p = m.canonical_params()
        samplers = [smp.ExactSampler1D(m, p, s) for s in range(S)]
        bound = S * (S - 1) / (2 * n_batch)
        for _ in range(reps):
            single, msis, _ = cli.overlap_variances(S, n_batch, n_batches, rng, samplers, m, p)
            v_msis = msis.var(axis=0, ddof=1).sum()
            worst = max(worst, v_msis / bound)
            wins += int(v_msis < single.var(axis=0, ddof=1).sum())
            total += 1
    elapsed = time.perf_counter() - t0
    report(3, f"max Var/bound {worst:.3f}, MSIS wins {wins}/{total}, runtime {elapsed:.0f}s")
    assert worst <= 1.2
    assert wins >= 0.95 * total
    assert elapsed < 300


# ---------------------------------------------------------------- 4


@pytest.mark.criterion(4)
def test_bridge_sampling():
    fam = smp.GaussianFamily((1.0, 2.0))
    pooled = fam.pooled(10000, np.random.default_rng(4))
    res = est.bridge_ratios(pooled, iters=10, clip=2.0)
    rel = abs(res.ratios[1] - 0.25) / 0.25
    scaled = smp.PooledBatch(pooled.x, pooled.origin, pooled.sign, pooled.log_abs + np.log([3.0, 0.01]) / 2,
                             pooled.counts)
    r_scaled = est.bridge_ratios(scaled, iters=10, clip=2.0).ratios
    # rescaling each density by c_s rescales each normalizer, so the ratios move by c_0 / c_s
    drift = np.max(np.abs(r_scaled / (res.ratios * np.array([1.0, 3.0 / 0.01])) - 1))
    report(4, f"r_2 = {res.ratios[1]:.5f} (rel err {rel:.4f}), scale drift {drift:.1e}")
    assert rel < 0.02
    assert drift < 1e-10


# ---------------------------------------------------------------- 5


@pytest.mark.criterion(5)
def test_pfaffian_correctness():
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(500):
        n = 2 * (1 + k % 4)
        a = rng.normal(size=(n, n))
        a = a - a.T
        ref = nm.pfaffian_bruteforce(a)
        worst = max(worst, abs(nm.pfaffian(a).value() - ref) / abs(ref))
    worst_id = 0.0
    for k in range(200):
        n = 2 * (1 + k % 4)
        b = rng.normal(size=(n, n))
        lam = rng.normal(size=(n, n))
        lam = lam - lam.T
        lhs = nm.pfaffian(b @ lam @ b.T).value()
        rhs = np.linalg.det(b) * nm.pfaffian(lam).value()
        worst_id = max(worst_id, abs(lhs - rhs) / abs(rhs))
    report(5, f"max rel err vs matching oracle {worst:.1e}, congruence identity {worst_id:.1e}")
    assert worst < 1e-10
    assert worst_id < 1e-9


# ---------------------------------------------------------------- 6


@pytest.mark.criterion(6)
def test_gradient_fidelity():
    rng = np.random.default_rng(6)
    m = az.HermiteGaussianModel(3, 5)
    p = m.canonical_params(0.7) + 0.2 * rng.normal(size=m.layout.size)
    x = rng.normal(size=20)
    worst = 0.0
    for s in range(3):
        g = m.grad_log(p, s, x)
        for k in range(p.size):
            dp = np.zeros_like(p)
            dp[k] = 1e-5 * max(1.0, abs(p[k]))
            fd = (m.log_psi(p + dp, s, x).log_abs - m.log_psi(p - dp, s, x).log_abs) / (2 * dp[k])
            scale = np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, float(np.max(np.abs(g[:, k] - fd) / scale)))

    m2, p2 = two_state_model()
    e0, e1 = quad_energy(m2, p2, 0), quad_energy(m2, p2, 1)
    ts = make_state(m2, p2, [e0, e1])
    beta = tr.penalty_weights(ts.schedule)[0, 1]

    def loss(q):
        return quad_energy(m2, q, 0) + quad_energy(m2, q, 1) + beta * quad_sq_overlap(m2, p2, q, 0, 1)

    oracle = np.array([(loss(p2 + 1e-6 * e) - loss(p2 - 1e-6 * e)) / 2e-6 for e in np.eye(p2.size)])
    grads = []
    for _ in range(50):
        pooled, energies, o_hat = sampled_terms(m2, p2, 1000, rng)
        grads.append(tr.total_loss_grad(ts, energies, pooled, o_hat)[0])
    g = np.mean(grads, axis=0)
    cos = float(g @ oracle / (np.linalg.norm(g) * np.linalg.norm(oracle)))
    report(6, f"grad_log max rel err {worst:.1e}; loss-gradient cosine {cos:.4f}")
    assert worst < 1e-6
    assert cos > 0.9


# ---------------------------------------------------------------- 7


def _ablation_run(msis: bool, steps: int):
    d = cli.bundled_config()
    d["training"].update({"steps": steps, "trace_every": 1, "eval_batches": 5, "checkpoint_every": 0})
    d["estimators"]["msis_enabled"] = msis
    cfg = cli.parse_config(d)
    model, ham, p = cli.build_system(cfg)
    return tr.optimize(model, ham, p, cfg.train_config(), cfg.seed)


@pytest.mark.criterion(7)
def test_msis_ablation():
    steps = 4000
    runs = {msis: _ablation_run(msis, steps) for msis in (True, False)}
    dev = {}
    for msis, res in runs.items():
        sq = np.array(res.sq_overlap_trace)
        late = sq[:, 0] >= steps // 4
        parts = []
        for s, t in ((0, 1), (0, 2), (1, 2)):
            v = sq[late & (sq[:, 1] == s) & (sq[:, 2] == t), 3]
            parts.append((v - v.mean()) ** 2)
        dev[msis] = np.concatenate(parts)
    # Welch test on squared deviations compares the two trace variances
    pval = stats.ttest_ind(dev[False], dev[True], equal_var=False, alternative="greater").pvalue
    pen = np.array(runs[True].penalty_trace)[:, 1]
    rolling = np.convolve(pen, np.ones(50) / 50, mode="valid")
    below = np.flatnonzero(rolling < 0.01)
    first = int(below[0]) + 49 if below.size else None
    report(7, f"trace variance MSIS {dev[True].mean():.2e} vs off {dev[False].mean():.2e} (p = {pval:.1e}); "
              f"loss < 0.01 from step {first}")
    assert pval < 0.05
    assert first is not None and first < steps // 4


# ---------------------------------------------------------------- 8


@pytest.mark.criterion(8)
def test_ess_diagnostics():
    rng = np.random.default_rng(8)
    lo, hi = np.inf, -np.inf
    for S in (1, 2, 3, 5):
        for _ in range(20):
            m = az.HermiteGaussianModel(S, S + 1)
            g = m.layout.unflatten(m.canonical_params(0.5))
            g["coeffs"] = g["coeffs"] + rng.random() * rng.normal(size=g["coeffs"].shape)
            p = m.layout.flatten(g)
            pooled = smp.pooled_from_samples(m, p, [rng.normal(scale=2.0, size=64) for _ in range(S)])
            e = est.kish_ess(pooled, m.exact_ratios(p)).ess
            lo = min(lo, float(e.min()))
            hi = max(hi, float((e / pooled.n_total).max()))
    ident = az.HermiteGaussianModel(4, 3)
    g = ident.layout.unflatten(ident.canonical_params())
    g["coeffs"][:] = g["coeffs"][0]
    p = ident.layout.flatten(g)
    pooled = smp.pooled_from_samples(ident, p, [rng.normal(size=100) for _ in range(4)])
    norm = est.kish_ess(pooled, np.ones(4)).normalized
    base = est.single_state_baseline_ess(3072, 4)[1]
    report(8, f"ESS min {lo:.2f}, max ESS/N {hi:.3f}; identical normalized {norm.round(4).tolist()}; baseline {base}")
    assert lo >= 1 - 1e-9 and hi <= 1 + 1e-12
    np.testing.assert_allclose(norm, 4.0, rtol=1e-2)
    assert base == 1.0


# ---------------------------------------------------------------- 9


@pytest.mark.criterion(9)
def test_pretraining_pipeline():
    g = pt.build_graph(chain_structures())
    sels = pt.selector_set(8, 2, [[(1, 2)], [(1, 3)], [(0, 4), (1, 5)]])
    dets = np.array([[pt.selector_det(a, b) for b in sels] for a in sels])
    global_rot = nm.procrustes_from_cross(CORE_DIFFUSE_CROSS).rotation
    block = pt.blockwise_align(np.eye(2), np.eye(2), CORE_DIFFUSE_CROSS, [0, 1]).rotation
    swapped = np.allclose(np.abs(global_rot), [[0, 1], [1, 0]])
    kept = np.allclose(block, np.eye(2))
    report(9, f"root {g.root}; selector dets identity: {np.array_equal(dets, np.eye(len(sels)))}; "
              f"global swaps {swapped}, block-wise keeps {kept}")
    assert g.root == 2
    assert np.array_equal(dets, np.eye(len(sels), dtype=int))
    assert swapped and kept


# ---------------------------------------------------------------- 10


def double_well(lam, a=0.5, b=1.5):
    """``a (x^2 - b^2)^2 + lam x``: the tilt moves the ground state between wells."""
    return (a * b**4, lam, -2 * a * b**2, 0.0, a)


def grid_levels(coeffs, n=4000, half_width=8.0):
    x = np.linspace(-half_width, half_width, n)
    h = x[1] - x[0]
    v = np.polynomial.polynomial.polyval(x, coeffs)
    return linalg.eigh_tridiagonal(1 / h**2 + v, np.full(n - 1, -0.5 / h**2), select="i",
                                   select_range=(0, 1), eigvals_only=True)


@pytest.mark.criterion(10)
def test_state_crossing():
    lines, ok = [], True
    for i, lam in enumerate(np.linspace(-0.3, 0.3, 10)):
        ham = est.Polynomial1D(double_well(lam))
        runs = []
        for S, steps in ((2, 3000), (1, 2000)):
            m = az.HermiteGaussianModel(S, 12)
            cfg = tr.TrainConfig(steps=steps, lr0=0.2, grad_clip=1.0, t_decay=500.0, n_walkers_total=1024,
                                 decorr_steps=3, eval_batches=20, trace_every=50)
            runs.append(tr.optimize(m, ham, m.canonical_params(1.0), cfg, seed=i))
        multi, single = runs
        k = int(np.argmin(multi.energies))
        tol = 3 * math.hypot(multi.energy_stderr[k], single.energy_stderr[0])
        gap = multi.energies[k] - single.energies[0]
        track = float(np.max(np.abs(np.sort(multi.energies) - grid_levels(double_well(lam)))))
        good = gap <= tol and track < 0.05
        ok &= good
        lines.append(f"lam {lam:+.3f}: min multi - single {gap:+.5f} (tol {tol:.5f}), tracking err {track:.4f}")
    report(10, "\n  ".join([""] + lines))
    assert ok
