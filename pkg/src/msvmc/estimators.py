"""Monte Carlo estimators: local energy, energy gradients, pairwise overlaps,
bridge-sampled normalizer ratios, Bhattacharyya coefficients and Kish ESS.

Normalizer ratios follow the convention ``r_s = N_1^2 / N_s^2`` (``r_0 = 1``
with zero-based state indices), where ``N_s^2 = int psi_s^2``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ansatz import WaveFunctionModel
from .sampler import PooledBatch

log = logging.getLogger(__name__)

LOG_RATIO_CLAMP = 50.0
NODE_LOG_THRESHOLD = 30.0
CLIP_FACTOR = 5.0
BRIDGE_ITERS = 10
BRIDGE_CLIP = 2.0
BRIDGE_TOL = 1e-3
MSIS_SLACK = 1e-9


class EmptyBatchError(ValueError):
    pass


class MSISBoundError(RuntimeError):
    """Mixture integrand exceeded its AM-GM bound: ratios or signs are inconsistent."""


# --------------------------------------------------------------------------- Hamiltonians


@dataclass(frozen=True)
class Harmonic1D:
    omega: float = 1.0

    def potential(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        return 0.5 * self.omega**2 * np.sum(x**2, axis=1)


@dataclass(frozen=True)
class Polynomial1D:
    """``V(x) = sum_k coeffs[k] x^k`` for a single 1-D particle."""

    coeffs: tuple[float, ...]

    def potential(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)[:, 0]
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coeffs, dtype=float))


@dataclass(frozen=True)
class MolecularHamiltonian:
    """Coulomb Hamiltonian for fixed nuclei (Bohr, Hartree)."""

    nuclei: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nuclei", np.atleast_2d(np.asarray(self.nuclei, dtype=float)))
        object.__setattr__(self, "charges", np.asarray(self.charges, dtype=float).reshape(-1))

    @property
    def nuclear_repulsion(self) -> float:
        e = 0.0
        for i in range(len(self.charges)):
            for j in range(i):
                e += self.charges[i] * self.charges[j] / np.linalg.norm(self.nuclei[i] - self.nuclei[j])
        return e

    def potential(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ee = 0.0
        n = x.shape[1]
        for i in range(n):
            for j in range(i):
                ee = ee + 1.0 / np.linalg.norm(x[:, i] - x[:, j], axis=-1)
        d = np.linalg.norm(x[:, :, None, :] - self.nuclei[None, None], axis=-1)
        en = -np.sum(self.charges / d, axis=(1, 2))
        return ee + en + self.nuclear_repulsion


# --------------------------------------------------------------------------- energy


def node_flags(log_abs: np.ndarray, sign: np.ndarray | None = None, threshold: float = NODE_LOG_THRESHOLD):
    """Samples whose ``log|psi|`` lies ``threshold`` below the batch median, or exactly on a node."""
    log_abs = np.asarray(log_abs, dtype=float)
    finite = np.isfinite(log_abs)
    flags = ~finite
    if sign is not None:
        flags |= np.asarray(sign) == 0
    if np.any(finite):
        flags |= log_abs < np.median(log_abs[finite]) - threshold
    return flags


def clip_outliers(values: np.ndarray, factor: float = CLIP_FACTOR) -> np.ndarray:
    """Clip to ``median +- factor * (95th percentile of |v - median|)``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    med = np.median(values)
    width = factor * np.percentile(np.abs(values - med), 95)
    return np.clip(values, med - width, med + width)


def local_energy(hamiltonian, model: WaveFunctionModel, params, state: int, x) -> np.ndarray:
    """``-1/2 (lap log|psi| + |grad log|psi||^2) + V`` for each walker in ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None, None]
    lap, grad_sq = model.laplacian_log(params, state, x)
    return -0.5 * (lap + grad_sq) + hamiltonian.potential(x)


@dataclass
class EnergyEstimate:
    energy: float
    stderr: float
    grad: np.ndarray
    e_loc: np.ndarray
    n_used: int
    variance: float
    dlog: np.ndarray | None = None  # per-sample grad log|psi| on kept rows
    keep: np.ndarray | None = None


def energy_and_grad(hamiltonian, model: WaveFunctionModel, params, state: int, x,
                    log_abs: np.ndarray | None = None, sign: np.ndarray | None = None,
                    clip: bool = True) -> EnergyEstimate:
    """Clipped-mean energy and ``2 <(E_loc - E) grad log|psi|>`` from samples of ``|psi_state|^2``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None, None]
    if log_abs is None:
        v = model.log_psi(params, state, x)
        log_abs, sign = np.asarray(v.log_abs), np.asarray(v.sign)
    keep = ~node_flags(log_abs, sign)
    if not np.any(keep):
        raise EmptyBatchError(f"every sample of state {state} is node-flagged")
    xk = x[keep]
    e = local_energy(hamiltonian, model, params, state, xk)
    ec = clip_outliers(e) if clip and e.size > 1 else e
    mean = float(np.mean(ec))
    g = model.grad_log(params, state, xk)
    grad = 2.0 * np.mean((ec - mean)[:, None] * g, axis=0)
    var = float(np.var(ec))
    stderr = float(np.sqrt(var / max(ec.size, 1)))
    return EnergyEstimate(mean, stderr, grad, e, int(ec.size), var, g, keep)


# --------------------------------------------------------------------------- overlaps


def check_ratios(ratios) -> np.ndarray:
    r = np.asarray(ratios, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise ValueError(f"normalizer ratios must be positive and finite, got {r}")
    return r


def _clamped_ratio(sign_num, log_num, sign_den, log_den):
    """``psi_num / psi_den`` in log domain, with the exponent clamped to +-50."""
    with np.errstate(invalid="ignore"):
        d = log_num - log_den
    d = np.where(sign_num == 0, 0.0, d)
    clamped = np.abs(d) > LOG_RATIO_CLAMP
    val = sign_num * sign_den * np.exp(np.clip(d, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    return val, int(np.count_nonzero(clamped & (sign_num != 0)))


@dataclass
class SingleStateOverlap:
    value: float
    forward: float  # mean over p_s of psi_t / psi_s
    backward: float  # mean over p_t of psi_s / psi_t
    skipped: int
    clamped: int


def ratio_samples(pooled: PooledBatch, s: int, t: int):
    """``psi_t / psi_s`` on samples of state ``s`` with node-proximate denominators removed."""
    rows = pooled.of_state(s)
    sign_s, log_s = pooled.sign[rows, s], pooled.log_abs[rows, s]
    skip = node_flags(log_s, sign_s)
    vals, clamped = _clamped_ratio(pooled.sign[rows, t][~skip], pooled.log_abs[rows, t][~skip],
                                   sign_s[~skip], log_s[~skip])
    return vals, int(skip.sum()), clamped, rows


def overlap_single_state(pooled: PooledBatch, s: int, t: int) -> SingleStateOverlap:
    """``|S_st| = sqrt(<psi_t/psi_s>_{p_s} <psi_s/psi_t>_{p_t})`` with the product floored at 0."""
    fwd, sk1, cl1, _ = ratio_samples(pooled, s, t)
    bwd, sk2, cl2, _ = ratio_samples(pooled, t, s)
    if fwd.size < 2 or bwd.size < 2:
        raise EmptyBatchError(f"need >= 2 usable samples for states {s} and {t}")
    a, b = float(np.mean(fwd)), float(np.mean(bwd))
    return SingleStateOverlap(float(np.sqrt(max(a * b, 0.0))), a, b, sk1 + sk2, cl1 + cl2)


def overlap_single_state_matrix(pooled: PooledBatch) -> np.ndarray:
    S = pooled.n_states
    out = np.eye(S)
    for s in range(S):
        for t in range(s + 1, S):
            out[s, t] = out[t, s] = overlap_single_state(pooled, s, t).value
    return out


def overlap_single_state_known_ratio(pooled: PooledBatch, ratios) -> np.ndarray:
    """Signed single-state estimator with known normalizers.

    ``S_st ~ <psi_t/psi_s>_{p_s} N_s/N_t``, averaged with the mirrored
    estimate from ``p_t`` so both states' samples contribute.
    """
    r = check_ratios(ratios)
    S = pooled.n_states
    out = np.eye(S)
    for s in range(S):
        for t in range(s + 1, S):
            fwd = ratio_samples(pooled, s, t)[0]
            bwd = ratio_samples(pooled, t, s)[0]
            est_f = np.mean(fwd) * np.sqrt(r[t] / r[s])
            est_b = np.mean(bwd) * np.sqrt(r[s] / r[t])
            out[s, t] = out[t, s] = 0.5 * (est_f + est_b)
    return out


def _normalized_amplitudes(pooled: PooledBatch, ratios):
    """Signed ``Psi_u / sqrt(pbar)`` up to a per-sample factor, plus mixture weights.

    Returns ``e`` (N, S) scaled so that ``f_st = e_s e_t / sum_u pi_u e_u^2``.
    """
    r = np.asarray(ratios, dtype=float).reshape(-1)
    pi = pooled.counts / pooled.counts.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        logs = pooled.log_abs + 0.5 * np.log(np.abs(r))[None]
    shift = np.max(np.where(np.isfinite(logs), logs, -np.inf), axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(invalid="ignore", under="ignore"):
        e = pooled.sign * np.exp(logs - shift)
    e = np.where(pooled.sign == 0, 0.0, e)
    # negative ratios flip the sign of that state's weight in the mixture
    den = np.sum(pi[None] * np.sign(r)[None] * e**2, axis=1)
    return e, den, pi


def msis_integrand(pooled: PooledBatch, ratios, check_bound: bool = True) -> np.ndarray:
    """Per-sample ``f_st = Psi_s Psi_t / pbar`` of shape (N, S, S).

    With equal walker counts ``|f_st| <= S/2`` pointwise; violations raise
    :class:`MSISBoundError`.
    """
    r = np.asarray(ratios, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise ValueError("ratios must be finite")
    e, den, pi = _normalized_amplitudes(pooled, r)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = e[:, :, None] * e[:, None, :] / den[:, None, None]
    if check_bound:
        bound = 1.0 / (2.0 * np.sqrt(pi[:, None] * pi[None, :]))
        off = ~np.eye(len(r), dtype=bool)
        viol = ~(np.abs(f) <= bound[None] + MSIS_SLACK) & off[None]
        if np.any(viol):
            n, s, t = np.argwhere(viol)[0]
            raise MSISBoundError(
                f"MSIS integrand f[{s},{t}]={f[n, s, t]:.6g} exceeds bound {bound[s, t]:.6g} at sample {n}"
            )
    return f


def overlap_msis(pooled: PooledBatch, ratios, check_bound: bool = True) -> np.ndarray:
    """Signed overlaps ``S_st = E_pbar[Psi_s Psi_t / pbar]``; diagonal fixed to 1."""
    f = msis_integrand(pooled, ratios, check_bound)
    out = np.mean(f, axis=0)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def msis_single_ratio(pooled: PooledBatch, ratios, check_bound: bool = True) -> np.ndarray:
    """``O_st = E_{p_s}[psi_t / psi_s]`` estimated through the mixture.

    Equals ``S_st sqrt(r_s / r_t)``.
    """
    r = check_ratios(ratios)
    s_hat = np.mean(msis_integrand(pooled, r, check_bound), axis=0)
    s_hat = 0.5 * (s_hat + s_hat.T)
    np.fill_diagonal(s_hat, 1.0)
    return s_hat * np.sqrt(r[:, None] / r[None, :])


def bhattacharyya(pooled: PooledBatch, ratios) -> np.ndarray:
    """``F_st = E_pbar[|Psi_s| |Psi_t| / pbar]``."""
    f = msis_integrand(pooled, ratios, check_bound=False)
    out = np.mean(np.abs(f), axis=0)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


@dataclass
class ESS:
    ess: np.ndarray
    normalized: np.ndarray


def kish_ess(pooled: PooledBatch, ratios, state: int | None = None):
    """Kish ESS of the mixture weights ``w_s = r_s q_s / qbar`` over the pooled batch.

    Returns an :class:`ESS` for all states, or a float for one ``state``.
    The normalized value is ``ESS * S / N``.
    """
    r = check_ratios(ratios)
    e, den, _ = _normalized_amplitudes(pooled, r)
    w = e**2 / den[:, None]
    ess = np.sum(w, axis=0) ** 2 / np.sum(w**2, axis=0)
    n, S = pooled.n_total, pooled.n_states
    res = ESS(ess, ess * S / n)
    if state is not None:
        return float(res.ess[state])
    return res


def kish_ess_weights(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(np.sum(w) ** 2 / np.sum(w**2))


def single_state_baseline_ess(n_total: int, n_states: int) -> tuple[float, float]:
    """ESS of single-state importance sampling (``N/S`` samples per pair) and its normalized value."""
    ess = n_total / n_states
    return ess, ess * n_states / n_total


@dataclass
class MixtureSummary:
    s_hat: np.ndarray
    f_hat: np.ndarray
    ess: ESS
    o_hat: np.ndarray  # O[s, t] = E_{p_s}[psi_t / psi_s]


def mixture_summary(pooled: PooledBatch, ratios, check_bound: bool = True) -> MixtureSummary:
    """Overlaps, Bhattacharyya coefficients and ESS from a single pass over the pooled batch."""
    r = check_ratios(ratios)
    f = msis_integrand(pooled, r, check_bound)
    s_hat = f.mean(axis=0)
    s_hat = 0.5 * (s_hat + s_hat.T)
    np.fill_diagonal(s_hat, 1.0)
    f_hat = np.abs(f).mean(axis=0)
    f_hat = 0.5 * (f_hat + f_hat.T)
    np.fill_diagonal(f_hat, 1.0)
    w = np.einsum("nss->ns", f)  # f_ss = Psi_s^2 / pbar
    ess = np.sum(w, axis=0) ** 2 / np.sum(w**2, axis=0)
    S, n = pooled.n_states, pooled.n_total
    return MixtureSummary(s_hat, f_hat, ESS(ess, ess * S / n), s_hat * np.sqrt(r[:, None] / r[None, :]))


# --------------------------------------------------------------------------- bridge sampling


@dataclass
class BridgeResult:
    ratios: np.ndarray
    residual: float
    converged: bool
    regularized: bool
    history: list[float] = field(default_factory=list)


def _responsibility_means(q: np.ndarray, onehot: np.ndarray, counts: np.ndarray, ratios: np.ndarray) -> np.ndarray:
    """``E_{p_s}[R_u]`` as an (S, S) matrix with ``R_u = q_u / sum_v r_v q_v``.

    ``q`` may carry an arbitrary positive per-sample factor, which cancels.
    """
    resp = q / (q @ ratios)[:, None]
    return (onehot.T @ resp) / counts[:, None]


def bridge_ratios(pooled: PooledBatch, iters: int = BRIDGE_ITERS, clip: float = BRIDGE_CLIP,
                  init=None, tol: float = BRIDGE_TOL) -> BridgeResult:
    """Multi-distribution bridge sampling for ``r_s = N_0^2 / N_s^2``.

    Each iteration solves ``B r = b`` built from per-state means of the
    responsibilities, then limits the multiplicative change of every ratio
    to ``clip``.
    """
    S = pooled.n_states
    if np.any(pooled.counts == 0):
        raise ValueError("every state needs samples for bridge sampling")
    r = np.ones(S) if init is None else check_ratios(init).copy()
    r[0] = 1.0
    if S == 1:
        return BridgeResult(r, 0.0, True, False, [0.0])
    log_q = 2.0 * np.where(pooled.sign == 0, -np.inf, pooled.log_abs)
    shift = np.max(log_q, axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise ValueError("a pooled sample lies on a node of every state")
    q = np.exp(log_q - shift)
    onehot = (pooled.origin[:, None] == np.arange(S)[None]).astype(float)
    counts = onehot.sum(axis=0)
    regularized = False
    history: list[float] = []
    for _ in range(iters):
        m = _responsibility_means(q, onehot, counts, r)
        # m[s, u] = E_{p_s}[R_u]; unknowns are r_1..r_{S-1}
        B = -m[1:, 1:].copy()
        col = m.sum(axis=0) - np.diag(m)  # sum_{s' != u} E_{p_s'}[R_u]
        B[np.diag_indices(S - 1)] = col[1:]
        b = m[1:, 0]
        try:
            sol = np.linalg.solve(B, b)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("non-finite solution")
        except np.linalg.LinAlgError:
            regularized = True
            sol = np.linalg.solve(B + 1e-10 * np.eye(S - 1), b)
        new = r.copy()
        new[1:] = np.clip(np.where(np.isfinite(sol) & (sol > 0), sol, r[1:] / clip), r[1:] / clip, r[1:] * clip)
        resid = float(np.max(np.abs(new[1:] - r[1:]) / r[1:]))
        history.append(resid)
        r = new
    if regularized:
        warnings.warn("bridge sampling system was singular; solved with diagonal regularization", RuntimeWarning)
    residual = history[-1] if history else 0.0
    return BridgeResult(r, residual, residual <= tol, regularized, history)


# --------------------------------------------------------------------------- report


@dataclass
class OverlapReport:
    s_hat: np.ndarray
    f_hat: np.ndarray
    ratios: np.ndarray
    ess: np.ndarray
    fixed_point_residual: float
    step: int | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "S_hat": self.s_hat.tolist(),
            "F_hat": self.f_hat.tolist(),
            "ratios": self.ratios.tolist(),
            "ess": self.ess.tolist(),
            "fixed_point_residual": self.fixed_point_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def overlap_report(pooled: PooledBatch, bridge: BridgeResult, step: int | None = None) -> OverlapReport:
    return OverlapReport(
        overlap_msis(pooled, bridge.ratios),
        bhattacharyya(pooled, bridge.ratios),
        bridge.ratios.copy(),
        kish_ess(pooled, bridge.ratios).ess,
        bridge.residual,
        step,
    )
