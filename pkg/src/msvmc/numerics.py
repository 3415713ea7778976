"""Dense linear-algebra kernels: log-domain Pfaffians, Jacobi SVD/eigensolvers,
orthogonal Procrustes and symmetric orthogonalization.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100
EIG_FLOOR = 1e-12
BRUTEFORCE_MAX_DIM = 10

# Negative-control hook for the self-check battery: flips the sign of the
# second rank-1 term in the Parlett-Reid update.
_INJECT_SIGN_BUG = False


class NumericsError(RuntimeError):
    pass


class ConvergenceError(NumericsError):
    """Iterative kernel hit its sweep cap."""


class SingularProjectionError(NumericsError):
    """Gram matrix of a projection is not positive definite."""


@dataclass(frozen=True)
class SignedLogValue:
    """``sign * exp(log_abs)``; fields may be scalars or equally shaped arrays.

    Zero is ``sign == 0`` with ``log_abs == -inf``.
    """

    sign: np.ndarray | float
    log_abs: np.ndarray | float

    def __mul__(self, other: SignedLogValue) -> SignedLogValue:
        return SignedLogValue(self.sign * other.sign, self.log_abs + other.log_abs)

    def value(self):
        with np.errstate(under="ignore"):
            return self.sign * np.exp(self.log_abs)

    def __getitem__(self, idx) -> SignedLogValue:
        return SignedLogValue(np.asarray(self.sign)[idx], np.asarray(self.log_abs)[idx])

    @classmethod
    def from_value(cls, x) -> SignedLogValue:
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(np.sign(x), np.log(np.abs(x)))


def logsumexp_signed(signs: np.ndarray, logs: np.ndarray, axis: int = -1) -> SignedLogValue:
    """Signed sum of ``signs * exp(logs)`` along ``axis`` with a max shift.

    Exact cancellation yields sign 0.
    """
    signs = np.asarray(signs, dtype=float)
    logs = np.asarray(logs, dtype=float)
    shift = np.max(np.where(signs != 0, logs, -np.inf), axis=axis, keepdims=True)
    safe_shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(under="ignore"):
        total = np.sum(signs * np.exp(logs - safe_shift), axis=axis)
    safe_shift = np.squeeze(safe_shift, axis=axis)
    with np.errstate(divide="ignore"):
        log_abs = np.log(np.abs(total)) + safe_shift
    sign = np.sign(total)
    log_abs = np.where(sign == 0, -np.inf, log_abs)
    return SignedLogValue(sign, log_abs)


@dataclass(frozen=True)
class SkewMatrix:
    """Even-dimensional skew-symmetric matrix stored as its strict upper triangle."""

    dim: int
    upper: np.ndarray

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"SkewMatrix dimension must be even and positive, got {self.dim}")
        upper = np.asarray(self.upper, dtype=float)
        if upper.shape != (self.dim * (self.dim - 1) // 2,):
            raise ValueError("upper triangle has wrong length")
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_dense(cls, m) -> SkewMatrix:
        m = np.asarray(m, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("expected a square matrix")
        if not np.array_equal(m, -m.T):
            raise ValueError("matrix is not exactly skew-symmetric")
        n = m.shape[0]
        return cls(n, m[np.triu_indices(n, 1)])

    def dense(self) -> np.ndarray:
        return skew_from_upper(self.upper, self.dim)


def skew_from_upper(upper: np.ndarray, n: int) -> np.ndarray:
    """Expand strict-upper-triangle entries (last axis) to ``(..., n, n)`` skew matrices."""
    upper = np.asarray(upper, dtype=float)
    out = np.zeros(upper.shape[:-1] + (n, n))
    iu = np.triu_indices(n, 1)
    out[..., iu[0], iu[1]] = upper
    out[..., iu[1], iu[0]] = -upper
    return out


def canonical_pairing(n: int) -> np.ndarray:
    """Block-diagonal skew matrix of ``[[0, 1], [-1, 0]]`` blocks (Pf = 1)."""
    if n % 2:
        raise ValueError("canonical pairing needs an even dimension")
    a = np.zeros((n, n))
    for i in range(0, n, 2):
        a[i, i + 1] = 1.0
        a[i + 1, i] = -1.0
    return a


def pfaffian(m) -> SignedLogValue:
    """Pfaffian of one or a stack of skew matrices via Parlett-Reid with pivoting.

    Accepts a :class:`SkewMatrix` or an array of shape ``(..., n, n)``; the
    result carries arrays shaped like the leading batch dimensions.
    """
    if isinstance(m, SkewMatrix):
        a = m.dense()
    else:
        a = np.array(m, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError("expected square matrices")
    batch_shape = a.shape[:-2]
    n = a.shape[-1]
    if n % 2:
        zero = np.zeros(batch_shape)
        return SignedLogValue(zero, np.full(batch_shape, -np.inf))
    a = a.reshape((-1, n, n))
    nb = a.shape[0]
    rows = np.arange(nb)
    sign = np.ones(nb)
    log_abs = np.zeros(nb)
    alive = np.ones(nb, dtype=bool)
    # pivots at rounding level relative to the input scale are exact zeros
    floor = n * np.finfo(float).eps * np.max(np.abs(a), axis=(1, 2))
    for k in range(0, n - 1, 2):
        # pivot: largest |a[i, k]| for i > k
        piv = k + 1 + np.argmax(np.abs(a[:, k + 1 :, k]), axis=1)
        swap = piv != k + 1
        if np.any(swap):
            perm = np.broadcast_to(np.arange(n), (nb, n)).copy()
            perm[rows, k + 1] = piv
            perm[rows, piv] = k + 1
            a = a[rows[:, None, None], perm[:, :, None], perm[:, None, :]]
            sign = np.where(swap, -sign, sign)
        p = a[:, k, k + 1]
        dead = np.abs(p) <= floor
        alive &= ~dead
        p_safe = np.where(dead, 1.0, p)
        sign = sign * np.sign(p_safe)
        log_abs = log_abs + np.log(np.abs(p_safe))
        if k + 2 < n:
            tau = a[:, k, k + 2 :] / p_safe[:, None]
            col = a[:, k + 2 :, k + 1]
            second = -np.einsum("bi,bj->bij", col, tau)
            if _INJECT_SIGN_BUG:
                second = -second
            a[:, k + 2 :, k + 2 :] += np.einsum("bi,bj->bij", tau, col) + second
    sign = np.where(alive, sign, 0.0)
    log_abs = np.where(alive, log_abs, -np.inf)
    if not batch_shape:
        return SignedLogValue(float(sign[0]), float(log_abs[0]))
    return SignedLogValue(sign.reshape(batch_shape), log_abs.reshape(batch_shape))


def pfaffian_bruteforce(m) -> float:
    """Exact Pfaffian as a signed sum over perfect matchings (test oracle, dim <= 10)."""
    a = m.dense() if isinstance(m, SkewMatrix) else np.asarray(m, dtype=float)
    n = a.shape[0]
    if n > BRUTEFORCE_MAX_DIM:
        raise ValueError(f"brute-force Pfaffian limited to dim <= {BRUTEFORCE_MAX_DIM}, got {n}")
    if n % 2:
        return 0.0

    def expand(idx: tuple[int, ...]) -> float:
        if not idx:
            return 1.0
        first, rest = idx[0], idx[1:]
        total = 0.0
        for j, other in enumerate(rest):
            remaining = rest[:j] + rest[j + 1 :]
            total += (-1) ** j * a[first, other] * expand(remaining)
        return total

    return expand(tuple(range(n)))


def _complete_orthonormal(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged in ``filled`` with an orthonormal complement."""
    q = q.copy()
    m = q.shape[0]
    basis = iter(np.eye(m))
    for j in np.flatnonzero(~filled):
        while True:
            v = next(basis).copy()
            others = np.concatenate([np.flatnonzero(filled), [i for i in range(j) if not filled[i]]]).astype(int)
            for _ in range(2):
                for i in others:
                    v -= (q[:, i] @ v) * q[:, i]
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                q[:, j] = v / nv
                break
    return q


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(s) @ V.T`` by one-sided Jacobi rotations.

    Returns ``U`` (m x k), ``s`` (k, non-increasing) and ``V`` (n x k) with
    ``k = min(m, n)``; when ``m`` is square both factors are orthogonal.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise ValueError("svd expects a matrix")
    rows, cols = a.shape
    if rows < cols:
        v, s, u = svd(a.T)
        return u, s, v
    u = a.copy()
    v = np.eye(cols)
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        for i, j in itertools.combinations(range(cols), 2):
            alpha = u[:, i] @ u[:, i]
            beta = u[:, j] @ u[:, j]
            gamma = u[:, i] @ u[:, j]
            if alpha == 0.0 or beta == 0.0:
                continue
            rel = abs(gamma) / np.sqrt(alpha * beta)
            off = max(off, rel)
            if rel <= SVD_TOL:
                continue
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ui, uj = u[:, i].copy(), u[:, j].copy()
            u[:, i], u[:, j] = c * ui - s * uj, s * ui + c * uj
            vi, vj = v[:, i].copy(), v[:, j].copy()
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if off <= SVD_TOL:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")
    sig = np.linalg.norm(u, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, u, v = sig[order], u[:, order], v[:, order]
    scale = sig[0] if sig.size and sig[0] > 0 else 1.0
    filled = sig > 1e-14 * scale
    u[:, filled] /= sig[filled]
    sig = np.where(filled, sig, 0.0)
    if not np.all(filled):
        u = _complete_orthonormal(u, filled)
    return u, sig, v


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi; ascending eigenvalues."""
    a = np.array(m, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("sym_eig expects a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(SVD_MAX_SWEEPS):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= SVD_TOL * max(np.linalg.norm(a), 1e-300):
            break
        for p, q in itertools.combinations(range(n), 2):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise ConvergenceError(f"Jacobi eigensolver did not converge in {SVD_MAX_SWEEPS} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def inv_sqrt_spd(g) -> np.ndarray:
    """``g^{-1/2}`` for symmetric positive definite ``g``; eigenvalues floored at 1e-12."""
    w, v = sym_eig(g)
    if w[0] <= 0.0:
        raise SingularProjectionError(f"Gram matrix not positive definite (min eigenvalue {w[0]:.3e})")
    w = np.maximum(w, EIG_FLOOR)
    return (v / np.sqrt(w)) @ v.T


class ProcrustesResult(NamedTuple):
    rotation: np.ndarray
    singular_values: np.ndarray
    degenerate: bool


def procrustes(src, dst) -> ProcrustesResult:
    """Orthogonal ``R`` minimising ``||src @ R - dst||_F``.

    ``degenerate`` is set when ``src.T @ dst`` is rank deficient, in which
    case the returned rotation is one of several minimisers.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch {src.shape} vs {dst.shape}")
    if src.shape[1] > src.shape[0]:
        raise ValueError("procrustes requires k <= n")
    return procrustes_from_cross(src.T @ dst)


def procrustes_from_cross(cross) -> ProcrustesResult:
    """Procrustes rotation maximising ``tr(R.T @ cross)``: ``U V^T`` from the SVD of ``cross``."""
    u, s, v = svd(cross)
    scale = s[0] if s.size and s[0] > 0 else 1.0
    degenerate = bool(s.size == 0 or np.any(s <= 1e-10 * scale))
    return ProcrustesResult(u @ v.T, s, degenerate)


def symmetric_orthogonalize(c, s) -> np.ndarray:
    """``c (c^T s c)^{-1/2}``: the closest ``s``-orthonormal basis to ``c``."""
    c = np.asarray(c, dtype=float)
    s = np.asarray(s, dtype=float)
    gram = c.T @ s @ c
    o = c @ inv_sqrt_spd(0.5 * (gram + gram.T))
    # one refinement pass on the near-identity Gram removes rounding from ill-conditioned inputs
    gram = o.T @ s @ o
    return o @ inv_sqrt_spd(0.5 * (gram + gram.T))
