"""Wave-function families sharing one batched evaluation interface.

Configurations are handled in batches of shape ``(n_walkers, n_particles, d)``.
Every model exposes

* ``log_psi(params, state, x)`` -> :class:`SignedLogValue` over walkers,
* ``log_psi_all(params, x)`` -> signs and logs of shape ``(n_walkers, n_states)``,
* ``grad_log(params, state, x)`` -> ``(n_walkers, n_params)`` gradient of ``log|psi|``,
* ``laplacian_log(params, state, x)`` -> ``(lap, grad_sq)`` summed over particles.

Parameters are flat float vectors described by a :class:`ParamLayout`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite as herm

from .numerics import (
    SignedLogValue,
    canonical_pairing,
    logsumexp_signed,
    pfaffian,
    skew_from_upper,
)

DEFAULT_FD_STEP = 1e-4
FEATURE_EXPONENTS = (0.5, 1.0, 2.0, 4.0)


class EvaluationError(ValueError):
    """Non-finite input or intermediate during wave-function evaluation."""

    def __init__(self, message: str, walker: int | None = None, coordinate: int | None = None):
        super().__init__(message)
        self.walker = walker
        self.coordinate = coordinate


class NodeError(EvaluationError):
    """Derivative requested at an exact node of the wave function."""


@dataclass
class Configuration:
    """One particle configuration; ``coords`` is ``(n_particles, d)``."""

    coords: np.ndarray
    n_up: int = 0

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if self.coords.shape[0] < 1:
            raise ValueError("configuration needs at least one particle")
        if self.coords.shape[1] not in (1, 3):
            raise ValueError(f"spatial dimension must be 1 or 3, got {self.coords.shape[1]}")
        if not 0 <= self.n_up <= self.coords.shape[0]:
            raise ValueError("n_up out of range")

    @property
    def n_particles(self) -> int:
        return self.coords.shape[0]

    @property
    def n_down(self) -> int:
        return self.n_particles - self.n_up


@dataclass
class ParamLayout:
    """Named, shaped slices of a flat parameter vector."""

    shapes: dict[str, tuple[int, ...]]
    slices: dict[str, slice] = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        self.slices = {}
        offset = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape)) if shape else 1
            self.slices[name] = slice(offset, offset + n)
            offset += n
        self.size = offset

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape[-1] != self.size:
            raise ValueError(f"parameter vector has length {vec.shape[-1]}, expected {self.size}")
        lead = vec.shape[:-1]
        return {k: vec[..., sl].reshape(lead + self.shapes[k]) for k, sl in self.slices.items()}

    def flatten(self, groups: dict[str, np.ndarray]) -> np.ndarray:
        parts = [np.asarray(groups[k], dtype=float).reshape(-1) for k in self.shapes]
        return np.concatenate(parts) if parts else np.zeros(0)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


def _as_batch(x, n_particles: int | None = None, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None, None]
    elif x.ndim == 2:
        x = x[None]
    if n_particles is not None and x.shape[1] != n_particles:
        raise ValueError(f"expected {n_particles} particles, got {x.shape[1]}")
    if d is not None and x.shape[2] != d:
        raise ValueError(f"expected dimension {d}, got {x.shape[2]}")
    bad = ~np.isfinite(x)
    if np.any(bad):
        w, i, _ = np.argwhere(bad)[0]
        raise EvaluationError(f"non-finite coordinate for particle {i} of walker {w}", int(w), int(i))
    return x


class WaveFunctionModel:
    """Shared plumbing; subclasses implement the batched primitives."""

    n_states: int
    layout: ParamLayout
    n_particles: int
    dim: int
    n_up: int = 0
    # parameter groups whose leading axis indexes states
    state_groups: tuple[str, ...] = ()

    def log_psi(self, params, state: int, x) -> SignedLogValue:
        raise NotImplementedError

    def log_psi_all(self, params, x) -> tuple[np.ndarray, np.ndarray]:
        x = _as_batch(x)
        vals = [self.log_psi(params, s, x) for s in range(self.n_states)]
        return (np.stack([np.asarray(v.sign) for v in vals], axis=-1),
                np.stack([np.asarray(v.log_abs) for v in vals], axis=-1))

    def grad_log(self, params, state: int, x) -> np.ndarray:
        raise NotImplementedError

    def laplacian_log(self, params, state: int, x, h: float | None = None):
        return fd_laplacian_log(self, params, state, x, h or DEFAULT_FD_STEP)

    def check_state(self, state: int) -> None:
        if not 0 <= state < self.n_states:
            raise IndexError(f"state {state} out of range for {self.n_states} states")

    def permute_states(self, params: np.ndarray, perm) -> np.ndarray:
        """Reorder state-indexed parameter groups so new state ``i`` is old ``perm[i]``."""
        perm = np.asarray(perm)
        groups = self.layout.unflatten(np.array(params, dtype=float))
        for name in self.state_groups:
            groups[name] = groups[name][perm]
        return self.layout.flatten(groups)

    def state_mask(self, state: int) -> np.ndarray:
        """Boolean mask of parameters that only affect ``state``."""
        mask = np.zeros(self.layout.size, dtype=bool)
        for name in self.state_groups:
            sl = self.layout.slices[name]
            block = np.zeros(self.layout.shapes[name], dtype=bool)
            block[state] = True
            mask[sl] = block.reshape(-1)
        return mask


def fd_laplacian_log(model: WaveFunctionModel, params, state: int, x, h: float):
    """Central-difference Laplacian and squared gradient of ``log|psi|`` in coordinates."""
    x = _as_batch(x)
    b, n, d = x.shape
    nd = n * d
    f0 = np.asarray(model.log_psi(params, state, x).log_abs, dtype=float)
    eye = np.eye(nd).reshape(nd, n, d) * h
    shifted = np.concatenate([x[:, None] + eye[None], x[:, None] - eye[None]], axis=1)
    f = np.asarray(model.log_psi(params, state, shifted.reshape(b * 2 * nd, n, d)).log_abs).reshape(b, 2, nd)
    fp, fm = f[:, 0], f[:, 1]
    lap = np.sum(fp - 2.0 * f0[:, None] + fm, axis=1) / h**2
    grad = (fp - fm) / (2.0 * h)
    return lap, np.sum(grad**2, axis=1)


class HermiteGaussianModel(WaveFunctionModel):
    """One 1-D particle: ``psi_s(x) = sum_m c_sm h_m(sqrt(2 alpha) x) exp(-alpha x^2)``.

    ``h_m = H_m / sqrt(2^m m!)`` are physicists' Hermite polynomials scaled
    to unit norm against ``exp(-y^2)``. Canonical coefficients with
    ``alpha = 1/2`` give the harmonic-oscillator eigenstates, and the
    scaling keeps high-degree coefficients well conditioned.
    """

    state_groups = ("coeffs",)

    def __init__(self, n_states: int, max_degree: int):
        if n_states < 1 or max_degree < 0:
            raise ValueError("need n_states >= 1 and max_degree >= 0")
        self.n_states = n_states
        self.max_degree = max_degree
        self.n_particles = 1
        self.dim = 1
        self.layout = ParamLayout({"coeffs": (n_states, max_degree + 1), "alpha": (1,)})
        m = np.arange(max_degree + 1)
        self.scale = np.array([1.0 / math.sqrt(2.0**k * math.factorial(int(k))) for k in m])

    def canonical_params(self, alpha: float = 0.5) -> np.ndarray:
        """Coefficients ``c_sm = delta_sm`` (eigenstates when ``alpha = 1/2``)."""
        if self.n_states > self.max_degree + 1:
            raise ValueError("max_degree too small for canonical eigenstates")
        c = np.zeros((self.n_states, self.max_degree + 1))
        c[np.arange(self.n_states), np.arange(self.n_states)] = 1.0
        return self.layout.flatten({"coeffs": c, "alpha": [alpha]})

    def gram(self, params) -> np.ndarray:
        """Exact ``<psi_s | psi_t>`` from Hermite orthogonality."""
        g = self.layout.unflatten(params)
        alpha = float(g["alpha"][0])
        c = g["coeffs"]
        return math.sqrt(math.pi / (2.0 * alpha)) * (c @ c.T)

    def exact_ratios(self, params) -> np.ndarray:
        """``r_s = N_0^2 / N_s^2``."""
        n2 = np.diag(self.gram(params))
        return n2[0] / n2

    def _parts(self, params, x):
        g = self.layout.unflatten(params)
        alpha = float(g["alpha"][0])
        if alpha <= 0:
            raise EvaluationError(f"Gaussian width must be positive, got {alpha}")
        xs = _as_batch(x, 1, 1)[:, 0, 0]
        return g["coeffs"] * self.scale, alpha, xs, math.sqrt(2.0 * alpha) * xs

    def log_psi(self, params, state, x) -> SignedLogValue:
        self.check_state(state)
        coeffs, alpha, xs, y = self._parts(params, x)
        p = herm.hermval(y, coeffs[state])
        sign = np.sign(p)
        with np.errstate(divide="ignore"):
            log_abs = np.where(sign == 0, -np.inf, np.log(np.abs(p)) - alpha * xs**2)
        return SignedLogValue(sign, log_abs)

    def log_psi_all(self, params, x):
        coeffs, alpha, xs, y = self._parts(params, x)
        p = herm.hermval(y, coeffs.T)  # (n_states, B)
        p = np.atleast_2d(p).T
        sign = np.sign(p)
        with np.errstate(divide="ignore"):
            log_abs = np.where(sign == 0, -np.inf, np.log(np.abs(p)) - alpha * xs[:, None] ** 2)
        return sign, log_abs

    def _poly(self, params, state, x):
        self.check_state(state)
        coeffs, alpha, xs, y = self._parts(params, x)
        c = coeffs[state]
        p = herm.hermval(y, c)
        if np.any(p == 0):
            w = int(np.flatnonzero(p == 0)[0])
            raise NodeError(f"walker {w} sits on a node of state {state}", w)
        return c, alpha, xs, y, p

    def grad_log(self, params, state, x) -> np.ndarray:
        c, alpha, xs, y, p = self._poly(params, state, x)
        dp = herm.hermval(y, herm.hermder(c)) if c.size > 1 else np.zeros_like(y)
        basis = herm.hermvander(y, self.max_degree) * self.scale  # h_m(y)
        out = np.zeros((xs.size, self.layout.size))
        sl = self.layout.slices["coeffs"]
        block = np.zeros((xs.size, self.n_states, self.max_degree + 1))
        block[:, state, :] = basis / p[:, None]
        out[:, sl] = block.reshape(xs.size, -1)
        out[:, self.layout.slices["alpha"]] = (dp / p * xs / math.sqrt(2.0 * alpha) - xs**2)[:, None]
        return out

    def laplacian_log(self, params, state, x, h=None):
        c, alpha, xs, y, p = self._poly(params, state, x)
        d1 = herm.hermval(y, herm.hermder(c, 1)) if c.size > 1 else np.zeros_like(y)
        d2 = herm.hermval(y, herm.hermder(c, 2)) if c.size > 2 else np.zeros_like(y)
        r1 = d1 / p
        grad = math.sqrt(2.0 * alpha) * r1 - 2.0 * alpha * xs
        lap = 2.0 * alpha * (d2 / p - r1**2) - 2.0 * alpha
        return lap, grad**2


class ExcitedPfaffianModel(WaveFunctionModel):
    """``psi_s(r) = sum_k Pf(Phi_k(r) A_sk Phi_k(r)^T)`` with shared orbitals.

    Orbitals are ``Phi_k[i, j] = (h(r_i) . w^{spin_i}_{k, :, j}) exp(-a_kj |r_i - n_{m(j)}|)``
    where ``h`` stacks Gaussians ``exp(-g |r - n_m|^2)`` over a fixed exponent
    ladder per nucleus plus a constant, and orbital ``j`` is attached to
    nucleus ``m(j) = j // orbitals_per_nucleus``.  Only the antisymmetrizers
    ``A_sk`` differ between states.
    """

    state_groups = ("antisym",)

    def __init__(
        self,
        nuclei,
        charges,
        n_up: int,
        n_down: int,
        n_states: int = 1,
        n_det: int = 1,
        orbitals_per_nucleus: int = 2,
        exponents=FEATURE_EXPONENTS,
    ):
        self.nuclei = np.atleast_2d(np.asarray(nuclei, dtype=float))
        self.charges = np.asarray(charges, dtype=float).reshape(-1)
        if self.nuclei.shape[1] != 3 or self.nuclei.shape[0] != self.charges.size:
            raise ValueError("nuclei must be (n_nuclei, 3) matching charges")
        self.n_up, self.n_down = int(n_up), int(n_down)
        self.n_particles = self.n_up + self.n_down
        if self.n_particles < 2 or self.n_particles % 2:
            raise ValueError("Pfaffian ansatz needs an even particle count >= 2")
        self.dim = 3
        self.n_states = int(n_states)
        self.n_det = int(n_det)
        self.exponents = np.asarray(exponents, dtype=float)
        self.n_nuclei = self.nuclei.shape[0]
        self.n_orb = self.n_nuclei * int(orbitals_per_nucleus)
        if self.n_orb < self.n_particles or self.n_orb % 2:
            raise ValueError(f"need an even orbital count >= {self.n_particles}, got {self.n_orb}")
        self.orbital_center = np.repeat(np.arange(self.n_nuclei), orbitals_per_nucleus)
        self.n_feat = self.n_nuclei * self.exponents.size + 1
        self.spin = np.array([0] * self.n_up + [1] * self.n_down)
        n_pair = self.n_orb * (self.n_orb - 1) // 2
        self.layout = ParamLayout(
            {
                "w_up": (self.n_det, self.n_feat, self.n_orb),
                "w_down": (self.n_det, self.n_feat, self.n_orb),
                "envelope": (self.n_det, self.n_orb),
                "antisym": (self.n_states, self.n_det, n_pair),
            }
        )

    def init_params(self, rng: np.random.Generator, noise: float = 1e-2) -> np.ndarray:
        """Random readouts, unit envelopes, canonical pairing plus noise per state."""
        iu = np.triu_indices(self.n_orb, 1)
        pairing = canonical_pairing(self.n_orb)[iu]
        scale = 1.0 / math.sqrt(self.n_feat)
        groups = {
            "w_up": rng.normal(scale=scale, size=self.layout.shapes["w_up"]),
            "w_down": rng.normal(scale=scale, size=self.layout.shapes["w_down"]),
            "envelope": np.ones(self.layout.shapes["envelope"]),
            "antisym": pairing + noise * rng.normal(size=self.layout.shapes["antisym"]),
        }
        return self.layout.flatten(groups)

    def features(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-particle descriptors ``(B, N, F)`` and nucleus distances ``(B, N, n_nuclei)``."""
        x = _as_batch(x, self.n_particles, 3)
        diff = x[:, :, None, :] - self.nuclei[None, None]
        r2 = np.sum(diff**2, axis=-1)
        gauss = np.exp(-r2[..., None] * self.exponents).reshape(r2.shape[:2] + (-1,))
        h = np.concatenate([gauss, np.ones(r2.shape[:2] + (1,))], axis=-1)
        return h, np.sqrt(r2)

    def orbitals(self, params, x):
        """Orbital matrices ``(B, K, N, n_orb)`` plus the pieces needed for gradients."""
        g = self.layout.unflatten(params)
        h, dist = self.features(x)
        w = np.where(self.spin[None, :, None, None] == 0,
                     g["w_up"][:, None], g["w_down"][:, None])  # (K, N, F, O)
        lin = np.einsum("bnf,knfo->bkno", h, w)
        d_orb = dist[:, :, self.orbital_center]  # (B, N, O)
        env = np.exp(-g["envelope"][None, :, None, :] * d_orb[:, None])
        phi = lin * env
        if not np.all(np.isfinite(phi)):
            b, _, i, _ = np.argwhere(~np.isfinite(phi))[0]
            raise EvaluationError(f"non-finite orbital value for particle {i} of walker {b}", int(b), int(i))
        return phi, h, d_orb, env, g

    def antisymmetrizer(self, params, state: int) -> np.ndarray:
        g = self.layout.unflatten(params)
        return skew_from_upper(g["antisym"][state], self.n_orb)

    def _pf_terms(self, phi, a):
        m = phi @ a[None] @ np.swapaxes(phi, -1, -2)
        m = 0.5 * (m - np.swapaxes(m, -1, -2))
        return m, pfaffian(m)

    def log_psi(self, params, state, x) -> SignedLogValue:
        self.check_state(state)
        phi = self.orbitals(params, x)[0]
        _, pf = self._pf_terms(phi, self.antisymmetrizer(params, state))
        return logsumexp_signed(pf.sign, pf.log_abs, axis=-1)

    def log_psi_all(self, params, x):
        phi = self.orbitals(params, x)[0]
        signs, logs = [], []
        for s in range(self.n_states):
            _, pf = self._pf_terms(phi, self.antisymmetrizer(params, s))
            v = logsumexp_signed(pf.sign, pf.log_abs, axis=-1)
            signs.append(v.sign)
            logs.append(v.log_abs)
        return np.stack(signs, -1), np.stack(logs, -1)

    def grad_log(self, params, state, x) -> np.ndarray:
        self.check_state(state)
        phi, h, d_orb, env, g = self.orbitals(params, x)
        a = self.antisymmetrizer(params, state)
        m, pf = self._pf_terms(phi, a)
        total = logsumexp_signed(pf.sign, pf.log_abs, axis=-1)
        if np.any(total.sign == 0):
            w = int(np.flatnonzero(total.sign == 0)[0])
            raise NodeError(f"walker {w} sits on a node of state {state}", w)
        with np.errstate(under="ignore"):
            weight = pf.sign * total.sign[:, None] * np.exp(pf.log_abs - total.log_abs[:, None])
        live = pf.sign != 0
        eye = np.eye(self.n_particles)
        minv = np.linalg.inv(np.where(live[..., None, None], m, eye))
        minv = minv * weight[..., None, None]
        # d log|psi| / d Phi_k = w_k M_k^{-1} Phi_k A
        g_phi = minv @ phi @ a[None]
        # d log|psi| / d a_jl (j<l) = w_k (Phi^T M^{-1} Phi)_{lj}
        kmat = np.swapaxes(phi, -1, -2) @ minv @ phi
        iu = np.triu_indices(self.n_orb, 1)
        g_anti = kmat[..., iu[1], iu[0]]
        b = phi.shape[0]
        out = np.zeros((b, self.layout.size))
        out[:, :self.layout.slices["envelope"].stop] = self.orbital_vjp(g_phi, h, d_orb, env, phi)
        anti = np.zeros((b,) + self.layout.shapes["antisym"])
        anti[:, state] = g_anti
        out[:, self.layout.slices["antisym"]] = anti.reshape(b, -1)
        return out

    def orbital_vjp(self, g_phi, h, d_orb, env, phi) -> np.ndarray:
        """Pull ``dL/dPhi`` (B, K, N, O) back to the orbital parameter groups.

        Returns ``(B, n)`` over the contiguous ``w_up, w_down, envelope`` groups.
        """
        b = g_phi.shape[0]
        ge = g_phi * env
        up = self.spin == 0
        g_up = np.einsum("bnf,bkno->bkfo", h[:, up], ge[:, :, up])
        g_dn = np.einsum("bnf,bkno->bkfo", h[:, ~up], ge[:, :, ~up])
        g_env = -np.einsum("bkno,bno->bko", g_phi * phi, d_orb)
        return np.concatenate([g_up.reshape(b, -1), g_dn.reshape(b, -1), g_env.reshape(b, -1)], axis=1)


def evaluate(model: WaveFunctionModel, params, state: int, config: Configuration) -> SignedLogValue:
    """Signed log of ``psi_state`` at a single configuration."""
    v = model.log_psi(params, state, config.coords[None])
    return SignedLogValue(float(np.asarray(v.sign)[0]), float(np.asarray(v.log_abs)[0]))


def antisymmetry_check(model: WaveFunctionModel, params, state: int, coords, i: int, j: int,
                       tol: float = 1e-12) -> bool:
    """True iff swapping same-spin particles ``i`` and ``j`` flips the sign only."""
    coords = np.array(coords, dtype=float)
    spins = getattr(model, "spin", None)
    if spins is not None and spins[i] != spins[j]:
        raise ValueError("antisymmetry is only defined for equal-spin particles")
    swapped = coords.copy()
    swapped[[i, j]] = swapped[[j, i]]
    a = model.log_psi(params, state, coords[None])
    b = model.log_psi(params, state, swapped[None])
    sa, sb = float(np.asarray(a.sign)[0]), float(np.asarray(b.sign)[0])
    la, lb = float(np.asarray(a.log_abs)[0]), float(np.asarray(b.log_abs)[0])
    if sa == 0 or sb == 0:
        return sa == sb == 0
    return sb == -sa and abs(la - lb) <= tol * max(1.0, abs(la))
