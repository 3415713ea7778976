"""Metropolis-Hastings walker ensembles, one chain per state.

Random numbers for every move come from a generator keyed by
``(seed, state, step)``; walker ``i`` always consumes row ``i`` of the draw,
so trajectories do not depend on how chains are scheduled.
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ansatz import EvaluationError, WaveFunctionModel

log = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.525
ADAPT_RATE = 0.1
SIGMA_BOUNDS = (1e-3, 1e2)
ACC_WINDOW = 20
DECORRELATION_STEPS = 20


def stream_rng(seed: int, state: int, step: int, purpose: int = 0) -> np.random.Generator:
    """Deterministic generator for one chain step; distinct keys give independent streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose, state, step])))


@dataclass
class ChainState:
    """Walkers of one state's Markov chain plus cached ``log|psi|`` and sign."""

    walkers: np.ndarray
    sign: np.ndarray
    log_abs: np.ndarray
    step_sigma: float
    seed: int
    state: int
    step: int = 0
    acc_window: deque = field(default_factory=lambda: deque(maxlen=ACC_WINDOW))
    accepted: int = 0
    proposed: int = 0

    @property
    def n_walkers(self) -> int:
        return self.walkers.shape[0]

    @property
    def acceptance(self) -> float:
        return float(np.mean(self.acc_window)) if self.acc_window else float("nan")

    @property
    def stream_id(self) -> tuple[int, int]:
        return (self.seed, self.state)


def init_chain(model: WaveFunctionModel, params, state: int, n_walkers: int, seed: int,
               step_sigma: float = 1.0, spread: float = 1.0) -> ChainState:
    """Walkers drawn around the origin (or the nuclei, for molecular models), then synced."""
    rng = stream_rng(seed, state, 0, purpose=1)
    shape = (n_walkers, model.n_particles, model.dim)
    centers = getattr(model, "nuclei", None)
    x = spread * rng.normal(size=shape)
    if centers is not None:
        pick = rng.integers(0, centers.shape[0], size=shape[:2])
        x = x + centers[pick]
    chain = ChainState(x, np.zeros(n_walkers), np.zeros(n_walkers), float(step_sigma), int(seed), int(state))
    sync(chain, model, params)
    # walkers on a node would never move; nudge them off
    for attempt in range(10):
        dead = chain.sign == 0
        if not np.any(dead):
            break
        chain.walkers[dead] += 0.1 * spread * rng.normal(size=chain.walkers[dead].shape)
        sync(chain, model, params)
    return chain


def sync(chain: ChainState, model: WaveFunctionModel, params) -> ChainState:
    """Refresh cached values after a parameter update."""
    try:
        v = model.log_psi(params, chain.state, chain.walkers)
    except EvaluationError as err:
        raise EvaluationError(f"state {chain.state}: {err}", err.walker, err.coordinate) from err
    chain.sign = np.asarray(v.sign, dtype=float)
    chain.log_abs = np.asarray(v.log_abs, dtype=float)
    return chain


def mh_step(chain: ChainState, model: WaveFunctionModel, params, single_particle: bool = False) -> ChainState:
    """One Metropolis-Hastings sweep with a symmetric Gaussian proposal.

    All particles move jointly unless ``single_particle`` is set, in which
    case one uniformly chosen particle per walker moves.
    """
    chain.step += 1
    rng = stream_rng(chain.seed, chain.state, chain.step)
    x = chain.walkers
    noise = chain.step_sigma * rng.normal(size=x.shape)
    u = rng.random(x.shape[0])
    if single_particle and x.shape[1] > 1:
        which = rng.integers(0, x.shape[1], size=x.shape[0])
        mask = np.zeros(x.shape[:2], dtype=bool)
        mask[np.arange(x.shape[0]), which] = True
        noise = noise * mask[..., None]
    proposal = x + noise
    new = model.log_psi(params, chain.state, proposal)
    new_sign = np.asarray(new.sign, dtype=float)
    new_log = np.asarray(new.log_abs, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        log_ratio = 2.0 * (new_log - chain.log_abs)
    log_ratio = np.where(new_sign == 0, -np.inf, np.nan_to_num(log_ratio, nan=-np.inf))
    accept = np.log(np.maximum(u, 1e-300)) < np.minimum(log_ratio, 0.0)
    chain.walkers = np.where(accept[:, None, None], proposal, x)
    chain.sign = np.where(accept, new_sign, chain.sign)
    chain.log_abs = np.where(accept, new_log, chain.log_abs)
    frac = float(np.mean(accept))
    chain.acc_window.append(frac)
    chain.accepted += int(accept.sum())
    chain.proposed += accept.size
    return chain


def adapt_step(chain: ChainState, target_acc: float = TARGET_ACCEPTANCE, eta: float = ADAPT_RATE) -> ChainState:
    """``step_sigma *= exp(eta * (acc - target))`` clamped to ``SIGMA_BOUNDS``."""
    if not chain.acc_window:
        return chain
    acc = chain.acceptance
    sigma = chain.step_sigma * float(np.exp(eta * (acc - target_acc)))
    chain.step_sigma = float(np.clip(sigma, *SIGMA_BOUNDS))
    return chain


def advance(chain: ChainState, model, params, n_steps: int = DECORRELATION_STEPS,
            target_acc: float | None = TARGET_ACCEPTANCE, single_particle: bool = False) -> ChainState:
    for _ in range(n_steps):
        mh_step(chain, model, params, single_particle)
    if target_acc is not None:
        adapt_step(chain, target_acc)
    return chain


def advance_all(chains: list[ChainState], model, params, n_steps: int = DECORRELATION_STEPS,
                target_acc: float | None = TARGET_ACCEPTANCE, threads: int = 1,
                single_particle: bool = False) -> list[ChainState]:
    """Advance every state's chain; the thread count never changes the result."""
    if threads <= 1 or len(chains) == 1:
        for c in chains:
            advance(c, model, params, n_steps, target_acc, single_particle)
        return chains
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda c: advance(c, model, params, n_steps, target_acc, single_particle), chains))
    return chains


def split_walkers(n_total: int, n_states: int) -> list[int]:
    """Equal walkers per state; the remainder goes to the lowest state indices."""
    base, rem = divmod(n_total, n_states)
    return [base + (1 if s < rem else 0) for s in range(n_states)]


@dataclass
class PooledBatch:
    """Samples of every state's chain with every state's ``log|psi|`` evaluated on them."""

    x: np.ndarray  # (N, n_particles, d)
    origin: np.ndarray  # (N,) state whose chain produced the sample
    sign: np.ndarray  # (N, S)
    log_abs: np.ndarray  # (N, S)
    counts: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.sign.shape[1]

    @property
    def n_total(self) -> int:
        return self.x.shape[0]

    def of_state(self, s: int) -> np.ndarray:
        return self.origin == s


def pool_batch(chains: list[ChainState], model: WaveFunctionModel, params) -> PooledBatch:
    """Concatenate all chains and evaluate every wave function on every sample."""
    xs, origin, signs, logs = [], [], [], []
    for c in chains:
        try:
            sgn, lg = model.log_psi_all(params, c.walkers)
        except EvaluationError as err:
            raise EvaluationError(f"pooled evaluation failed on chain {c.state}, walker {err.walker}: {err}",
                                  err.walker, err.coordinate) from err
        xs.append(c.walkers)
        origin.append(np.full(c.n_walkers, c.state))
        signs.append(np.asarray(sgn, dtype=float).reshape(c.n_walkers, -1))
        logs.append(np.asarray(lg, dtype=float).reshape(c.n_walkers, -1))
    counts = np.array([c.n_walkers for c in chains])
    return PooledBatch(np.concatenate(xs), np.concatenate(origin), np.concatenate(signs),
                       np.concatenate(logs), counts)


def pooled_from_samples(model: WaveFunctionModel, params, samples: list[np.ndarray]) -> PooledBatch:
    """Build a :class:`PooledBatch` from per-state sample arrays (exact or external draws)."""
    xs, origin, signs, logs = [], [], [], []
    for s, x in enumerate(samples):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None, None]
        sgn, lg = model.log_psi_all(params, x)
        xs.append(x)
        origin.append(np.full(x.shape[0], s))
        signs.append(np.asarray(sgn, dtype=float).reshape(x.shape[0], -1))
        logs.append(np.asarray(lg, dtype=float).reshape(x.shape[0], -1))
    return PooledBatch(np.concatenate(xs), np.concatenate(origin), np.concatenate(signs),
                       np.concatenate(logs), np.array([len(x) for x in xs]))


class ExactSampler1D:
    """Inverse-CDF sampler for ``|psi_state|^2`` of a one-particle 1-D model, tabulated once."""

    def __init__(self, model: WaveFunctionModel, params, state: int,
                 bounds: tuple[float, float] = (-12.0, 12.0), grid: int = 40001):
        xs = np.linspace(bounds[0], bounds[1], grid)
        v = model.log_psi(params, state, xs)
        la = np.asarray(v.log_abs)
        dens = np.where(np.asarray(v.sign) == 0, 0.0, np.exp(2.0 * (la - np.max(la))))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
        self.xs = xs
        self.cdf = cdf / cdf[-1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.interp(rng.random(n), self.cdf, self.xs)


def sample_exact_1d(model: WaveFunctionModel, params, state: int, n: int, rng: np.random.Generator,
                    bounds: tuple[float, float] = (-12.0, 12.0), grid: int = 40001) -> np.ndarray:
    """Independent draws from ``|psi_state|^2`` of a one-particle 1-D model by inverse CDF."""
    return ExactSampler1D(model, params, state, bounds, grid).sample(n, rng)


@dataclass
class GaussianFamily:
    """Isotropic Gaussians ``q_s = exp(-|x - mu_s|^2 / (2 sigma_s^2))`` in ``dim`` dimensions.

    Used as bridge-sampling fixtures with known ``r_s = (sigma_0 / sigma_s)^dim``.
    """

    sigmas: tuple[float, ...]
    means: tuple[float, ...] | None = None
    dim: int = 2

    def _mu(self) -> np.ndarray:
        mu = np.zeros((len(self.sigmas), self.dim))
        if self.means is not None:
            mu[:, 0] = self.means
        return mu

    def true_ratios(self) -> np.ndarray:
        s = np.asarray(self.sigmas, dtype=float)
        return (s[0] / s) ** self.dim

    def pooled(self, n_per_state: int, rng: np.random.Generator, scale=None) -> PooledBatch:
        """Exact draws from every state, each density optionally multiplied by ``scale[s]``."""
        sig = np.asarray(self.sigmas, dtype=float)
        mu = self._mu()
        S = sig.size
        x = np.concatenate([mu[s] + sig[s] * rng.normal(size=(n_per_state, self.dim)) for s in range(S)])
        origin = np.repeat(np.arange(S), n_per_state)
        d2 = np.sum((x[:, None, :] - mu[None]) ** 2, axis=-1)
        log_abs = -d2 / (4.0 * sig[None] ** 2)
        if scale is not None:
            log_abs = log_abs + 0.5 * np.log(np.asarray(scale, dtype=float))[None]
        return PooledBatch(x[:, None, :], origin, np.ones_like(log_abs), log_abs, np.full(S, n_per_state))
