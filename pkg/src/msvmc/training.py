"""Multi-state optimization: penalty objective, adaptive weights, state
reordering, spin-snap targets and a momentum-SGD loop."""

from __future__ import annotations

import base64
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import estimators as est
from . import sampler as smp
from .ansatz import EvaluationError, WaveFunctionModel

log = logging.getLogger(__name__)

WARMUP_STEPS = 10
COLLAPSE_ENERGY_TOL = 1e-4
COLLAPSE_OVERLAP = 0.9


class NaNAbort(RuntimeError):
    def __init__(self, message: str, step: int, checkpoint: dict | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    steps: int = 20000
    lr0: float = 0.02
    t_decay: float = 10000.0
    momentum: float = 0.9
    grad_clip: float = 0.032
    beta_tilde: float = 4.0
    eps_floor: float = 1e-3
    ema_decay: float = 0.99
    n_walkers_total: int = 3072
    decorr_steps: int = 20
    target_acceptance: float = smp.TARGET_ACCEPTANCE
    init_sigma: float = 1.0
    bridge_iters: int = est.BRIDGE_ITERS
    bridge_clip: float = est.BRIDGE_CLIP
    msis_enabled: bool = True
    snap_enabled: bool = False
    snap_t_ramp: float = 100000.0
    snap_width: float = 10000.0
    snap_s2_values: list[float] | None = None
    trace_every: int = 1
    checkpoint_every: int = 0
    eval_batches: int = 50
    threads: int = 1

    def validate(self, n_states: int) -> None:
        if self.n_walkers_total < 2 * n_states:
            raise ValueError(f"n_walkers_total={self.n_walkers_total} must be >= 2*n_states={2 * n_states}")
        for name in ("lr0", "t_decay", "grad_clip", "beta_tilde", "eps_floor", "bridge_clip",
                     "target_acceptance", "init_sigma", "snap_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1 or not 0 < self.ema_decay < 1:
            raise ValueError("momentum and ema_decay must lie in [0, 1)")
        if self.steps < 0 or self.decorr_steps < 1 or self.bridge_iters < 1 or self.trace_every < 1:
            raise ValueError("steps, decorr_steps, bridge_iters and trace_every must be positive")


# --------------------------------------------------------------------------- penalty weights


@dataclass
class PenaltySchedule:
    n_states: int
    beta_tilde: float = 4.0
    eps_floor: float = 1e-3
    decay: float = 0.99
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    count: int = 0

    def update(self, energies, stds) -> None:
        e, sd = np.asarray(energies, dtype=float), np.asarray(stds, dtype=float)
        if self.mean is None:
            self.mean, self.std = e.copy(), sd.copy()
        else:
            self.mean = self.decay * self.mean + (1 - self.decay) * e
            self.std = self.decay * self.std + (1 - self.decay) * sd
        self.count += 1

    def permute(self, perm) -> None:
        if self.mean is not None:
            self.mean, self.std = self.mean[perm], self.std[perm]


def penalty_weights(schedule: PenaltySchedule) -> np.ndarray:
    """``beta_st = beta_tilde * max(|E_s - E_t|, sigma_s, eps)`` if state ``s`` lies below ``t``.

    Exact ties are broken by index, so exactly one state of each pair
    carries the penalty. During the first ``WARMUP_STEPS`` updates only the
    spread term enters.
    """
    S = schedule.n_states
    beta = np.zeros((S, S))
    if schedule.mean is None:
        return beta
    m, sd = schedule.mean, schedule.std
    warm = schedule.count <= WARMUP_STEPS
    for s in range(S):
        for t in range(S):
            if s == t:
                continue
            if m[s] < m[t] or (m[s] == m[t] and s < t):
                gap = 0.0 if warm else abs(m[s] - m[t])
                beta[s, t] = schedule.beta_tilde * max(gap, sd[s], schedule.eps_floor)
    return beta


def lr_at(cfg: TrainConfig, t: int) -> float:
    return cfg.lr0 / (1.0 + t / cfg.t_decay)


def clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


def momentum_update(params: np.ndarray, velocity: np.ndarray, grad: np.ndarray, cfg: TrainConfig,
                    step: int) -> tuple[np.ndarray, np.ndarray]:
    """One clipped heavy-ball step; returns new ``(params, velocity)``."""
    velocity = cfg.momentum * velocity + clip_norm(grad, cfg.grad_clip)
    return params - lr_at(cfg, step) * velocity, velocity


# --------------------------------------------------------------------------- spin snap


def snap_ramp(t: float, t_ramp: float = 100000.0, width: float = 10000.0, scale: float = 0.1) -> float:
    """Sigmoid ramp reaching 10% of ``scale`` at ``t_ramp - width/2`` and 90% at ``t_ramp + width/2``."""
    z = (t - t_ramp) / (width / (2.0 * math.log(9.0)))
    return scale / (1.0 + math.exp(-z)) if z > -700 else 0.0


def snap_target(s2: float, lam: float = 1.0, n_up: int | None = None, n_down: int | None = None):
    """Nearest spin ``s`` with ``s(s+1)`` closest to ``<S^2>``; returns ``(s, lam * (<S^2> - s(s+1))^2)``."""
    if s2 < 0:
        raise ValueError("<S^2> must be non-negative")
    # with particle counts only s >= |S_z| in steps of one are allowed
    paired = n_up is not None and n_down is not None
    start = 0.5 * abs(n_up - n_down) if paired else 0.0
    step = 1.0 if paired else 0.5
    cands = []
    s = start
    while True:
        cands.append(s)
        if s * (s + 1) > s2:
            cands.append(s + step)
            break
        s += step
    best = min(cands, key=lambda c: abs(c * (c + 1) - s2))
    return best, lam * (s2 - best * (best + 1)) ** 2


# --------------------------------------------------------------------------- gradient assembly


@dataclass
class TrainState:
    params: np.ndarray
    velocity: np.ndarray
    step: int
    chains: list
    schedule: PenaltySchedule
    ratios: np.ndarray
    snap_weight: float = 0.0
    snap_targets: list = field(default_factory=list)


@dataclass
class StepInfo:
    energies: list
    overlap_hat: np.ndarray  # O[s, t] = E_{p_s}[psi_t / psi_s]
    beta: np.ndarray
    penalty: float


def overlap_ratio_matrix(pooled: smp.PooledBatch, ratios, msis: bool) -> np.ndarray:
    """``O[s, t] = E_{p_s}[psi_t / psi_s]`` from the mixture, or per-state samples when ``msis`` is off."""
    S = pooled.n_states
    if msis:
        return est.msis_single_ratio(pooled, ratios)
    o = np.eye(S)
    for s in range(S):
        for t in range(S):
            if s != t:
                o[s, t] = float(np.mean(est.ratio_samples(pooled, s, t)[0]))
    return o


def overlap_sq_grad(pooled: smp.PooledBatch, energy: est.EnergyEstimate, s: int, t: int,
                    o_st: float, o_ts: float) -> np.ndarray:
    """Gradient of ``|S_st|^2`` with respect to state ``t`` only.

    ``2 O_st E_{p_t}[(psi_s/psi_t - O_ts) grad log|psi_t|]`` on the samples of ``t``.
    """
    rows = pooled.of_state(t)
    keep = energy.keep
    ratio, _ = est._clamped_ratio(pooled.sign[rows, s][keep], pooled.log_abs[rows, s][keep],
                                  pooled.sign[rows, t][keep], pooled.log_abs[rows, t][keep])
    centered = est.clip_outliers(ratio) - o_ts
    return 2.0 * o_st * np.mean(centered[:, None] * energy.dlog, axis=0)


def total_loss_grad(train_state: TrainState, energies: list, pooled: smp.PooledBatch,
                    overlap_hat: np.ndarray, spin_grad: Callable | None = None,
                    s2_values=None) -> tuple[np.ndarray, StepInfo]:
    """Energy gradients plus weighted overlap-penalty gradients and the snap term.

    The penalty ``beta_st |S_st|^2`` only moves the higher state ``t``.
    """
    grad = np.zeros_like(train_state.params)
    for e in energies:
        grad += e.grad
    beta = penalty_weights(train_state.schedule)
    penalty = 0.0
    S = len(energies)
    for s in range(S):
        for t in range(S):
            if beta[s, t] == 0.0:
                continue
            o_st, o_ts = overlap_hat[s, t], overlap_hat[t, s]
            penalty += beta[s, t] * o_st * o_ts
            grad += beta[s, t] * overlap_sq_grad(pooled, energies[t], s, t, o_st, o_ts)
    lam = train_state.snap_weight
    if lam > 0 and s2_values is not None and spin_grad is not None:
        for s, s2 in enumerate(s2_values):
            s_star, _ = snap_target(s2)
            grad += 2.0 * lam * (s2 - s_star * (s_star + 1)) * spin_grad(train_state.params, s)
    return grad, StepInfo([e.energy for e in energies], overlap_hat, beta, penalty)


def reorder_states(train_state: TrainState, model: WaveFunctionModel) -> np.ndarray:
    """Stable sort of states by EMA energy, applied to parameters, chains, EMAs and ratios."""
    sch = train_state.schedule
    if sch.mean is None:
        return np.arange(sch.n_states)
    perm = np.argsort(sch.mean, kind="stable")
    if np.array_equal(perm, np.arange(len(perm))):
        return perm
    train_state.params = model.permute_states(train_state.params, perm)
    train_state.velocity = model.permute_states(train_state.velocity, perm)
    train_state.chains = [train_state.chains[i] for i in perm]
    for i, c in enumerate(train_state.chains):
        c.state = i
    sch.permute(perm)
    r = train_state.ratios[perm]
    train_state.ratios = r / r[0]
    if train_state.snap_targets:
        train_state.snap_targets = [train_state.snap_targets[i] for i in perm]
    return perm


# --------------------------------------------------------------------------- checkpoints


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def make_checkpoint(model: WaveFunctionModel, ts: TrainState, seed: int) -> dict:
    groups = model.layout.unflatten(ts.params)
    sch = ts.schedule
    return {
        "step": ts.step,
        "params": {k: encode_array(v) for k, v in groups.items()},
        "rng_cursor": {"seed": seed, "chain_steps": [c.step for c in ts.chains]},
        "emas": {
            "mean": None if sch.mean is None else sch.mean.tolist(),
            "std": None if sch.std is None else sch.std.tolist(),
            "count": sch.count,
        },
        "step_sigmas": [c.step_sigma for c in ts.chains],
        "ratios": ts.ratios.tolist(),
    }


def load_checkpoint_params(model: WaveFunctionModel, ckpt: dict) -> np.ndarray:
    return model.layout.flatten({k: decode_array(v) for k, v in ckpt["params"].items()})


# --------------------------------------------------------------------------- loop


@dataclass
class RunResult:
    params: np.ndarray
    energies: np.ndarray
    energy_stderr: np.ndarray
    overlaps: np.ndarray
    bhattacharyya: np.ndarray
    ess: np.ndarray
    energy_trace: list = field(default_factory=list)  # (step, state, energy, stderr)
    overlap_trace: list = field(default_factory=list)  # (step, s, t, overlap, bhattacharyya, ess)
    penalty_trace: list = field(default_factory=list)  # (step, penalty)
    sq_overlap_trace: list = field(default_factory=list)  # (step, s, t, O_st O_ts as seen by the loss)
    collapse_flags: list = field(default_factory=list)
    checkpoint: dict | None = None

    def report(self) -> dict:
        return {
            "energies": self.energies.tolist(),
            "energy_stderr": self.energy_stderr.tolist(),
            "overlap": self.overlaps.tolist(),
            "bhattacharyya": self.bhattacharyya.tolist(),
            "ess": {"per_state": self.ess.tolist(), "min": float(np.min(self.ess)),
                    "mean": float(np.mean(self.ess))},
            "collapse_flags": self.collapse_flags,
        }


def _measure(model, hamiltonian, ts: TrainState, cfg: TrainConfig):
    pooled = smp.pool_batch(ts.chains, model, ts.params)
    energies = [
        est.energy_and_grad(hamiltonian, model, ts.params, c.state, c.walkers, c.log_abs, c.sign)
        for c in ts.chains
    ]
    bridge = est.bridge_ratios(pooled, cfg.bridge_iters, cfg.bridge_clip, init=ts.ratios)
    return pooled, energies, bridge


def _pair_overlaps(pooled, summary: est.MixtureSummary, msis: bool):
    """Reported overlaps come from the mixture, or from single-state estimates when ``msis`` is off."""
    s_hat = summary.s_hat
    if not msis:
        s_hat = est.overlap_single_state_matrix(pooled) if pooled.n_states > 1 else np.eye(1)
    return s_hat, summary.f_hat, summary.ess.normalized


def optimize(model: WaveFunctionModel, hamiltonian, params: np.ndarray, cfg: TrainConfig, seed: int = 0,
             output_dir: str | Path | None = None, spin_grad: Callable | None = None) -> RunResult:
    """Run ``cfg.steps`` optimization steps followed by an evaluation phase.

    Each step decorrelates the chains, pools the walkers, refreshes the
    normalizer ratios by bridge sampling, assembles the penalized gradient,
    clips its norm and applies a momentum update. A non-finite gradient or
    parameter raises :class:`NaNAbort` carrying the last good checkpoint.
    """
    S = model.n_states
    cfg.validate(S)
    counts = smp.split_walkers(cfg.n_walkers_total, S)
    params = np.array(params, dtype=float)
    chains = [smp.init_chain(model, params, s, counts[s], seed, cfg.init_sigma) for s in range(S)]
    ts = TrainState(params, np.zeros_like(params), 0, chains,
                    PenaltySchedule(S, cfg.beta_tilde, cfg.eps_floor, cfg.ema_decay), np.ones(S))
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = RunResult(params, np.zeros(S), np.zeros(S), np.eye(S), np.eye(S), np.ones(S))
    last_good = make_checkpoint(model, ts, seed)

    for step in range(cfg.steps):
        ts.step = step
        smp.advance_all(ts.chains, model, ts.params, cfg.decorr_steps, cfg.target_acceptance, cfg.threads)
        try:
            pooled, energies, bridge = _measure(model, hamiltonian, ts, cfg)
        except (EvaluationError, est.EmptyBatchError) as err:
            raise NaNAbort(f"step {step}: {err}", step, last_good) from err
        ts.ratios = bridge.ratios
        ts.schedule.update([e.energy for e in energies], [math.sqrt(e.variance) for e in energies])
        summary = est.mixture_summary(pooled, bridge.ratios)
        o_hat = summary.o_hat if cfg.msis_enabled else overlap_ratio_matrix(pooled, bridge.ratios, False)
        if cfg.snap_enabled:
            ts.snap_weight = snap_ramp(step, cfg.snap_t_ramp, cfg.snap_width)
        grad, info = total_loss_grad(ts, energies, pooled, o_hat, spin_grad,
                                     cfg.snap_s2_values if cfg.snap_enabled else None)
        if not np.all(np.isfinite(grad)):
            raise NaNAbort(f"non-finite gradient at step {step}", step, last_good)
        ts.params, ts.velocity = momentum_update(ts.params, ts.velocity, grad, cfg, step)
        if not np.all(np.isfinite(ts.params)):
            raise NaNAbort(f"non-finite parameters after step {step}", step, last_good)

        if step % cfg.trace_every == 0:
            s_hat, f_hat, ess = _pair_overlaps(pooled, summary, cfg.msis_enabled)
            for s, e in enumerate(energies):
                result.energy_trace.append((step, s, e.energy, e.stderr))
            for s in range(S):
                for t in range(s + 1, S):
                    result.overlap_trace.append((step, s, t, float(s_hat[s, t]), float(f_hat[s, t]),
                                                 float(min(ess[s], ess[t]))))
                    if (abs(energies[s].energy - energies[t].energy) < COLLAPSE_ENERGY_TOL
                            and abs(s_hat[s, t]) > COLLAPSE_OVERLAP):
                        log.warning("states %d and %d look collapsed at step %d", s, t, step)
                        result.collapse_flags.append((step, s, t))
            result.penalty_trace.append((step, info.penalty))
            for s in range(S):
                for t in range(s + 1, S):
                    result.sq_overlap_trace.append((step, s, t, float(o_hat[s, t] * o_hat[t, s])))

        reorder_states(ts, model)
        for c in ts.chains:
            smp.sync(c, model, ts.params)
        ts.step = step + 1
        last_good = make_checkpoint(model, ts, seed)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            (out / "checkpoint.json").write_text(json.dumps(last_good))

    _evaluate(model, hamiltonian, ts, cfg, result)
    result.params = ts.params
    result.checkpoint = last_good
    if out is not None:
        write_artifacts(result, out)
    return result


def _evaluate(model, hamiltonian, ts: TrainState, cfg: TrainConfig, result: RunResult) -> None:
    """Average energies, overlaps and ESS over ``cfg.eval_batches`` fresh batches at fixed parameters."""
    S = model.n_states
    n = max(cfg.eval_batches, 1)
    totals = [np.zeros(c.walkers.shape[0]) for c in ts.chains]
    kept = [np.zeros(c.walkers.shape[0]) for c in ts.chains]
    s_acc, f_acc, ess_acc = np.zeros((S, S)), np.zeros((S, S)), np.zeros(S)
    for _ in range(n):
        smp.advance_all(ts.chains, model, ts.params, cfg.decorr_steps, None, cfg.threads)
        pooled, energies, bridge = _measure(model, hamiltonian, ts, cfg)
        ts.ratios = bridge.ratios
        s_hat, f_hat, ess = _pair_overlaps(pooled, est.mixture_summary(pooled, bridge.ratios), cfg.msis_enabled)
        for s, e in enumerate(energies):
            # clipping steadies the gradient but biases the mean, so reported energies use raw values
            totals[s][e.keep] += e.e_loc
            kept[s][e.keep] += 1.0
        s_acc += s_hat
        f_acc += f_hat
        ess_acc += ess
    result.energies, result.energy_stderr = np.zeros(S), np.zeros(S)
    for s in range(S):
        result.energies[s], result.energy_stderr[s] = walker_ratio_mean(totals[s], kept[s])
    result.overlaps, result.bhattacharyya, result.ess = s_acc / n, f_acc / n, ess_acc / n


def walker_ratio_mean(totals: np.ndarray, counts: np.ndarray) -> tuple[float, float]:
    """Mean and error bar of ``sum(totals) / sum(counts)`` over independent walkers.

    Successive batches of one walker are correlated, so the error bar is
    built from per-walker totals rather than from batch means.
    """
    k = float(counts.sum())
    mean = float(totals.sum() / k)
    w = totals.size
    if w < 2:
        return mean, 0.0
    resid = totals - mean * counts
    return mean, float(math.sqrt(np.sum(resid**2) * w / (w - 1)) / k)


def write_artifacts(result: RunResult, out: Path) -> None:
    with open(out / "energy_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "state", "energy", "energy_stderr"])
        for row in result.energy_trace:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
    with open(out / "overlap_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "s", "t", "overlap", "bhattacharyya", "ess"])
        for row in result.overlap_trace:
            w.writerow([row[0], row[1], row[2]] + [repr(float(v)) for v in row[3:]])
    (out / "report.json").write_text(json.dumps(result.report(), indent=2))
    if result.checkpoint is not None:
        (out / "checkpoint.json").write_text(json.dumps(result.checkpoint))


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
