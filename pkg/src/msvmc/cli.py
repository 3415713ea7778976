"""Command-line entry point: optimization runs, estimator benchmarks,
structure alignment and a fast self-check battery."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import estimators as est
from . import numerics as nm
from . import pretraining as pt
from . import sampler as smp
from . import training as tr
from .ansatz import ExcitedPfaffianModel, HermiteGaussianModel

log = logging.getLogger("msvmc")

EXIT_OK, EXIT_FAIL, EXIT_NAN, EXIT_CONFIG = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config


@dataclass
class SystemConfig:
    type: str = "1d-harmonic"
    n_states: int = 3
    omega: float = 1.0
    max_degree: int = 4
    potential: list | None = None  # polynomial coefficients for "1d-polynomial"
    nuclei: list | None = None
    charges: list | None = None
    n_up: int = 1
    n_down: int = 1
    n_det: int = 1
    orbitals_per_nucleus: int = 2
    init_alpha: float = 0.5
    init_noise: float = 0.1
    init_seed: int = 0


@dataclass
class SamplerConfig:
    n_walkers_total: int = 3072
    decorr_steps: int = 20
    target_acceptance: float = smp.TARGET_ACCEPTANCE
    init_sigma: float = 1.0


@dataclass
class SnapConfig:
    enabled: bool = False
    t_ramp: float = 100000.0
    width: float = 10000.0
    s2_values: list | None = None


@dataclass
class TrainingConfig:
    steps: int = 20000
    lr0: float = 0.02
    t_decay: float = 10000.0
    momentum: float = 0.9
    beta_tilde: float = 4.0
    eps_floor: float = 1e-3
    ema_decay: float = 0.99
    grad_clip: float = 0.032
    trace_every: int = 1
    checkpoint_every: int = 0
    eval_batches: int = 50
    snap: SnapConfig = field(default_factory=SnapConfig)


@dataclass
class EstimatorConfig:
    bridge_iters: int = est.BRIDGE_ITERS
    bridge_clip: float = est.BRIDGE_CLIP
    msis_enabled: bool = True


@dataclass
class PretrainSection:
    enabled: bool = False
    steps: int = 1000
    lr: float = 0.2
    n_walkers: int = 256
    targets_path: str | None = None
    selectors_path: str | None = None


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    estimators: EstimatorConfig = field(default_factory=EstimatorConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    seed: int = 0
    output_dir: str = "runs/out"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        sys_ = self.system
        if sys_.type not in ("1d-harmonic", "1d-polynomial", "toy-molecular"):
            raise ConfigError(f"system.type: unknown system {sys_.type!r}")
        if sys_.n_states < 1:
            raise ConfigError("system.n_states: must be >= 1")
        if sys_.type == "1d-polynomial" and not sys_.potential:
            raise ConfigError("system.potential: polynomial coefficients required")
        if sys_.type == "toy-molecular" and (not sys_.nuclei or not sys_.charges):
            raise ConfigError("system.nuclei: nuclei and charges required for toy-molecular")
        if sys_.type != "toy-molecular" and sys_.max_degree + 1 < sys_.n_states:
            raise ConfigError("system.max_degree: must be >= n_states - 1")
        if self.sampler.n_walkers_total < 2 * sys_.n_states:
            raise ConfigError(
                f"sampler.n_walkers_total: {self.sampler.n_walkers_total} < 2 * n_states = {2 * sys_.n_states}")
        checks = [
            ("system.omega", sys_.omega), ("system.init_alpha", sys_.init_alpha),
            ("sampler.target_acceptance", self.sampler.target_acceptance),
            ("sampler.init_sigma", self.sampler.init_sigma), ("sampler.decorr_steps", self.sampler.decorr_steps),
            ("training.lr0", self.training.lr0), ("training.t_decay", self.training.t_decay),
            ("training.beta_tilde", self.training.beta_tilde), ("training.grad_clip", self.training.grad_clip),
            ("training.eps_floor", self.training.eps_floor), ("training.trace_every", self.training.trace_every),
            ("training.snap.width", self.training.snap.width),
            ("estimators.bridge_iters", self.estimators.bridge_iters),
            ("estimators.bridge_clip", self.estimators.bridge_clip),
        ]
        for name, v in checks:
            if not v > 0:
                raise ConfigError(f"{name}: must be positive, got {v}")
        if self.training.steps < 0:
            raise ConfigError("training.steps: must be >= 0")
        if not 0 < self.sampler.target_acceptance < 1:
            raise ConfigError("sampler.target_acceptance: must lie in (0, 1)")
        if not 0 <= self.training.momentum < 1 or not 0 < self.training.ema_decay < 1:
            raise ConfigError("training.momentum: momentum and ema_decay must lie in [0, 1)")
        if self.pretrain.enabled and sys_.type != "toy-molecular":
            raise ConfigError("pretrain.enabled: pretraining needs a toy-molecular system")
        if self.pretrain.enabled and not self.pretrain.targets_path:
            raise ConfigError("pretrain.targets_path: required when pretraining is enabled")

    def train_config(self, threads: int = 1) -> tr.TrainConfig:
        t, s, e = self.training, self.sampler, self.estimators
        return tr.TrainConfig(
            steps=t.steps, lr0=t.lr0, t_decay=t.t_decay, momentum=t.momentum, grad_clip=t.grad_clip,
            beta_tilde=t.beta_tilde, eps_floor=t.eps_floor, ema_decay=t.ema_decay,
            n_walkers_total=s.n_walkers_total, decorr_steps=s.decorr_steps,
            target_acceptance=s.target_acceptance, init_sigma=s.init_sigma,
            bridge_iters=e.bridge_iters, bridge_clip=e.bridge_clip, msis_enabled=e.msis_enabled,
            snap_enabled=t.snap.enabled, snap_t_ramp=t.snap.t_ramp, snap_width=t.snap.width,
            snap_s2_values=t.snap.s2_values, trace_every=t.trace_every,
            checkpoint_every=t.checkpoint_every, eval_batches=t.eval_batches, threads=threads,
        )


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        where = f"{path}.{name}" if path else name
        sub = {"system": SystemConfig, "sampler": SamplerConfig, "training": TrainingConfig,
               "estimators": EstimatorConfig, "pretrain": PretrainSection, "snap": SnapConfig}.get(name)
        if sub is not None and isinstance(f.default_factory, type):
            kwargs[name] = _build(sub, value, where)
            continue
        default = getattr(cls(), name)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            if isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
                raise ConfigError(f"{where}: expected an integer")
            value = type(default)(value)
        kwargs[name] = value
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config: file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: invalid JSON at line {err.lineno}: {err.msg}") from err
    return parse_config(data)


def bundled_config(name: str = "ho3.json") -> dict:
    return json.loads(resources.files("msvmc").joinpath("configs", name).read_text())


# --------------------------------------------------------------------------- run


def build_system(cfg: RunConfig):
    """Model, Hamiltonian and initial parameters for a resolved config."""
    s = cfg.system
    rng = np.random.default_rng(s.init_seed)
    if s.type in ("1d-harmonic", "1d-polynomial"):
        model = HermiteGaussianModel(s.n_states, s.max_degree)
        g = model.layout.unflatten(model.canonical_params(s.init_alpha))
        g["coeffs"] = g["coeffs"] + s.init_noise * rng.normal(size=g["coeffs"].shape)
        params = model.layout.flatten(g)
        ham = est.Harmonic1D(s.omega) if s.type == "1d-harmonic" else est.Polynomial1D(tuple(s.potential))
        return model, ham, params
    model = ExcitedPfaffianModel(s.nuclei, s.charges, s.n_up, s.n_down, s.n_states, s.n_det,
                                 s.orbitals_per_nucleus)
    return model, est.MolecularHamiltonian(s.nuclei, s.charges), model.init_params(rng, s.init_noise)


def _pretrain(cfg: RunConfig, model, params, seed: int):
    p = cfg.pretrain
    structures = pt.load_structures(p.targets_path)
    st = structures[0]
    n_orb = 2 * st.n_basis
    if p.selectors_path:
        sels = pt.selectors_from_json(json.loads(Path(p.selectors_path).read_text()), n_orb)
        bad = pt.validate_selectors(sels)
        if bad:
            raise pt.OrthogonalityError(f"selector pairs not orthogonal: {bad}", bad)
    else:
        sels = pt.selector_set(n_orb, model.n_particles, [])
    pcfg = pt.PretrainConfig(steps=p.steps, n_walkers=p.n_walkers, lr=p.lr)
    params, hist = pt.pretrain_fit(model, params, pt.PretrainTargets(st, sels), pcfg, seed)
    log.info("pretraining done: LossMO %.3g LossA %.3g", hist[-1][0], hist[-1][1])
    return params


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        cfg.validate()
    except (ConfigError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2))
        return EXIT_OK
    model, ham, params = build_system(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    try:
        if cfg.pretrain.enabled:
            params = _pretrain(cfg, model, params, cfg.seed)
        result = tr.optimize(model, ham, params, cfg.train_config(args.threads), cfg.seed, out)
    except tr.NaNAbort as err:
        print(f"aborted: {err}", file=sys.stderr)
        if err.checkpoint is not None:
            (out / "checkpoint.json").write_text(json.dumps(err.checkpoint))
        return EXIT_NAN
    except (pt.PayloadError, pt.OrthogonalityError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    rep = result.report()
    for s, (e, se) in enumerate(zip(rep["energies"], rep["energy_stderr"])):
        print(f"state {s}: E = {e:.6f} +- {se:.2e}")
    return EXIT_OK


# --------------------------------------------------------------------------- benchmarks


def overlap_variances(n_states: int, n_batch: int, n_batches: int, rng: np.random.Generator,
                      samplers=None, model=None, params=None):
    """Per-pair variances of the single-state and MSIS estimators over repeated exact batches.

    States are the first ``n_states`` oscillator eigenstates with exact
    normalizer ratios. Returns per-pair estimator samples of shape
    ``(n_batches, n_pairs)`` for both estimators and the largest
    ``|f_st| / (S/2)`` seen.
    """
    if model is None:
        model = HermiteGaussianModel(n_states, max(n_states - 1, 0))
        params = model.canonical_params()
    if samplers is None:
        samplers = [smp.ExactSampler1D(model, params, s) for s in range(n_states)]
    ratios = model.exact_ratios(params)
    counts = smp.split_walkers(n_batch, n_states)
    iu = np.triu_indices(n_states, 1)
    single, msis = [], []
    worst = 0.0
    for _ in range(n_batches):
        xs = [samplers[s].sample(counts[s], rng) for s in range(n_states)]
        pooled = smp.pooled_from_samples(model, params, xs)
        f = est.msis_integrand(pooled, ratios)
        if n_states > 1:
            worst = max(worst, float(np.max(np.abs(f[:, iu[0], iu[1]]))) / (n_states / 2.0))
        s_m = f.mean(axis=0)
        s_m = 0.5 * (s_m + s_m.T)
        msis.append(s_m[iu])
        single.append(est.overlap_single_state_known_ratio(pooled, ratios)[iu])
    return np.asarray(single), np.asarray(msis), worst


def cmd_bench_overlap(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for S in args.states:
        model = HermiteGaussianModel(S, max(S - 1, 0))
        params = model.canonical_params()
        samplers = [smp.ExactSampler1D(model, params, s) for s in range(S)]
        for rep in range(args.repetitions):
            if S == 1:
                rows.append([S, rep, args.n_batch, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])  # no pairs
                continue
            single, msis, _ = overlap_variances(S, args.n_batch, args.batches, rng, samplers, model, params)
            pairs = S * (S - 1) / 2
            rows.append([S, rep, args.n_batch, float(np.abs(single.mean(axis=0)).max()),
                         float(np.abs(msis.mean(axis=0)).max()), float(single.var(axis=0, ddof=1).sum()),
                         float(msis.var(axis=0, ddof=1).sum()), pairs * S / (2.0 * args.n_batch),
                         pairs / args.n_batch])
    path = out / "bench_overlap.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_states", "repetition", "n_batch", "max_abs_overlap_single", "max_abs_overlap_msis",
                    "var_single", "var_msis", "bound_single", "bound_msis"])
        w.writerows(rows)
    print(path)
    return EXIT_OK


def bridge_bench_rows(rng: np.random.Generator, sizes=(1000, 10000, 20000), iters: int = est.BRIDGE_ITERS):
    """Ratio error against sample size and iteration for the Gaussian fixtures."""
    fixtures = {
        "sigma_1_2": smp.GaussianFamily((1.0, 2.0)),
        "disjoint_bridged": smp.GaussianFamily((0.3, 3.0, 0.3), (-4.0, 0.0, 4.0)),
        "identical": smp.GaussianFamily((1.0, 1.0, 1.0)),
    }
    rows = []
    for name, fam in fixtures.items():
        truth = fam.true_ratios()
        for n in sizes:
            pooled = fam.pooled(n // len(fam.sigmas), rng)
            r = np.ones(len(truth))
            for it in range(1, iters + 1):
                res = est.bridge_ratios(pooled, iters=1, init=r)
                r = res.ratios
                err = float(np.max(np.abs(r - truth) / truth))
                rows.append([name, n, it, float(r[-1]), float(truth[-1]), err, res.residual])
    return rows


def cmd_bridge_bench(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bridge_bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fixture", "n_samples", "iteration", "ratio_last", "ratio_true", "max_rel_error", "residual"])
        w.writerows(bridge_bench_rows(rng, tuple(args.sizes), args.iters))
    print(path)
    return EXIT_OK


# --------------------------------------------------------------------------- align


def cmd_align(args) -> int:
    try:
        structures = pt.load_structures(args.structures)
    except (pt.PayloadError, json.JSONDecodeError, FileNotFoundError) as err:
        print(f"payload error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.output_dir or ".")
    if args.dry_run:
        print(json.dumps({"structures": len(structures), "groups": len(pt.group_structures(structures))}))
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    aligned, graphs = [], []
    for members in pt.group_structures(structures).values():
        graph = pt.build_graph(members, kabsch=args.kabsch)
        try:
            aligned.extend(pt.propagate_orbitals(graph, members, args.bandwidth))
        except pt.PropagationError as err:
            print(f"propagation error: {err}", file=sys.stderr)
            return EXIT_FAIL
        graphs.append(graph.to_dict())
    (out / "aligned.json").write_text(json.dumps([s.to_dict() for s in aligned], indent=1))
    (out / "graph.json").write_text(json.dumps(graphs, indent=1))
    status = EXIT_OK
    report = {"checked": False, "violations": []}
    if args.selectors:
        try:
            n_orb = 2 * structures[0].n_basis
            sels = pt.selectors_from_json(json.loads(Path(args.selectors).read_text()), n_orb)
        except (pt.PayloadError, json.JSONDecodeError, FileNotFoundError) as err:
            print(f"payload error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        bad = pt.validate_selectors(sels)
        report = {"checked": True, "violations": [list(p) for p in bad]}
        for s, t in bad:
            print(f"selector pair ({s}, {t}) violates det(P_s^T P_t) = delta_st", file=sys.stderr)
        if bad:
            status = EXIT_FAIL
    (out / "selector_report.json").write_text(json.dumps(report))
    for g in graphs:
        print(f"root {g['root']}: order {g['order']}")
    return status


# --------------------------------------------------------------------------- selfcheck


def _check_pfaffian(rng):
    for n in (2, 4, 6, 8):
        a = rng.normal(size=(n, n))
        a = a - a.T
        pf = nm.pfaffian(a).value()
        if abs(pf - nm.pfaffian_bruteforce(a)) > 1e-10 * max(1.0, abs(pf)):
            return f"mismatch with matching expansion at n={n}"
    return None


def _check_pfaffian_det(rng):
    a = rng.normal(size=(64, 8, 8))
    a = a - np.swapaxes(a, -1, -2)
    pf = nm.pfaffian(a).value()
    det = np.linalg.det(a)
    err = float(np.max(np.abs(pf * pf - det) / np.maximum(1.0, np.abs(det))))
    return None if err < 1e-9 else f"Pf^2 != det (relative error {err:.2e})"


def _check_procrustes(rng):
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    src = rng.normal(size=(20, 5))
    rot = nm.procrustes(src, src @ q).rotation
    err = float(np.max(np.abs(rot - q)))
    return None if err < 1e-10 else f"rotation error {err:.2e}"


def _check_msis(rng):
    model = HermiteGaussianModel(3, 4)
    g = model.layout.unflatten(model.canonical_params())
    g["coeffs"] = g["coeffs"] + 0.3 * rng.normal(size=g["coeffs"].shape)
    params = model.layout.flatten(g)
    pooled = smp.pooled_from_samples(model, params, [rng.normal(scale=2.0, size=300) for _ in range(3)])
    est.msis_integrand(pooled, model.exact_ratios(params))
    bad = model.exact_ratios(params)
    bad[2] = -bad[2]
    try:
        est.msis_integrand(pooled, bad)
    except est.MSISBoundError:
        return None
    return "corrupted ratios did not trip the bound"


def _check_ess(rng):
    model = HermiteGaussianModel(3, 4)
    params = model.canonical_params()
    pooled = smp.pooled_from_samples(model, params, [rng.normal(size=200) for _ in range(3)])
    e = est.kish_ess(pooled, model.exact_ratios(params)).ess
    if np.any(e < 1 - 1e-9) or np.any(e > pooled.n_total + 1e-9):
        return f"ESS out of range: {e}"
    return None


def _check_snap(rng):
    grid = np.linspace(0.0, 6.0, 10001)
    vals = np.array([tr.snap_target(v)[1] for v in grid])
    # |d loss / d<S^2>| <= 2 * (half the widest gap between s(s+1) values on the grid)
    limit = 2 * 2.0 * (grid[1] - grid[0]) * 1.01
    worst = float(np.max(np.abs(np.diff(vals))))
    return None if worst <= limit else f"snap loss jumps by {worst:.3g}"


SELF_CHECKS = [
    ("pfaffian_oracle", _check_pfaffian),
    ("pfaffian_square_det", _check_pfaffian_det),
    ("procrustes_recovery", _check_procrustes),
    ("msis_bound", _check_msis),
    ("ess_bounds", _check_ess),
    ("snap_continuity", _check_snap),
]


def run_selfcheck(seed: int = 0, stream=None) -> bool:
    stream = stream or sys.stdout
    ok = True
    for name, fn in SELF_CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            msg = fn(rng)
        except Exception as err:  # a crash counts as a failed check
            msg = f"{type(err).__name__}: {err}"
        ms = 1000 * (time.perf_counter() - t0)
        status = "PASS" if msg is None else "FAIL"
        ok &= msg is None
        print(f"{name:22s} {status} {ms:8.1f} ms" + ("" if msg is None else f"  {msg}"), file=stream)
    return ok


def cmd_selfcheck(args) -> int:
    old = nm._INJECT_SIGN_BUG
    nm._INJECT_SIGN_BUG = bool(args.inject_pfaffian_bug)
    try:
        ok = run_selfcheck(args.seed if args.seed is not None else 0)
    finally:
        nm._INJECT_SIGN_BUG = old
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msvmc", description=__doc__)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="optimize the states described by a JSON config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench-overlap", help="estimator variances on exact oscillator states")
    b.add_argument("--states", type=int, nargs="+", default=[2, 3, 4, 6])
    b.add_argument("--n-batch", type=int, default=3072)
    b.add_argument("--batches", type=int, default=200)
    b.add_argument("--repetitions", type=int, default=5)
    b.set_defaults(func=cmd_bench_overlap)

    g = sub.add_parser("bridge-bench", help="bridge-sampling ratio errors on Gaussian fixtures")
    g.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 20000])
    g.add_argument("--iters", type=int, default=est.BRIDGE_ITERS)
    g.set_defaults(func=cmd_bridge_bench)

    a = sub.add_parser("align", help="build structure graphs and propagate aligned orbitals")
    a.add_argument("structures")
    a.add_argument("selectors", nargs="?")
    a.add_argument("--bandwidth", type=float, default=pt.DEFAULT_BANDWIDTH)
    a.add_argument("--kabsch", action="store_true")
    a.set_defaults(func=cmd_align)

    c = sub.add_parser("selfcheck", help="fast invariant battery")
    c.add_argument("--inject-pfaffian-bug", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
