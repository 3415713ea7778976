"""Pretraining targets across structures and the closed-form fit of the
Pfaffian ansatz to them.

Structures of one (charges, spin counts) group are joined by a minimum
spanning tree over pairwise RMSD. Orbitals computed at the root are pushed
down the tree by symmetric orthogonalization and then aligned to the parent
block by block, with blocks taken from clusters of orbital energies.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import networkx as nx
import numpy as np

from . import sampler as smp
from .ansatz import ExcitedPfaffianModel
from .numerics import (
    SingularProjectionError,
    procrustes_from_cross,
    skew_from_upper,
    svd,
    sym_eig,
    inv_sqrt_spd,
    symmetric_orthogonalize,
)

log = logging.getLogger(__name__)

KDE_GRID = 512
DEFAULT_BANDWIDTH = 0.5
DEFAULT_BASIS_EXPONENTS = (0.5, 2.0)


class OrthogonalityError(ValueError):
    def __init__(self, message: str, pairs: list[tuple[int, int]]):
        super().__init__(message)
        self.pairs = pairs


class PropagationError(RuntimeError):
    pass


class PayloadError(ValueError):
    pass


# --------------------------------------------------------------------------- structures


@dataclass
class Structure:
    id: int | str
    nuclei: np.ndarray
    charges: np.ndarray
    C: np.ndarray
    S_basis: np.ndarray
    eps: np.ndarray
    n_up: int = 0
    n_down: int = 0
    basis_atoms: np.ndarray | None = None
    basis_exponents: np.ndarray | None = None
    parent_id: int | str | None = None
    rotation: np.ndarray | None = None

    @property
    def group_key(self) -> tuple:
        return (tuple(np.round(self.charges, 12).tolist()), self.n_up, self.n_down)

    @property
    def n_basis(self) -> int:
        return self.S_basis.shape[0]

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "nuclei": self.nuclei.tolist(),
            "charges": self.charges.tolist(),
            "n_up": self.n_up,
            "n_down": self.n_down,
            "C": self.C.reshape(-1).tolist(),
            "S_basis": self.S_basis.reshape(-1).tolist(),
            "eps": self.eps.tolist(),
        }
        if self.basis_atoms is not None:
            d["basis_atoms"] = [int(a) for a in self.basis_atoms]
            d["basis_exponents"] = self.basis_exponents.tolist()
        if self.parent_id is not None or self.rotation is not None:
            d["parent_id"] = self.parent_id
            d["rotation"] = None if self.rotation is None else self.rotation.reshape(-1).tolist()
        return d


_NUM = {"type": "number"}
STRUCTURE_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["id", "nuclei", "charges", "C", "S_basis", "eps"],
        "properties": {
            "id": {"type": ["integer", "string"]},
            "nuclei": {"type": "array", "minItems": 1,
                       "items": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}},
            "charges": {"type": "array", "items": _NUM, "minItems": 1},
            "n_up": {"type": "integer", "minimum": 0},
            "n_down": {"type": "integer", "minimum": 0},
            "C": {"type": "array", "items": _NUM, "minItems": 1},
            "S_basis": {"type": "array", "items": _NUM, "minItems": 1},
            "eps": {"type": "array", "items": _NUM, "minItems": 1},
            "basis_atoms": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "basis_exponents": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        },
    },
}

SELECTOR_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["state", "occupied"],
        "properties": {
            "state": {"type": "integer", "minimum": 0},
            "occupied": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        },
    },
}


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path)


def validate_payload(data, schema) -> None:
    """Raise :class:`PayloadError` listing every violation with its JSON pointer."""
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise PayloadError("; ".join(f"{_pointer(e.absolute_path)}: {e.message}" for e in errors))


def _square(flat, n: int, where: str) -> np.ndarray:
    a = np.asarray(flat, dtype=float)
    if a.size != n * n:
        raise PayloadError(f"{where}: expected {n * n} numbers for a {n}x{n} matrix, got {a.size}")
    return a.reshape(n, n)


def structures_from_json(data) -> list[Structure]:
    validate_payload(data, STRUCTURE_SCHEMA)
    out = []
    for i, d in enumerate(data):
        n = len(d["eps"])
        nuclei = np.asarray(d["nuclei"], dtype=float)
        charges = np.asarray(d["charges"], dtype=float)
        if len(charges) != len(nuclei):
            raise PayloadError(f"/{i}/charges: {len(charges)} charges for {len(nuclei)} nuclei")
        atoms = d.get("basis_atoms")
        exps = d.get("basis_exponents")
        if (atoms is None) != (exps is None) or (atoms is not None and (len(atoms) != n or len(exps) != n)):
            raise PayloadError(f"/{i}/basis_exponents: basis_atoms and basis_exponents need {n} entries each")
        if atoms is not None and max(atoms) >= len(nuclei):
            raise PayloadError(f"/{i}/basis_atoms: index beyond {len(nuclei)} nuclei")
        out.append(Structure(
            d["id"], nuclei, charges,
            _square(d["C"], n, f"/{i}/C"), _square(d["S_basis"], n, f"/{i}/S_basis"),
            np.asarray(d["eps"], dtype=float), int(d.get("n_up", 0)), int(d.get("n_down", 0)),
            None if atoms is None else np.asarray(atoms, dtype=int),
            None if exps is None else np.asarray(exps, dtype=float),
        ))
    ids = [s.id for s in out]
    if len(set(ids)) != len(ids):
        raise PayloadError("/: structure ids must be unique")
    return out


def load_structures(path: str | Path) -> list[Structure]:
    return structures_from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- synthetic HF payloads


def gaussian_overlap(centers_a, exps_a, centers_b, exps_b) -> np.ndarray:
    """Overlaps of normalized s-type Gaussians ``(2a/pi)^{3/4} exp(-a |r - A|^2)``."""
    ca, cb = np.asarray(centers_a, dtype=float), np.asarray(centers_b, dtype=float)
    a, b = np.asarray(exps_a, dtype=float)[:, None], np.asarray(exps_b, dtype=float)[None, :]
    d2 = np.sum((ca[:, None, :] - cb[None, :, :]) ** 2, axis=-1)
    return (2.0 * np.sqrt(a * b) / (a + b)) ** 1.5 * np.exp(-a * b / (a + b) * d2)


def basis_centers(st: Structure) -> np.ndarray:
    return st.nuclei[st.basis_atoms]


def cross_overlap(child: Structure, parent: Structure) -> np.ndarray:
    """``<chi^child_mu | chi^parent_nu>``; falls back to the child's own overlap without basis data."""
    if child.basis_atoms is None or parent.basis_atoms is None:
        return child.S_basis
    return gaussian_overlap(basis_centers(child), child.basis_exponents,
                            basis_centers(parent), parent.basis_exponents)


def synth_hf(spec: dict, seed: int = 0) -> Structure:
    """Synthetic orbitals in an s-Gaussian basis.

    A model Hamiltonian ``H = -sqrt(a_mu a_nu) Z S_mu_nu`` plus a small
    seeded symmetric perturbation is diagonalized in the Loewdin basis, so
    ``C^T S C = I`` and compact functions give the deepest energies.
    """
    nuclei = np.atleast_2d(np.asarray(spec["nuclei"], dtype=float))
    charges = np.asarray(spec["charges"], dtype=float)
    exps = tuple(spec.get("exponents", DEFAULT_BASIS_EXPONENTS))
    atoms = np.repeat(np.arange(len(nuclei)), len(exps))
    alphas = np.tile(np.asarray(exps, dtype=float), len(nuclei))
    s = gaussian_overlap(nuclei[atoms], alphas, nuclei[atoms], alphas)
    rng = np.random.default_rng(seed)
    z = np.sqrt(charges[atoms][:, None] * charges[atoms][None, :])
    h = -np.sqrt(alphas[:, None] * alphas[None, :]) * z * s
    noise = spec.get("noise", 1e-3) * rng.normal(size=h.shape)
    h = h + 0.5 * (noise + noise.T)
    x = inv_sqrt_spd(s)
    eps, w = sym_eig(x @ h @ x)
    c = x @ w
    # fix the arbitrary eigenvector signs
    pivot = np.argmax(np.abs(c), axis=0)
    c = c * np.sign(c[pivot, np.arange(c.shape[1])])
    return Structure(spec.get("id", 0), nuclei, charges, c, s, eps, int(spec.get("n_up", 0)),
                     int(spec.get("n_down", 0)), atoms, alphas)


# --------------------------------------------------------------------------- graph


def _kabsch_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation applied to centred ``b`` that best matches centred ``a``."""
    u, _, v = svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ v.T)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ v.T


def rmsd(a: Structure, b: Structure, kabsch: bool = False) -> float:
    """Root-mean-square nuclear displacement, optionally after optimal superposition."""
    if a.nuclei.shape != b.nuclei.shape or not np.array_equal(a.charges, b.charges):
        raise ValueError(f"structures {a.id} and {b.id} have different atom lists")
    pa, pb = a.nuclei, b.nuclei
    if kabsch and len(pa) > 1:
        pa = pa - pa.mean(axis=0)
        pb = pb - pb.mean(axis=0)
        pb = pb @ _kabsch_rotation(pa, pb)
    return float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1))))


@dataclass
class StructureGraph:
    nodes: list
    edges: list  # (u, v, rmsd) of the spanning tree
    root: int | str
    order: list
    parent: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"nodes": self.nodes, "edges": [[u, v, w] for u, v, w in self.edges],
                "root": self.root, "order": self.order,
                "parent": [[k, v] for k, v in self.parent.items()]}


def _id_key(i):
    return (isinstance(i, str), i)


def group_structures(structures: list[Structure]) -> dict:
    groups: dict = {}
    for st in structures:
        groups.setdefault(st.group_key, []).append(st)
    return groups


def build_graph(structures: list[Structure], kabsch: bool = False, distances=None) -> StructureGraph:
    """Kruskal MST on RMSD, rooted at the minimum-eccentricity node (edge counts, lowest id on ties).

    ``distances`` may supply a precomputed ``{(id_a, id_b): d}`` mapping.
    """
    if not structures:
        raise ValueError("need at least one structure")
    if len({st.group_key for st in structures}) > 1:
        raise ValueError("structures span several (charges, n_up, n_down) groups; build one graph per group")
    g = nx.Graph()
    ids = [st.id for st in structures]
    g.add_nodes_from(ids)
    for i, a in enumerate(structures):
        for b in structures[i + 1:]:
            if distances is not None:
                d = distances.get((a.id, b.id), distances.get((b.id, a.id)))
            else:
                d = rmsd(a, b, kabsch)
            g.add_edge(a.id, b.id, weight=d)
    tree = nx.minimum_spanning_tree(g, algorithm="kruskal")
    ecc = nx.eccentricity(tree)
    root = min(ids, key=lambda i: (ecc[i], _id_key(i)))
    order = [root]
    parent = {}
    for u, v in nx.bfs_edges(tree, root, sort_neighbors=lambda ns: sorted(ns, key=_id_key)):
        order.append(v)
        parent[v] = u
    edges = sorted(((min(u, v, key=_id_key), max(u, v, key=_id_key), float(d["weight"]))
                    for u, v, d in tree.edges(data=True)), key=lambda e: (_id_key(e[0]), _id_key(e[1])))
    return StructureGraph(ids, edges, root, order, parent)


# --------------------------------------------------------------------------- orbital groups and alignment


def cluster_orbital_energies(eps, bandwidth: float = DEFAULT_BANDWIDTH, grid: int = KDE_GRID) -> np.ndarray:
    """Group labels from local maxima of a Gaussian KDE of the orbital energies.

    Labels increase with energy and every group is a contiguous range of
    sorted energies. The density is handled in log space so tiny bandwidths
    still resolve one peak per orbital.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    eps = np.asarray(eps, dtype=float).reshape(-1)
    xs = np.linspace(eps.min() - 3 * bandwidth, eps.max() + 3 * bandwidth, grid)
    z = -((xs[:, None] - eps[None, :]) ** 2) / (2 * bandwidth**2)
    zmax = z.max(axis=1)
    logd = zmax + np.log(np.sum(np.exp(z - zmax[:, None]), axis=1))
    left = np.concatenate([[-np.inf], logd[:-1]])
    right = np.concatenate([logd[1:], [-np.inf]])
    peaks = xs[(logd > left) & (logd >= right)]
    if peaks.size == 0:
        peaks = xs[[int(np.argmax(logd))]]
    labels = np.argmin(np.abs(eps[:, None] - peaks[None, :]), axis=1)
    _, labels = np.unique(labels, return_inverse=True)
    return labels.reshape(-1)


def group_indices(labels) -> list[np.ndarray]:
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == g) for g in np.unique(labels)]


@dataclass
class AlignResult:
    C: np.ndarray
    rotation: np.ndarray
    degenerate_groups: list


def blockwise_align(c_child, c_parent, s_cross, groups) -> AlignResult:
    """Procrustes per orbital group on ``M = C_child^T S_cross C_parent``.

    The returned rotation is block diagonal in the group structure.
    """
    c_child = np.asarray(c_child, dtype=float)
    m = c_child.T @ np.asarray(s_cross, dtype=float) @ np.asarray(c_parent, dtype=float)
    idx = group_indices(groups)
    rot = np.zeros_like(m)
    degenerate = []
    for gi, g in enumerate(idx):
        res = procrustes_from_cross(m[np.ix_(g, g)])
        if res.degenerate:
            log.warning("degenerate overlap block for orbital group %d", gi)
            degenerate.append(gi)
        rot[np.ix_(g, g)] = res.rotation
    return AlignResult(c_child @ rot, rot, degenerate)


def propagate_orbitals(graph: StructureGraph, structures: list[Structure],
                       bandwidth: float = DEFAULT_BANDWIDTH) -> list[Structure]:
    """Push the root's orbitals along the tree; returns aligned copies in graph order."""
    by_id = {st.id: st for st in structures}
    root = by_id[graph.root]
    labels = cluster_orbital_energies(root.eps, bandwidth)
    done = {root.id: Structure(**{**root.__dict__, "parent_id": None,
                                  "rotation": np.eye(root.n_basis)})}
    for node in graph.order[1:]:
        p = graph.parent[node]
        child, parent = by_id[node], done[p]
        if child.n_basis != parent.n_basis:
            raise PropagationError(f"edge {p}->{node}: basis sizes differ ({parent.n_basis} vs {child.n_basis})")
        try:
            c_proj = symmetric_orthogonalize(parent.C, child.S_basis)
        except SingularProjectionError as err:
            raise PropagationError(f"edge {p}->{node}: singular projection ({err})") from err
        res = blockwise_align(c_proj, parent.C, cross_overlap(child, parent), labels)
        done[node] = Structure(**{**child.__dict__, "C": res.C, "parent_id": p, "rotation": res.rotation})
    return [done[i] for i in graph.order]


def orthonormality_error(st: Structure) -> float:
    return float(np.max(np.abs(st.C.T @ st.S_basis @ st.C - np.eye(st.C.shape[1]))))


# --------------------------------------------------------------------------- selectors


def selector_matrix(n_orb: int, occupied) -> np.ndarray:
    occ = list(occupied)
    p = np.zeros((n_orb, len(occ)), dtype=int)
    p[occ, np.arange(len(occ))] = 1
    return p


def selector_det(p_s: np.ndarray, p_t: np.ndarray) -> int:
    """Exact ``det(P_s^T P_t)`` for zero-one selectors: 0 or the sign of a permutation."""
    m = np.asarray(p_s).T @ np.asarray(p_t)
    n = m.shape[0]
    if not (np.all(m.sum(axis=0) == 1) and np.all(m.sum(axis=1) == 1)):
        return 0
    perm = [int(np.flatnonzero(m[:, j])[0]) for j in range(n)]
    sign, seen = 1, [False] * n
    for i in range(n):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def validate_selectors(selectors: list[np.ndarray]) -> list[tuple[int, int]]:
    """Pairs violating ``det(P_s^T P_t) = delta_st``."""
    bad = []
    for s in range(len(selectors)):
        for t in range(s, len(selectors)):
            want = 1 if s == t else 0
            if selector_det(selectors[s], selectors[t]) != want:
                bad.append((s, t))
    return bad


def selector_set(n_orb: int, n_elec: int, excitations) -> list[np.ndarray]:
    """Ground selector on the lowest ``n_elec`` orbitals plus one selector per excitation list.

    Each excitation ``(i, a)`` replaces occupied orbital ``i`` by ``a`` in place.
    """
    if n_elec > n_orb:
        raise ValueError("more electrons than orbitals")
    out = [selector_matrix(n_orb, range(n_elec))]
    for exc in excitations:
        occ = list(range(n_elec))
        for i, a in exc:
            if i not in occ or a in occ or not 0 <= a < n_orb:
                raise ValueError(f"invalid excitation {i}->{a} for occupation {occ}")
            occ[occ.index(i)] = a
        out.append(selector_matrix(n_orb, occ))
    bad = validate_selectors(out)
    if bad:
        raise OrthogonalityError(f"selector pairs not orthogonal: {bad}", bad)
    return out


def selectors_from_json(data, n_orb: int) -> list[np.ndarray]:
    validate_payload(data, SELECTOR_SCHEMA)
    rows = sorted(data, key=lambda d: d["state"])
    for i, d in enumerate(rows):
        if max(d["occupied"]) >= n_orb:
            raise PayloadError(f"/{i}/occupied: orbital index beyond {n_orb}")
    return [selector_matrix(n_orb, d["occupied"]) for d in rows]


# --------------------------------------------------------------------------- Pfaffian fit


def basis_values(st: Structure, x: np.ndarray) -> np.ndarray:
    """Normalized s-Gaussians at every particle: ``(B, N, n_basis)``."""
    if st.basis_atoms is None:
        raise ValueError(f"structure {st.id} carries no basis description")
    centers = basis_centers(st)
    d2 = np.sum((x[:, :, None, :] - centers[None, None]) ** 2, axis=-1)
    a = st.basis_exponents
    return (2 * a / math.pi) ** 0.75 * np.exp(-a * d2)


def hf_spin_orbitals(st: Structure, x: np.ndarray, n_up: int) -> np.ndarray:
    """Spin orbitals ``[phi_0 up, phi_0 down, phi_1 up, ...]`` at each particle: ``(B, N, 2 n_basis)``."""
    x = np.asarray(x, dtype=float)
    mo = basis_values(st, x) @ st.C
    b, n, k = mo.shape
    out = np.zeros((b, n, 2 * k))
    out[:, :n_up, 0::2] = mo[:, :n_up]
    out[:, n_up:, 1::2] = mo[:, n_up:]
    return out


def target_log_det(st: Structure, selector: np.ndarray, x: np.ndarray, n_up: int):
    """Sign and ``log|det|`` of the selected target determinant."""
    phi = hf_spin_orbitals(st, x, n_up) @ selector
    return np.linalg.slogdet(phi)


@dataclass
class PretrainTargets:
    structure: Structure
    selectors: list


@dataclass
class PretrainStep:
    loss_mo: float
    loss_a: float
    grad: np.ndarray
    a_tilde: list  # per (state, det) target skew block
    degenerate: int


def _polar_grad(m: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Pull ``dL/dR`` back to ``dL/dM`` for ``R = U V^T`` the polar factor of ``M``."""
    u, s, v = svd(m)
    k = u.T @ g_r @ v
    denom = s[:, None] + s[None, :]
    y = np.where(denom > 1e-14, (k - k.T) / np.where(denom > 1e-14, denom, 1.0), 0.0)
    return u @ y @ v.T


def pretrain_loss(model: ExcitedPfaffianModel, params, targets: PretrainTargets, x,
                  a_tilde: list | None = None) -> PretrainStep:
    """Orbital and antisymmetrizer losses with gradients.

    ``R*`` solves the orbital Procrustes problem for each determinant.
    The antisymmetrizer targets ``A~*`` come from a Procrustes fit of the
    rotated selected blocks, unless ``a_tilde`` fixes them; they are held
    constant in the gradient, while ``R*`` is differentiated through.
    """
    x = np.asarray(x, dtype=float)
    phi, h, d_orb, env, groups = model.orbitals(params, x)
    n_up = model.n_up
    target = hf_spin_orbitals(targets.structure, x, n_up)
    if target.shape[-1] != model.n_orb:
        raise ValueError(f"target has {target.shape[-1]} spin orbitals, model has {model.n_orb}")
    b = x.shape[0]
    g_phi = np.zeros_like(phi)
    g_anti = np.zeros(model.layout.shapes["antisym"])
    loss_mo = loss_a = 0.0
    chosen, degenerate = [], 0
    iu = np.triu_indices(model.n_orb, 1)
    for k in range(model.n_det):
        pk = phi[:, k]
        m = np.einsum("bno,bnp->op", pk, target)
        res = procrustes_from_cross(m)
        r = res.rotation
        diff = pk @ r - target
        loss_mo += float(np.sum(diff**2)) / b
        g_phi[:, k] += 2.0 / b * diff @ r.T
        g_r = np.zeros_like(r)
        for s, sel in enumerate(targets.selectors):
            a = skew_from_upper(groups["antisym"][s, k], model.n_orb)
            if a_tilde is None:
                ares = procrustes_from_cross(sel.T @ r.T @ a @ r @ sel)
                at = ares.rotation
                degenerate += int(ares.degenerate)
            else:
                at = a_tilde[s * model.n_det + k]
            chosen.append(at)
            bmat = sel @ at @ sel.T
            d = r @ bmat @ r.T - a
            loss_a += float(np.sum(d**2))
            ga = -2.0 * d
            g_anti[s, k] = ga[iu] - ga.T[iu]
            g_r += 2.0 * (d @ r @ bmat.T + d.T @ r @ bmat)
        g_m = _polar_grad(m, g_r)
        g_phi[:, k] += target @ g_m.T
    grad = np.zeros(model.layout.size)
    grad[:model.layout.slices["envelope"].stop] = model.orbital_vjp(g_phi, h, d_orb, env, phi).sum(axis=0)
    grad[model.layout.slices["antisym"]] = g_anti.reshape(-1)
    return PretrainStep(loss_mo, loss_a, grad, chosen, degenerate)


@dataclass
class PretrainConfig:
    steps: int = 1000
    n_walkers: int = 256
    lr: float = 0.2
    momentum: float = 0.9
    grad_clip: float = 1.0
    decorr_steps: int = 5


def pretrain_fit(model: ExcitedPfaffianModel, params, targets: PretrainTargets, cfg: PretrainConfig,
                 seed: int = 0):
    """Fit orbitals and antisymmetrizers to the targets on samples of the current model.

    Returns the updated parameters and the per-step loss history.
    """
    if len(targets.selectors) != model.n_states:
        raise ValueError(f"{len(targets.selectors)} selectors for {model.n_states} states")
    params = np.array(params, dtype=float)
    counts = smp.split_walkers(cfg.n_walkers, model.n_states)
    chains = [smp.init_chain(model, params, s, counts[s], seed + 7919) for s in range(model.n_states)]
    vel = np.zeros_like(params)
    history = []
    for _ in range(cfg.steps):
        smp.advance_all(chains, model, params, cfg.decorr_steps)
        x = np.concatenate([c.walkers for c in chains])
        step = pretrain_loss(model, params, targets, x)
        g = step.grad
        norm = float(np.linalg.norm(g))
        if norm > cfg.grad_clip:
            g = g * (cfg.grad_clip / norm)
        vel = cfg.momentum * vel + g
        params = params - cfg.lr * vel
        for c in chains:
            smp.sync(c, model, params)
        history.append((step.loss_mo, step.loss_a, step.degenerate))
    return params, history
