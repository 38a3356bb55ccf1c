"""Synthetic, exactly equivariant Hamiltonian datasets.

The oracle builds every block from spherical harmonics of bond directions
and smooth radial functions of bond lengths, then recombines the
direct-sum components with CG coefficients.  Because every ingredient
transforms covariantly, the targets obey ``H(R) = D^lp H D^lq.T`` to
machine precision.

Off-site (i != j), for each l in the CG range of the shell pair::

    h^l = phi_l(d_ij) * Y^l(r_ij) * (1 + 0.5 tanh(rho_i + rho_j - 2))

with ``phi(d) = a sin(b d) exp(-d/2) + c / (1 + d^2)`` and
``rho_i = sum_k exp(-d_ik^2 / 2)`` a coordination number.  On-site::

    S^l = sum_j phi_l(d_ij) Y^l(r_ij)
    h^l = S^l (1 + 0.5 tanh(|S^l|^2 - 1)) + const * [l == 0]

Finally the full matrix is symmetrized, ``H_ij <- (H_ij + H_ji.T) / 2``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, LoadError, ParameterError, UsageError
from .so3 import L_MAX, cg_block, random_rotation, sph_harm_batch
from .structures import (
    DEFAULT_BASIS,
    AtomicSystem,
    Graph,
    OrbitalBasisSpec,
    PairBlockSet,
    build_graph,
)

FORMAT_NAME = "tracegrad-dataset"
FORMAT_VERSION = 1

DEFAULT_CUTOFF = 2.6
LATTICE_SPACING = 1.6
JITTER = 0.3
MIN_DISTANCE = 0.8
MAX_RETRIES = 200

SPLITS = ("train", "val", "test")
OOD_SIZES = {"train": (4, 8), "val": (9, 10), "test": (11, 14)}


@dataclass(frozen=True)
class OracleParams:
    """Radial coefficient triples keyed ``(s_i, s_j, p, q, l)``.

    ``pair`` drives off-site blocks, ``onsite`` the neighbor sums of
    on-site blocks (s_i = center, s_j = neighbor species, p/q shells of
    the center) and ``const`` the environment-free l = 0 on-site part.
    """

    pair: dict
    onsite: dict
    const: dict
    seed: int = 0
    energy_scale: float = 1.0


def _cg_range(lp, lq):
    return range(abs(lp - lq), lp + lq + 1)


def make_oracle_params(basis: OrbitalBasisSpec = DEFAULT_BASIS, seed: int = 0) -> OracleParams:
    rng = np.random.default_rng([seed, 0x7AC3])
    pair, onsite, const = {}, {}, {}

    def triple():
        a = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        return (float(a), float(rng.uniform(1.0, 3.0)), float(rng.uniform(-1.0, 1.0)))

    sp = basis.species
    for si in sp:
        for sj in sp:
            for p, lp in enumerate(basis.degrees(si)):
                for q, lq in enumerate(basis.degrees(sj)):
                    for l in _cg_range(lp, lq):
                        pair[(si, sj, p, q, l)] = triple()
            for p, lp in enumerate(basis.degrees(si)):
                for q, lq in enumerate(basis.degrees(si)):
                    for l in _cg_range(lp, lq):
                        onsite[(si, sj, p, q, l)] = triple()
    for s in sp:
        ls = basis.degrees(s)
        for p in range(len(ls)):
            for q in range(p, len(ls)):
                if ls[p] == ls[q]:
                    const[(s, p, q)] = const[(s, q, p)] = float(rng.uniform(-1.0, 1.0))
    return OracleParams(pair, onsite, const, seed)


def radial(d, abc):
    a, b, c = abc
    d = np.asarray(d, dtype=np.float64)
    return a * np.sin(b * d) * np.exp(-d / 2.0) + c / (1.0 + d * d)


def _recompose(h: dict, lp: int, lq: int) -> np.ndarray:
    out = np.zeros((2 * lp + 1, 2 * lq + 1))
    for l, v in h.items():
        out += np.einsum("kab,k->ab", cg_block(lp, lq, l), v)
    return out


def _raw_blocks(system: AtomicSystem, graph: Graph, basis: OrbitalBasisSpec, params: OracleParams):
    """Unsymmetrized blocks ``{(i, j): full n_i x n_j matrix}``."""
    spc = system.species
    lmax_y = 2 * basis.max_degree
    ys = {l: sph_harm_batch(l, graph.unit) for l in range(lmax_y + 1)}
    off = ~graph.is_self
    rho = np.zeros(system.n_atoms)
    np.add.at(rho, graph.src[off], np.exp(-graph.dist[off] ** 2 / 2.0))

    raw = {}
    for e in np.flatnonzero(off):
        i, j = int(graph.src[e]), int(graph.dst[e])
        si, sj = int(spc[i]), int(spc[j])
        mod = 1.0 + 0.5 * math.tanh(rho[i] + rho[j] - 2.0)
        di, dj = basis.degrees(si), basis.degrees(sj)
        oi, oj = basis.offsets(si), basis.offsets(sj)
        full = np.zeros((basis.num_orbitals(si), basis.num_orbitals(sj)))
        for p, lp in enumerate(di):
            for q, lq in enumerate(dj):
                h = {
                    l: radial(graph.dist[e], params.pair[(si, sj, p, q, l)]) * ys[l][e] * mod
                    for l in _cg_range(lp, lq)
                }
                full[oi[p] : oi[p] + 2 * lp + 1, oj[q] : oj[q] + 2 * lq + 1] = _recompose(h, lp, lq)
        raw[(i, j)] = full

    for i in range(system.n_atoms):
        si = int(spc[i])
        nb = np.flatnonzero(off & (graph.src == i))
        ls, offs = basis.degrees(si), basis.offsets(si)
        full = np.zeros((basis.num_orbitals(si),) * 2)
        for p, lp in enumerate(ls):
            for q, lq in enumerate(ls):
                h = {}
                for l in _cg_range(lp, lq):
                    s = np.zeros(2 * l + 1)
                    for e in nb:
                        sj = int(spc[graph.dst[e]])
                        s += radial(graph.dist[e], params.onsite[(si, sj, p, q, l)]) * ys[l][e]
                    s = s * (1.0 + 0.5 * math.tanh(float(s @ s) - 1.0))
                    if l == 0 and (si, p, q) in params.const:
                        s = s + params.const[(si, p, q)]
                    h[l] = s
                full[offs[p] : offs[p] + 2 * lp + 1, offs[q] : offs[q] + 2 * lq + 1] = _recompose(h, lp, lq)
        raw[(i, i)] = full
    return raw


def _split_full(full, di, dj):
    oi = np.concatenate([[0], np.cumsum([2 * l + 1 for l in di])])
    oj = np.concatenate([[0], np.cumsum([2 * l + 1 for l in dj])])
    return {
        (p, q): full[oi[p] : oi[p + 1], oj[q] : oj[q + 1]].copy()
        for p in range(len(di))
        for q in range(len(dj))
    }


def oracle_blocks(
    system: AtomicSystem, basis: OrbitalBasisSpec = DEFAULT_BASIS, params: OracleParams | None = None
) -> PairBlockSet:
    """Target blocks for every ordered pair within the cutoff (including i = j)."""
    params = params or make_oracle_params(basis)
    graph = build_graph(system)
    raw = _raw_blocks(system, graph, basis, params)
    out = {}
    for (i, j), m in raw.items():
        sym = 0.5 * (m + raw[(j, i)].T) * params.energy_scale
        di, dj = basis.degrees(system.species[i]), basis.degrees(system.species[j])
        out[(i, j)] = _split_full(sym, di, dj)
    return PairBlockSet(out)


def oracle_block(
    i: int,
    j: int,
    system: AtomicSystem,
    basis: OrbitalBasisSpec = DEFAULT_BASIS,
    params: OracleParams | None = None,
) -> dict:
    """Blocks ``{(p, q): matrix}`` of the (i, j) pair."""
    if i != j and np.linalg.norm(system.positions[j] - system.positions[i]) > system.cutoff:
        raise UsageError(f"pair ({i}, {j}) lies beyond the cutoff")
    return oracle_blocks(system, basis, params).blocks[(i, j)]


# ---------------------------------------------------------------------------
# Records and generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    system: AtomicSystem
    blocks: PairBlockSet
    traces: dict
    split: str = "train"

    def validate(self, tol: float = 1e-12):
        recomputed = self.blocks.traces()
        if set(recomputed) != set(self.traces):
            raise ParameterError("trace keys do not match block keys")
        for k, v in recomputed.items():
            if v != self.traces[k]:
                raise ParameterError(f"trace {k} = {self.traces[k]!r} but block gives {v!r}")
        err = self.blocks.hermiticity_error()
        if err > tol:
            raise ParameterError(f"blocks violate Hermiticity by {err:.3e}")
        for key, m in self.blocks.items():
            if not np.all(np.isfinite(m)):
                raise ParameterError(f"block {key} has non-finite entries")


def make_record(system, basis=DEFAULT_BASIS, params=None, split="train") -> DatasetRecord:
    blocks = oracle_blocks(system, basis, params)
    return DatasetRecord(system, blocks, blocks.traces(), split)


def _grow_cluster(n: int, rng: np.random.Generator) -> np.ndarray:
    steps = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    sites = [(0, 0, 0)]
    occupied = {sites[0]}
    while len(sites) < n:
        base = np.array(sites[rng.integers(len(sites))])
        cand = tuple(int(x) for x in base + steps[rng.integers(6)])
        if cand not in occupied:
            occupied.add(cand)
            sites.append(cand)
    return np.array(sites, dtype=np.float64)


def random_system(
    n_atoms: int,
    rng: np.random.Generator,
    species_count: int = 2,
    cutoff: float = DEFAULT_CUTOFF,
    spacing: float = LATTICE_SPACING,
    jitter: float = JITTER,
) -> AtomicSystem:
    """Jittered cubic-lattice cluster, randomly oriented, min distance >= 0.8 A."""
    if n_atoms < 2:
        raise ParameterError(f"systems need at least 2 atoms, got {n_atoms}")
    for _ in range(MAX_RETRIES):
        pos = _grow_cluster(n_atoms, rng) * spacing
        pos = pos + rng.uniform(-jitter, jitter, pos.shape)
        pos = (pos - pos.mean(axis=0)) @ random_rotation(rng).matrix.T
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() >= MIN_DISTANCE:
            species = rng.integers(species_count, size=n_atoms)
            return AtomicSystem(pos, species, cutoff)
    raise GenerationError(f"could not place {n_atoms} atoms after {MAX_RETRIES} attempts")


def generate_dataset(
    count: int,
    size_range=(4, 14),
    species_count: int = 2,
    seed: int = 7,
    *,
    split: str = "train",
    basis: OrbitalBasisSpec = DEFAULT_BASIS,
    cutoff: float = DEFAULT_CUTOFF,
    oracle: OracleParams | None = None,
) -> list:
    lo, hi = (int(x) for x in size_range)
    if lo < 2 or hi < lo:
        raise ParameterError(f"invalid size range {size_range}; need 2 <= min <= max")
    if species_count < 1 or any(s not in basis.shells for s in range(species_count)):
        raise ParameterError(f"basis {basis.species} does not cover {species_count} species")
    oracle = oracle or make_oracle_params(basis)
    split_code = SPLITS.index(split) if split in SPLITS else 99
    out = []
    for k in range(count):
        rng = np.random.default_rng([seed, split_code, k])
        n = int(rng.integers(lo, hi + 1))
        system = random_system(n, rng, species_count, cutoff)
        out.append(make_record(system, basis, oracle, split))
    return out


def generate_splits(
    counts=(512, 64, 64),
    size_range=(4, 14),
    seed: int = 7,
    ood: bool = False,
    ood_sizes: dict | None = None,
    **kw,
) -> dict:
    """Train/val/test record lists; in ``ood`` mode the size ranges are disjoint."""
    ranges = dict(ood_sizes or OOD_SIZES) if ood else {s: size_range for s in SPLITS}
    if ood:
        spans = sorted(ranges.values())
        for a, b in zip(spans, spans[1:]):
            if a[1] >= b[0]:
                raise ParameterError(f"ood size ranges overlap: {ranges}")
    return {
        s: generate_dataset(c, ranges[s], seed=seed, split=s, **kw) for s, c in zip(SPLITS, counts)
    }


# ---------------------------------------------------------------------------
# Serialization (JSON lines)
# ---------------------------------------------------------------------------


def _key(k) -> str:
    return ",".join(str(int(x)) for x in k)


def _unkey(s: str) -> tuple:
    return tuple(int(x) for x in s.split(","))


def record_to_json(rec: DatasetRecord) -> dict:
    return {
        "split": rec.split,
        "positions": rec.system.positions.tolist(),
        "species": rec.system.species.tolist(),
        "cutoff": rec.system.cutoff,
        "blocks": {_key(k): m.tolist() for k, m in rec.blocks.items()},
        "traces": {_key(k): float(v) for k, v in rec.traces.items()},
    }


def record_from_json(d: dict) -> DatasetRecord:
    system = AtomicSystem(np.array(d["positions"], dtype=np.float64), np.array(d["species"]), d["cutoff"])
    blocks: dict = {}
    for k, m in d["blocks"].items():
        i, j, p, q = _unkey(k)
        arr = np.array(m, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"block {k} is not a matrix")
        blocks.setdefault((i, j), {})[(p, q)] = arr
    traces = {_unkey(k): float(v) for k, v in d["traces"].items()}
    return DatasetRecord(system, PairBlockSet(blocks), traces, d.get("split", "train"))


def dumps(records, basis: OrbitalBasisSpec = DEFAULT_BASIS, oracle_seed: int = 0) -> str:
    lines = [json.dumps(record_to_json(r), separators=(",", ":"), allow_nan=False) for r in records]
    body = "".join(line + "\n" for line in lines)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "l_max": L_MAX,
        "basis": basis.to_json(),
        "oracle_seed": oracle_seed,
        "count": len(lines),
        "checksum": "sha256:" + hashlib.sha256(body.encode()).hexdigest(),
    }
    return json.dumps(header, separators=(",", ":")) + "\n" + body


def save_dataset(path, records, basis: OrbitalBasisSpec = DEFAULT_BASIS, oracle_seed: int = 0):
    text = dumps(records, basis, oracle_seed)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class Dataset:
    records: list
    basis: OrbitalBasisSpec
    header: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


def loads(text: str, validate: bool = True) -> Dataset:
    buf = io.StringIO(text)
    first = buf.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise LoadError(f"unreadable header: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise LoadError(f"not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise LoadError(f"unsupported version {header.get('version')} (expected {FORMAT_VERSION})")
    body = buf.read()
    digest = "sha256:" + hashlib.sha256(body.encode()).hexdigest()
    lines = body.splitlines()
    if len(lines) != header.get("count"):
        raise LoadError(f"expected {header.get('count')} records, found {len(lines)} (truncated?)")
    if digest != header.get("checksum"):
        raise LoadError("checksum mismatch (file truncated or modified)")
    basis = OrbitalBasisSpec.from_json(header["basis"])
    records = []
    for k, line in enumerate(lines):
        try:
            rec = record_from_json(json.loads(line))
            if validate:
                rec.validate()
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"record {k}: {exc}", record_index=k) from exc
        records.append(rec)
    return Dataset(records, basis, header)


def load_dataset(path, validate: bool = True) -> Dataset:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return loads(text, validate)


def file_checksum(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
