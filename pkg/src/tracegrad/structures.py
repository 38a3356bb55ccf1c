"""Atomic systems, orbital bases, neighbor graphs and per-pair block sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError
from .so3 import L_MAX, HamiltonianBlock, trace_label, wigner_d


@dataclass(frozen=True)
class OrbitalBasisSpec:
    """Per-species ordered list of orbital degrees, e.g. ``{0: (0, 1), 1: (0, 0, 1)}``."""

    shells: dict

    def __post_init__(self):
        shells = {int(s): tuple(int(l) for l in ls) for s, ls in self.shells.items()}
        for s, ls in shells.items():
            if not ls:
                raise ParameterError(f"species {s} has no orbitals")
            if any(l < 0 or l > L_MAX for l in ls):
                raise ParameterError(f"species {s} has a degree outside [0, {L_MAX}]")
        object.__setattr__(self, "shells", shells)

    @property
    def species(self) -> tuple:
        return tuple(sorted(self.shells))

    @property
    def max_shells(self) -> int:
        return max(len(v) for v in self.shells.values())

    @property
    def max_orbitals(self) -> int:
        return max(self.num_orbitals(s) for s in self.shells)

    @property
    def max_degree(self) -> int:
        return max(max(v) for v in self.shells.values())

    def degrees(self, species: int) -> tuple:
        try:
            return self.shells[int(species)]
        except KeyError:
            raise ParameterError(f"species {species} not in basis {sorted(self.shells)}") from None

    def num_orbitals(self, species: int) -> int:
        return sum(2 * l + 1 for l in self.degrees(species))

    def offsets(self, species: int) -> list:
        """Row offset of each shell inside the per-atom orbital range."""
        out, pos = [], 0
        for l in self.degrees(species):
            out.append(pos)
            pos += 2 * l + 1
        return out

    def to_json(self) -> dict:
        return {str(s): list(v) for s, v in sorted(self.shells.items())}

    @classmethod
    def from_json(cls, d: dict) -> "OrbitalBasisSpec":
        return cls({int(k): tuple(v) for k, v in d.items()})


DEFAULT_BASIS = OrbitalBasisSpec({0: (0, 1), 1: (0, 0, 1)})


@dataclass(frozen=True)
class AtomicSystem:
    positions: np.ndarray
    species: np.ndarray
    cutoff: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        spc = np.asarray(self.species, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3 or not np.all(np.isfinite(pos)):
            raise ParameterError("positions must be a finite (N, 3) array")
        if spc.shape != (pos.shape[0],):
            raise ParameterError("species must have one entry per atom")
        if pos.shape[0] < 2:
            raise ParameterError(f"a system needs at least 2 atoms, got {pos.shape[0]}")
        if not (np.isfinite(self.cutoff) and self.cutoff > 0):
            raise ParameterError("cutoff must be positive and finite")
        pairs = cKDTree(pos).query_pairs(1e-6)
        if pairs:
            raise ParameterError(f"coincident atoms: {sorted(pairs)[0]}")
        pos.setflags(write=False)
        spc.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "species", spc)
        object.__setattr__(self, "cutoff", float(self.cutoff))

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    def rotated(self, r) -> "AtomicSystem":
        return AtomicSystem(self.positions @ r.matrix.T, self.species, self.cutoff)

    def translated(self, t) -> "AtomicSystem":
        return AtomicSystem(self.positions + np.asarray(t, dtype=np.float64), self.species, self.cutoff)

    def permuted(self, perm) -> "AtomicSystem":
        """New system whose atom k is old atom perm[k]."""
        perm = np.asarray(perm)
        return AtomicSystem(self.positions[perm], self.species[perm], self.cutoff)


@dataclass
class Graph:
    """Directed edges i -> j (d_ij <= cutoff) plus one self-edge per atom.

    Edges are sorted by (i, j).  ``vec = pos[j] - pos[i]``; ``unit`` is
    zero on self-edges.  ``reverse[e]`` is the index of edge (j, i).
    """

    src: np.ndarray
    dst: np.ndarray
    vec: np.ndarray
    dist: np.ndarray
    unit: np.ndarray
    reverse: np.ndarray
    n_atoms: int

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]

    @property
    def is_self(self) -> np.ndarray:
        return self.src == self.dst


def build_graph(system: AtomicSystem) -> Graph:
    if system.n_atoms < 2:
        raise ParameterError("a system needs at least 2 atoms")
    pos = system.positions
    n = system.n_atoms
    pairs = cKDTree(pos).query_pairs(system.cutoff, output_type="ndarray")
    src = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)]) if len(pairs) else np.arange(n)
    dst = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)]) if len(pairs) else np.arange(n)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    vec = pos[dst] - pos[src]
    dist = np.linalg.norm(vec, axis=1)
    unit = np.zeros_like(vec)
    off = dist > 0
    unit[off] = vec[off] / dist[off, None]
    key = src * n + dst
    reverse = np.searchsorted(key, dst * n + src)
    return Graph(src, dst, vec, dist, unit, reverse, n)


def brute_force_edges(system: AtomicSystem) -> set:
    """O(N^2) reference neighbor scan (includes self-pairs)."""
    pos = system.positions
    out = set()
    for i in range(system.n_atoms):
        for j in range(system.n_atoms):
            if i == j or np.linalg.norm(pos[j] - pos[i]) <= system.cutoff:
                out.add((i, j))
    return out


@dataclass
class PairBlockSet:
    """``blocks[(i, j)][(p, q)]`` is the (2l_p+1)x(2l_q+1) block between
    shell p of atom i and shell q of atom j."""

    blocks: dict = field(default_factory=dict)

    def items(self):
        for (i, j), sub in self.blocks.items():
            for (p, q), m in sub.items():
                yield (i, j, p, q), m

    def __len__(self):
        return sum(len(v) for v in self.blocks.values())

    def traces(self) -> dict:
        out = {}
        for key, m in self.items():
            out[key] = trace_label(HamiltonianBlock(*_degrees(m), m)).value
        return out

    def hermiticity_error(self) -> float:
        worst = 0.0
        for (i, j, p, q), m in self.items():
            other = self.blocks.get((j, i), {}).get((q, p))
            if other is None:
                return float("inf")
            worst = max(worst, float(np.max(np.abs(m - other.T))))
        return worst

    def rotated(self, r, system: AtomicSystem, basis: OrbitalBasisSpec) -> "PairBlockSet":
        dm = {l: wigner_d(l, r) for l in range(basis.max_degree + 1)}
        out = {}
        for (i, j), sub in self.blocks.items():
            di, dj = basis.degrees(system.species[i]), basis.degrees(system.species[j])
            out[(i, j)] = {(p, q): dm[di[p]] @ m @ dm[dj[q]].T for (p, q), m in sub.items()}
        return PairBlockSet(out)

    def assemble(self, system: AtomicSystem, basis: OrbitalBasisSpec) -> np.ndarray:
        """Full orbital matrix; pairs beyond the cutoff are zero."""
        starts = np.concatenate([[0], np.cumsum([basis.num_orbitals(s) for s in system.species])])
        full = np.zeros((starts[-1], starts[-1]))
        for (i, j), sub in self.blocks.items():
            oi = basis.offsets(system.species[i])
            oj = basis.offsets(system.species[j])
            for (p, q), m in sub.items():
                r0, c0 = starts[i] + oi[p], starts[j] + oj[q]
                full[r0 : r0 + m.shape[0], c0 : c0 + m.shape[1]] = m
        return full


def _degrees(m: np.ndarray) -> tuple:
    return (m.shape[0] - 1) // 2, (m.shape[1] - 1) // 2
