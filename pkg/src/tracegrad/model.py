"""Minimal equivariant message-passing backbone with TraceGrad modules.

Per module k = 1..K:

1. edge update: tensor-product messages ``[x_j, x_i] (x) Y(r_ij)`` with
   channel-wise radial weights, mixed per output degree (residual over
   the previous edge feature);
2. TraceGrad block on the edge feature -> ``(o, z)``;
3. node update: sum of ``o`` over outgoing edges, mixed per degree.

Decoders: a per-species-pair linear map from ``o^(K)`` to direct-sum
components, recombined with CG coefficients into blocks and symmetrized
across (i, j) / (j, i); and a 4-layer invariant MLP from
``[z^(1) .. z^(K)]`` to one trace per shell pair.

Blocks are handled in a padded ``(E, n_max * n_max)`` layout where
``n_max`` is the largest per-atom orbital count; shell-pair slots use
``p * max_shells + q``.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .block import (
    MODES,
    BlockParams,
    DirectSumSpec,
    block_forward_parts,
    init_block_params,
    linear,
    mlp_silu_ln,
)
from .errors import ConfigurationError, LoadError, ParameterError, UsageError
from .so3 import cg_block, sph_harm_batch
from .structures import DEFAULT_BASIS, AtomicSystem, Graph, OrbitalBasisSpec, PairBlockSet, build_graph

CHECKPOINT_FORMAT = "tracegrad-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    K: int = 3
    spec: str = "0x8+1x8+2x4"
    radial_bins: int = 16
    radial_hidden: int = 16
    C: int = 64
    hidden: int = 64
    C_z: int | None = None  # None: number of shell-pair slots (grad/off) or spec entries (gate)
    mode: str = "grad"
    trace_head: bool = True
    trace_hidden: int = 64
    cutoff: float = 2.6
    avg_neighbors: float = 5.0
    zero_last: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        DirectSumSpec.parse(self.spec)

    @property
    def direct_sum(self) -> DirectSumSpec:
        return DirectSumSpec.parse(self.spec)

    def z_channels(self, basis: OrbitalBasisSpec) -> int:
        if self.mode == "gate":
            n = self.direct_sum.num_entries
            if self.C_z is not None and self.C_z != n:
                raise ConfigurationError(f"gate mode needs C_z = {n} (one per spec entry)")
            return n
        return self.C_z if self.C_z is not None else basis.max_shells**2

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Per-sample geometry and batching
# ---------------------------------------------------------------------------


def rbf(dist: np.ndarray, cutoff: float, bins: int) -> np.ndarray:
    centers = np.linspace(0.0, cutoff, bins)
    width = cutoff / bins
    return np.exp(-(((dist[:, None] - centers[None, :]) / width) ** 2))


@dataclass
class SampleGraph:
    system: AtomicSystem
    graph: Graph
    targets: dict | None = None  # "H" (E, n2), "H_mask", "T" (E, s2), "T_mask"


@dataclass
class GraphBatch:
    n_atoms: int
    species: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    reverse: np.ndarray
    pair_type: np.ndarray
    ys: dict
    radial_in: np.ndarray
    atom_offsets: np.ndarray
    edge_offsets: np.ndarray
    samples: list
    targets: dict | None = None

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


class Model:
    """Parameter container plus the forward pass (on a :class:`Tape`)."""

    def __init__(self, config: ModelConfig, basis: OrbitalBasisSpec = DEFAULT_BASIS, params=None, seed=0):
        self.config = config
        self.basis = basis
        self.spec = config.direct_sum
        self.l_sh = max(self.spec.degrees)
        self.species = basis.species
        self.n_max = basis.max_orbitals
        self.s_max = basis.max_shells
        self.c_z = config.z_channels(basis)
        self._check_coverage()
        self._build_tables()
        self._paths = self._tp_paths()
        self.params = params if params is not None else self.init_params(seed)

    # -- structure -----------------------------------------------------------

    def _check_coverage(self):
        have = set(self.spec.degrees)
        for si in self.species:
            for sj in self.species:
                for lp in self.basis.degrees(si):
                    for lq in self.basis.degrees(sj):
                        need = set(range(abs(lp - lq), lp + lq + 1))
                        if not need <= have:
                            raise ConfigurationError(
                                f"hidden spec {self.spec} lacks degrees {sorted(need - have)} "
                                f"needed for ({lp},{lq}) blocks"
                            )

    def pair_index(self, si, sj) -> int:
        return self.species.index(int(si)) * len(self.species) + self.species.index(int(sj))

    def _build_tables(self):
        """Slots and CG placement tensors per (pair type, degree)."""
        self.pair_types = [(si, sj) for si in self.species for sj in self.species]
        self.slots = {}
        self.placement = {}
        n = self.n_max
        for t, (si, sj) in enumerate(self.pair_types):
            di, dj = self.basis.degrees(si), self.basis.degrees(sj)
            oi, oj = self.basis.offsets(si), self.basis.offsets(sj)
            for l in self.spec.degrees:
                slots = [
                    (p, q)
                    for p, lp in enumerate(di)
                    for q, lq in enumerate(dj)
                    if abs(lp - lq) <= l <= lp + lq
                ]
                if not slots:
                    continue
                g = np.zeros((len(slots), 2 * l + 1, n * n))
                for s, (p, q) in enumerate(slots):
                    c = cg_block(di[p], dj[q], l)
                    for a in range(2 * di[p] + 1):
                        for b in range(2 * dj[q] + 1):
                            g[s, :, (oi[p] + a) * n + oj[q] + b] = c[:, a, b]
                self.slots[(t, l)] = slots
                self.placement[(t, l)] = g

    def _tp_paths(self):
        """(l_in, l_sh, l_out) triples for the message tensor product."""
        out = []
        for l1 in self.spec.degrees:
            for l2 in range(self.l_sh + 1):
                for l3 in self.spec.degrees:
                    if abs(l1 - l2) <= l3 <= l1 + l2:
                        out.append((l1, l2, l3))
        return out

    def _module_paths(self, k):
        """Paths for module k; module 0 only sees degree-0 node features."""
        return [p for p in self._paths if k > 0 or p[0] == 0]

    def param_shapes(self) -> dict:
        cfg, spec = self.config, self.spec
        shapes = {"embed": (len(self.species), spec.multiplicity(0))}
        for k in range(cfg.K):
            pre = f"m{k}."
            paths = self._module_paths(k)
            n_w = sum(2 * spec.multiplicity(l1) for l1, _, _ in paths)
            shapes[pre + "rad.fc0.w"] = (cfg.radial_bins + 1, cfg.radial_hidden)
            shapes[pre + "rad.fc0.b"] = (cfg.radial_hidden,)
            shapes[pre + "rad.fc1.w"] = (cfg.radial_hidden, n_w)
            shapes[pre + "rad.fc1.b"] = (n_w,)
            for l3 in spec.degrees:
                n_in = sum(2 * spec.multiplicity(l1) for l1, _, o in paths if o == l3)
                shapes[f"{pre}edge{l3}"] = (n_in, spec.multiplicity(l3))
                shapes[f"{pre}node{l3}"] = (spec.multiplicity(l3), spec.multiplicity(l3))
            for name, arr in init_block_params(spec, cfg.C, cfg.hidden, self.c_z).named().items():
                shapes[pre + "blk." + name] = arr.shape
        for (t, l), slots in self.slots.items():
            shapes[f"dec.t{t}.l{l}"] = (spec.multiplicity(l), len(slots))
        if cfg.trace_head:
            dims = [cfg.K * self.c_z] + [cfg.trace_hidden] * 3 + [self.s_max**2]
            for i in range(4):
                shapes[f"tr.fc{i}.w"] = (dims[i], dims[i + 1])
                shapes[f"tr.fc{i}.b"] = (dims[i + 1],)
            for i in range(3):
                shapes[f"tr.ln{i}.g"] = (cfg.trace_hidden,)
                shapes[f"tr.ln{i}.b"] = (cfg.trace_hidden,)
        return shapes

    def init_params(self, seed: int = 0) -> dict:
        """Each array is drawn from its own name-keyed stream, so shared
        parameters are identical across modes that differ elsewhere."""
        cfg = self.config
        out = {}
        for name, shape in self.param_shapes().items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            base = name.rsplit(".", 1)[-1]
            if name == "embed":
                out[name] = rng.normal(0.0, 1.0, shape)
            elif ".blk.W" in name:
                pairs = sum(m * m for _, m in self.spec.entries)
                out[name] = rng.normal(0.0, math.sqrt(1.0 / pairs), shape)
            elif base == "g":
                out[name] = np.ones(shape)
            elif ".ln" in name and base == "b":
                out[name] = np.zeros(shape)
            elif cfg.zero_last and ".blk.fc2." in name:
                out[name] = np.zeros(shape)
            elif base in ("w", "b"):
                fan_in = self.param_shapes()[name[:-1] + "w"][0]
                bound = 1.0 / math.sqrt(fan_in)
                out[name] = rng.uniform(-bound, bound, shape)
            else:
                # per-degree channel mixers and decoder maps
                out[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        return out

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- data preparation ----------------------------------------------------

    def prepare(self, system: AtomicSystem, blocks: PairBlockSet | None = None) -> SampleGraph:
        graph = build_graph(system)
        targets = None
        if blocks is not None:
            targets = self._targets(system, graph, blocks)
        return SampleGraph(system, graph, targets)

    def _targets(self, system, graph, blocks: PairBlockSet) -> dict:
        n, s = self.n_max, self.s_max
        e = graph.n_edges
        h = np.zeros((e, n * n))
        hm = np.zeros((e, n * n))
        t = np.zeros((e, s * s))
        tm = np.zeros((e, s * s))
        deg = np.full((e, n * n, 2), -1, dtype=np.int64)
        for k in range(e):
            i, j = int(graph.src[k]), int(graph.dst[k])
            sub = blocks.blocks.get((i, j))
            if sub is None:
                raise ParameterError(f"target blocks missing pair ({i}, {j})")
            di = self.basis.degrees(system.species[i])
            dj = self.basis.degrees(system.species[j])
            oi = self.basis.offsets(system.species[i])
            oj = self.basis.offsets(system.species[j])
            for (p, q), m in sub.items():
                rows = np.arange(oi[p], oi[p] + m.shape[0])
                cols = np.arange(oj[q], oj[q] + m.shape[1])
                idx = (rows[:, None] * n + cols[None, :]).ravel()
                h[k, idx] = m.ravel()
                hm[k, idx] = 1.0
                deg[k, idx] = (di[p], dj[q])
                t[k, p * s + q] = float(np.sum(m * m))
                tm[k, p * s + q] = 1.0
        return {"H": h, "H_mask": hm, "T": t, "T_mask": tm, "degrees": deg}

    def collate(self, samples: list) -> GraphBatch:
        src, dst, rev, pt, radial_in, ys = [], [], [], [], [], {l: [] for l in range(self.l_sh + 1)}
        species = []
        a_off, e_off = [0], [0]
        for sg in samples:
            g, sys_ = sg.graph, sg.system
            src.append(g.src + a_off[-1])
            dst.append(g.dst + a_off[-1])
            rev.append(g.reverse + e_off[-1])
            pt.append(
                np.array(
                    [self.pair_index(sys_.species[i], sys_.species[j]) for i, j in zip(g.src, g.dst)]
                )
            )
            radial_in.append(
                np.concatenate(
                    [rbf(g.dist, self.config.cutoff, self.config.radial_bins), g.is_self[:, None]], axis=1
                )
            )
            for l in ys:
                ys[l].append(sph_harm_batch(l, g.unit))
            species.append(sys_.species)
            a_off.append(a_off[-1] + sys_.n_atoms)
            e_off.append(e_off[-1] + g.n_edges)
        targets = None
        if all(sg.targets is not None for sg in samples):
            targets = {k: np.concatenate([sg.targets[k] for sg in samples]) for k in samples[0].targets}
        return GraphBatch(
            n_atoms=a_off[-1],
            species=np.concatenate(species),
            src=np.concatenate(src),
            dst=np.concatenate(dst),
            reverse=np.concatenate(rev),
            pair_type=np.concatenate(pt).astype(np.intp),
            ys={l: np.concatenate(v) for l, v in ys.items()},
            radial_in=np.concatenate(radial_in).astype(np.float64),
            atom_offsets=np.array(a_off),
            edge_offsets=np.array(e_off),
            samples=samples,
            targets=targets,
        )

    # -- forward -------------------------------------------------------------

    def lift_params(self, tape: Tape, params: dict | None = None) -> dict:
        return {k: tape.variable(v, name=k) for k, v in (params or self.params).items()}

    def encode(self, tape: Tape, batch: GraphBatch, p: dict):
        """Returns (o^(K) parts, [z^(1) .. z^(K)])."""
        cfg, spec = self.config, self.spec
        e = batch.n_edges
        species_idx = np.array([self.species.index(int(s)) for s in batch.species], dtype=np.intp)
        x = {0: ad.reshape(ad.gather(p["embed"], species_idx), (batch.n_atoms, spec.multiplicity(0), 1))}
        radial_in = tape.constant(batch.radial_in)
        path_const = {}
        edge = None
        zs = []
        for k in range(cfg.K):
            pre = f"m{k}."
            paths = self._module_paths(k)
            hidden = ad.silu(linear(radial_in, p[pre + "rad.fc0.w"], p[pre + "rad.fc0.b"]))
            weights = linear(hidden, p[pre + "rad.fc1.w"], p[pre + "rad.fc1.b"])
            srcf = {
                l: ad.concat([ad.gather(x[l], batch.dst), ad.gather(x[l], batch.src)], axis=1)
                for l in x
            }
            pieces = {l3: [] for l3 in spec.degrees}
            pos = 0
            for l1, l2, l3 in paths:
                c2 = 2 * spec.multiplicity(l1)
                key = (l1, l2, l3)
                if key not in path_const:
                    path_const[key] = tape.constant(
                        np.einsum("kmn,en->ekm", cg_block(l1, l2, l3), batch.ys[l2])
                    )
                w = ad.reshape(ad.slice_(weights, 1, pos, pos + c2), (e, c2, 1))
                pos += c2
                msg = ad.einsum("ekm,ecm->eck", path_const[key], srcf[l1])
                pieces[l3].append(ad.mul(msg, w))
            new_edge = {}
            for l3 in spec.degrees:
                cat = pieces[l3][0] if len(pieces[l3]) == 1 else ad.concat(pieces[l3], axis=1)
                y = ad.einsum("eck,cd->edk", cat, p[f"{pre}edge{l3}"])
                new_edge[l3] = y if edge is None else ad.add(edge[l3], y)
            blk = BlockParams.from_named(p, pre + "blk.")
            edge, z = block_forward_parts(new_edge, blk, cfg.mode, spec)
            zs.append(z)
            scale = 1.0 / cfg.avg_neighbors
            new_x = {}
            for l in spec.degrees:
                agg = ad.scale(ad.scatter_add(edge[l], batch.src, batch.n_atoms), scale)
                upd = ad.einsum("nck,cd->ndk", agg, p[f"{pre}node{l}"])
                new_x[l] = upd if l not in x else ad.add(x[l], upd)
            x = new_x
        return edge, zs

    def decode_blocks(self, edge: dict, batch: GraphBatch, p: dict) -> Node:
        """Symmetrized padded blocks, ``(E, n_max**2)``."""
        tape = next(iter(edge.values())).tape
        e = batch.n_edges
        out = None
        for t in range(len(self.pair_types)):
            idx = np.flatnonzero(batch.pair_type == t)
            if idx.size == 0:
                continue
            acc = None
            for l in self.spec.degrees:
                if (t, l) not in self.slots:
                    continue
                o = ad.gather(edge[l], idx)
                h = ad.einsum("eck,cs->esk", o, p[f"dec.t{t}.l{l}"])
                blk = ad.einsum("esk,skx->ex", h, tape.constant(self.placement[(t, l)]))
                acc = blk if acc is None else ad.add(acc, blk)
            part = ad.scatter_add(acc, idx, e)
            out = part if out is None else ad.add(out, part)
        n = self.n_max
        sq = ad.reshape(out, (e, n, n))
        mirrored = ad.transpose(ad.gather(sq, batch.reverse), (0, 2, 1))
        return ad.reshape(ad.scale(ad.add(sq, mirrored), 0.5), (e, n * n))

    def decode_trace(self, zs: list, p: dict) -> Node:
        """Per-edge trace predictions, ``(E, max_shells**2)``."""
        if not self.config.trace_head:
            raise UsageError("trace head is disabled in this configuration")
        z = zs[0] if len(zs) == 1 else ad.concat(zs, axis=1)
        fc = [(p[f"tr.fc{i}.w"], p[f"tr.fc{i}.b"]) for i in range(4)]
        ln = [(p[f"tr.ln{i}.g"], p[f"tr.ln{i}.b"]) for i in range(3)]
        return mlp_silu_ln(z, fc, ln)

    def forward(self, tape: Tape, batch: GraphBatch, p: dict | None = None):
        """(H_pred (E, n_max^2), T_pred (E, s_max^2) or None, zs)."""
        p = p if p is not None else self.lift_params(tape)
        edge, zs = self.encode(tape, batch, p)
        h = self.decode_blocks(edge, batch, p)
        t = self.decode_trace(zs, p) if self.config.trace_head else None
        return h, t, zs

    # -- inference helpers ---------------------------------------------------

    def predict_batch(self, samples: list) -> list:
        """[(PairBlockSet, traces dict or None)] per sample."""
        batch = self.collate(samples)
        tape = Tape()
        h, t, _ = self.forward(tape, batch)
        h_val, t_val = h.value, None if t is None else t.value
        tape.release()
        out = []
        for k, sg in enumerate(samples):
            a, b = batch.edge_offsets[k], batch.edge_offsets[k + 1]
            out.append(self._unpack(sg, h_val[a:b], None if t_val is None else t_val[a:b]))
        return out

    def predict(self, system: AtomicSystem):
        return self.predict_batch([self.prepare(system)])[0]

    def _unpack(self, sg: SampleGraph, h: np.ndarray, t: np.ndarray | None):
        n, s = self.n_max, self.s_max
        blocks, traces = {}, {} if t is not None else None
        spc = sg.system.species
        for k in range(sg.graph.n_edges):
            i, j = int(sg.graph.src[k]), int(sg.graph.dst[k])
            di, dj = self.basis.degrees(spc[i]), self.basis.degrees(spc[j])
            oi, oj = self.basis.offsets(spc[i]), self.basis.offsets(spc[j])
            full = h[k].reshape(n, n)
            sub = {}
            for p, lp in enumerate(di):
                for q, lq in enumerate(dj):
                    sub[(p, q)] = full[oi[p] : oi[p] + 2 * lp + 1, oj[q] : oj[q] + 2 * lq + 1].copy()
                    if traces is not None:
                        traces[(i, j, p, q)] = float(t[k, p * s + q])
            blocks[(i, j)] = sub
        return PairBlockSet(blocks), traces


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _flatten(params: dict):
    names = sorted(params)
    layout = [[n, list(params[n].shape)] for n in names]
    flat = np.concatenate([np.ravel(params[n]) for n in names]) if names else np.zeros(0)
    return layout, flat


def _unflatten(layout, flat) -> dict:
    out, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[pos : pos + size].reshape(shape).copy()
        pos += size
    if pos != flat.size:
        raise LoadError("parameter vector length does not match layout")
    return out


def _checksum(config_json: dict, layout, flat_bytes: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(config_json, sort_keys=True).encode())
    h.update(json.dumps(layout).encode())
    h.update(flat_bytes)
    return "sha256:" + h.hexdigest()


def save_checkpoint(path, model: Model, meta: dict | None = None, extra_params: dict | None = None):
    """JSON container: config, basis, layout, base64 little-endian float64 vector, checksum.

    ``extra_params`` (e.g. optimizer moments) are stored in the same way
    under ``"extra"``.
    """
    layout, flat = _flatten(model.params)
    raw = flat.astype("<f8").tobytes()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "basis": model.basis.to_json(),
        "meta": meta or {},
        "layout": layout,
        "params": base64.b64encode(raw).decode(),
        "checksum": _checksum(model.config.to_json(), layout, raw),
    }
    if extra_params:
        el, ef = _flatten(extra_params)
        doc["extra"] = {"layout": el, "params": base64.b64encode(ef.astype("<f8").tobytes()).decode()}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: Model
    meta: dict = field(default_factory=dict)
    extra: dict | None = None


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise LoadError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {doc.get('version')}")
    raw = base64.b64decode(doc["params"])
    if _checksum(doc["config"], doc["layout"], raw) != doc["checksum"]:
        raise LoadError("checkpoint checksum mismatch")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    params = _unflatten(doc["layout"], flat)
    model = Model(ModelConfig.from_json(doc["config"]), OrbitalBasisSpec.from_json(doc["basis"]), params)
    expected = model.param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise LoadError("checkpoint parameters do not match the model layout")
    extra = None
    if "extra" in doc:
        ef = np.frombuffer(base64.b64decode(doc["extra"]["params"]), dtype="<f8").astype(np.float64)
        extra = _unflatten(doc["extra"]["layout"], ef)
    return Checkpoint(model, doc.get("meta", {}), extra)
