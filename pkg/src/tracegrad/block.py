"""Gradient-induced equivariant nonlinearity and its gated counterpart.

A feature ``f`` is a direct sum of degree-l copies.  The layer computes

    u_c = sum_{i,j: l_i = l_j} W^c_ij <f_i, f_j> / sqrt(2 l_i + 1)      (invariant)
    z   = s_nonlin(u)                                                    (invariant)
    v   = d(sum_c z_c) / df                                              (equivariant)
    o   = f + v

``v`` is obtained with one recorded reverse pass, so a training loss can
be differentiated through it.  The gated alternative uses ``v = z * f``
with one gate per degree-l copy.

Internally features are handled as *parts*: a dict ``{l: Node}`` with
each node shaped ``(batch, multiplicity, 2l+1)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .errors import ParameterError, UsageError
from .so3 import L_MAX

Mode = Literal["grad", "gate", "off"]
MODES = ("grad", "gate", "off")


@dataclass(frozen=True)
class DirectSumSpec:
    """Ordered (degree, multiplicity) entries; each degree appears once."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((int(l), int(m)) for l, m in self.entries)
        seen = set()
        for l, m in entries:
            if not 0 <= l <= L_MAX:
                raise ParameterError(f"degree {l} outside [0, {L_MAX}]")
            if m < 1:
                raise ParameterError(f"multiplicity must be >= 1, got {m} for l={l}")
            if l in seen:
                raise ParameterError(f"degree {l} listed twice")
            seen.add(l)
        if not entries:
            raise ParameterError("empty spec")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def parse(cls, text: str) -> "DirectSumSpec":
        """Parse ``"0x8+1x8+2x4"``."""
        items = []
        for tok in text.replace(" ", "").split("+"):
            m = re.fullmatch(r"(\d+)x(\d+)", tok)
            if not m:
                raise ParameterError(f"bad spec token {tok!r}")
            items.append((int(m.group(1)), int(m.group(2))))
        return cls(tuple(items))

    def __str__(self):
        return "+".join(f"{l}x{m}" for l, m in self.entries)

    @property
    def degrees(self) -> tuple:
        return tuple(l for l, _ in self.entries)

    @property
    def total_dim(self) -> int:
        return sum(m * (2 * l + 1) for l, m in self.entries)

    @property
    def num_entries(self) -> int:
        return sum(m for _, m in self.entries)

    def multiplicity(self, l: int) -> int:
        return dict(self.entries).get(l, 0)

    def offsets(self):
        """(degree, multiplicity, start, stop) into the flat layout."""
        pos = 0
        for l, m in self.entries:
            size = m * (2 * l + 1)
            yield l, m, pos, pos + size
            pos += size


@dataclass
class EquivariantFeature:
    """Flat direct-sum data ``(..., total_dim)``; copy-major within a degree.

    ``data`` is either a numpy array or a tape :class:`Node`.
    """

    spec: DirectSumSpec
    data: object

    def __post_init__(self):
        if self.data.shape[-1] != self.spec.total_dim:
            raise ParameterError(
                f"feature length {self.data.shape[-1]} != spec total_dim {self.spec.total_dim}"
            )

    @property
    def on_tape(self) -> bool:
        return isinstance(self.data, Node)

    def value(self) -> np.ndarray:
        return self.data.value if self.on_tape else np.asarray(self.data)

    def degree_slices(self) -> dict:
        """numpy view ``{l: (..., mult, 2l+1)}``."""
        x = self.value()
        return {
            l: x[..., a:b].reshape(x.shape[:-1] + (m, 2 * l + 1))
            for l, m, a, b in self.spec.offsets()
        }

    def rotated(self, dmats: dict) -> "EquivariantFeature":
        """Apply ``{l: D^l}`` to every copy (numpy only)."""
        parts = self.degree_slices()
        out = np.concatenate(
            [
                np.einsum("ij,...cj->...ci", dmats[l], parts[l]).reshape(
                    parts[l].shape[:-2] + (-1,)
                )
                for l, _, _, _ in self.spec.offsets()
            ],
            axis=-1,
        )
        return EquivariantFeature(self.spec, out)


def split_parts(x: Node, spec: DirectSumSpec) -> dict:
    """Flat ``(E, total_dim)`` node -> ``{l: (E, mult, 2l+1)}`` nodes."""
    e = x.shape[0]
    return {
        l: ad.reshape(ad.slice_(x, 1, a, b), (e, m, 2 * l + 1)) for l, m, a, b in spec.offsets()
    }


def join_parts(parts: dict, spec: DirectSumSpec) -> Node:
    nodes = []
    for l, m, _, _ in spec.offsets():
        p = parts[l]
        nodes.append(ad.reshape(p, (p.shape[0], m * (2 * l + 1))))
    return nodes[0] if len(nodes) == 1 else ad.concat(nodes, axis=1)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    """Weights of one block.

    ``W[l]`` has shape (C, mult_l, mult_l).  ``fc`` holds three
    (weight (in, out), bias (out,)) pairs and ``ln`` two (gain, bias) pairs;
    ``fc=None`` makes s_nonlin the identity (z = u).  Values may be numpy
    arrays or tape nodes.
    """

    W: dict
    fc: list | None = None
    ln: list | None = None
    eps: float = 1e-5

    @property
    def channels(self) -> int:
        return next(iter(self.W.values())).shape[0]

    @property
    def out_channels(self) -> int:
        return self.channels if self.fc is None else self.fc[-1][0].shape[1]

    def named(self, prefix: str = "") -> dict:
        out = {f"{prefix}W{l}": w for l, w in sorted(self.W.items())}
        for i, (w, b) in enumerate(self.fc or []):
            out[f"{prefix}fc{i}.w"] = w
            out[f"{prefix}fc{i}.b"] = b
        for i, (g, b) in enumerate(self.ln or []):
            out[f"{prefix}ln{i}.g"] = g
            out[f"{prefix}ln{i}.b"] = b
        return out

    @classmethod
    def from_named(cls, named: dict, prefix: str = "", eps: float = 1e-5) -> "BlockParams":
        W, fc, ln = {}, [], []
        for key, val in named.items():
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            if re.fullmatch(r"W\d+", rest):
                W[int(rest[1:])] = val
        i = 0
        while f"{prefix}fc{i}.w" in named:
            fc.append((named[f"{prefix}fc{i}.w"], named[f"{prefix}fc{i}.b"]))
            i += 1
        i = 0
        while f"{prefix}ln{i}.g" in named:
            ln.append((named[f"{prefix}ln{i}.g"], named[f"{prefix}ln{i}.b"]))
            i += 1
        return cls(W, fc or None, ln or None, eps)

    def on_tape(self, tape: Tape) -> "BlockParams":
        def lift(x):
            return x if isinstance(x, Node) else tape.variable(x)

        return BlockParams(
            {l: lift(w) for l, w in self.W.items()},
            None if self.fc is None else [(lift(w), lift(b)) for w, b in self.fc],
            None if self.ln is None else [(lift(g), lift(b)) for g, b in self.ln],
            self.eps,
        )

    def check(self, spec: DirectSumSpec):
        if set(self.W) != set(spec.degrees):
            raise ParameterError(f"W covers degrees {sorted(self.W)}, spec has {spec.degrees}")
        c = self.channels
        for l, m in spec.entries:
            if self.W[l].shape != (c, m, m):
                raise ParameterError(f"W{l} has shape {self.W[l].shape}, expected {(c, m, m)}")
        if self.fc is not None and self.fc[0][0].shape[0] != c:
            raise ParameterError("first s_nonlin layer does not accept C channels")


def init_block_params(
    spec: DirectSumSpec,
    channels: int = 64,
    hidden: int = 64,
    out_channels: int = 9,
    rng: np.random.Generator | None = None,
    zero_last: bool = True,
) -> BlockParams:
    """Variance-preserving init.

    FC weights/biases ~ U(+-1/sqrt(fan_in)); W ~ N(0, 1/#pairs).  With
    ``zero_last`` the final layer starts at zero, so z = 0 and v = 0.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = sum(m * m for _, m in spec.entries)
    W = {l: rng.normal(0.0, math.sqrt(1.0 / pairs), size=(channels, m, m)) for l, m in spec.entries}
    fc = []
    for i, (fi, fo) in enumerate([(channels, hidden), (hidden, hidden), (hidden, out_channels)]):
        bound = 1.0 / math.sqrt(fi)
        if i == 2 and zero_last:
            fc.append((np.zeros((fi, fo)), np.zeros(fo)))
        else:
            fc.append((rng.uniform(-bound, bound, (fi, fo)), rng.uniform(-bound, bound, fo)))
    ln = [(np.ones(hidden), np.zeros(hidden)) for _ in range(2)]
    return BlockParams(W, fc, ln)


# ---------------------------------------------------------------------------
# Layer pieces on parts
# ---------------------------------------------------------------------------


def linear(x: Node, w, b=None) -> Node:
    y = ad.einsum("ei,io->eo", x, w)
    return y if b is None else ad.add(y, b)


def mlp_silu_ln(x: Node, fc: list, ln: list, eps: float = 1e-5) -> Node:
    """FC -> (SiLU -> LayerNorm -> FC)*; ``len(ln) == len(fc) - 1``."""
    h = linear(x, *fc[0])
    for (w, b), (g, beta) in zip(fc[1:], ln):
        h = ad.add(ad.mul(ad.layernorm(ad.silu(h), eps), g), beta)
        h = linear(h, w, b)
    return h


def invariants_u(parts: dict, params: BlockParams) -> Node:
    """Extended degree-0 projection, ``(E, C)``."""
    u = None
    for l in sorted(parts):
        f = parts[l]
        term = ad.scale(ad.einsum("eim,ejm,cij->ec", f, f, params.W[l]), 1.0 / math.sqrt(2 * l + 1))
        u = term if u is None else ad.add(u, term)
    return u


def s_nonlin_node(u: Node, params: BlockParams) -> Node:
    if params.fc is None:
        return u
    return mlp_silu_ln(u, params.fc, params.ln, params.eps)


def grad_induce_parts(parts: dict, params: BlockParams) -> tuple[dict, Node]:
    """v = d(sum z)/df per degree; returns (v_parts, z)."""
    for p in parts.values():
        if not isinstance(p, Node):
            raise UsageError("grad_induce needs features recorded on a tape")
    z = s_nonlin_node(invariants_u(parts, params), params)
    degrees = sorted(parts)
    grads = z.tape.grad(ad.sum_(z), [parts[l] for l in degrees])
    return dict(zip(degrees, grads)), z


def gated_parts(parts: dict, z: Node, spec: DirectSumSpec) -> dict:
    """Scale copy k of the feature by z[:, k] (copies numbered in spec order)."""
    if z.shape[-1] != spec.num_entries:
        raise ParameterError(
            f"gate needs one z channel per spec entry ({spec.num_entries}), got {z.shape[-1]}"
        )
    out, pos = {}, 0
    for l, m in spec.entries:
        gate = ad.reshape(ad.slice_(z, 1, pos, pos + m), (z.shape[0], m, 1))
        out[l] = ad.mul(parts[l], gate)
        pos += m
    return out


def block_forward_parts(parts: dict, params: BlockParams, mode: Mode, spec: DirectSumSpec):
    """Returns (o_parts, z)."""
    if mode == "grad":
        v, z = grad_induce_parts(parts, params)
        return {l: ad.add(parts[l], v[l]) for l in parts}, z
    z = s_nonlin_node(invariants_u(parts, params), params)
    if mode == "gate":
        v = gated_parts(parts, z, spec)
        return {l: ad.add(parts[l], v[l]) for l in parts}, z
    if mode == "off":
        return dict(parts), z
    raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")


# ---------------------------------------------------------------------------
# Feature-level API
# ---------------------------------------------------------------------------


def _as_2d_node(f: EquivariantFeature, tape: Tape | None = None) -> tuple[Node, bool]:
    if f.on_tape:
        x = f.data
    else:
        x = (tape or Tape()).variable(np.asarray(f.data))
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    return x, squeeze


def _restore(x: Node, squeeze: bool) -> Node:
    return ad.reshape(x, (x.shape[-1],)) if squeeze else x


def _params_for(params: BlockParams, tape: Tape) -> BlockParams:
    needs = any(not isinstance(w, Node) for w in params.named().values())
    return params.on_tape(tape) if needs else params


def cg_decomp_ext(f: EquivariantFeature, params: BlockParams):
    """Invariant channels u; a Node if ``f`` is on a tape, else an array."""
    params.check(f.spec)
    x, squeeze = _as_2d_node(f)
    u = _restore(invariants_u(split_parts(x, f.spec), _params_for(params, x.tape)), squeeze)
    return u if f.on_tape else u.value


def s_nonlin(u, params: BlockParams):
    """z = FC3(LN(SiLU(FC2(LN(SiLU(FC1(u))))))), or u itself for identity params."""
    if isinstance(u, Node):
        x = u
    else:
        x = Tape().constant(np.asarray(u, dtype=np.float64))
    if x.shape[-1] != params.channels:
        raise ParameterError(f"u has {x.shape[-1]} channels, params expect {params.channels}")
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    z = _restore(s_nonlin_node(x, _params_for(params, x.tape)), squeeze)
    return z if isinstance(u, Node) else z.value


def grad_induce(f: EquivariantFeature, params: BlockParams) -> EquivariantFeature:
    """v = d(sum_c z_c)/df, recorded on f's tape."""
    if not f.on_tape:
        raise UsageError("grad_induce needs f recorded on a live tape (got a detached array)")
    if f.data.tape.closed:
        raise UsageError("f lives on a closed tape")
    params.check(f.spec)
    x, squeeze = _as_2d_node(f)
    p = _params_for(params, x.tape)
    z = s_nonlin_node(invariants_u(split_parts(x, f.spec), p), p)
    (v,) = x.tape.grad(ad.sum_(z), [f.data])
    return EquivariantFeature(f.spec, v)


def gated_induce(f: EquivariantFeature, params: BlockParams) -> EquivariantFeature:
    params.check(f.spec)
    if params.out_channels != f.spec.num_entries:
        raise ParameterError(
            f"gate needs C_z == number of spec entries ({f.spec.num_entries}), got {params.out_channels}"
        )
    x, squeeze = _as_2d_node(f)
    p = _params_for(params, x.tape)
    parts = split_parts(x, f.spec)
    z = s_nonlin_node(invariants_u(parts, p), p)
    v = _restore(join_parts(gated_parts(parts, z, f.spec), f.spec), squeeze)
    return EquivariantFeature(f.spec, v if f.on_tape else v.value)


def residual_merge(f: EquivariantFeature, v: EquivariantFeature) -> EquivariantFeature:
    if f.spec != v.spec:
        raise ParameterError(f"spec mismatch: {f.spec} vs {v.spec}")
    if f.on_tape or v.on_tape:
        return EquivariantFeature(f.spec, ad.add(f.data, v.data) if f.on_tape else ad.add(v.data, f.data))
    return EquivariantFeature(f.spec, np.asarray(f.data) + np.asarray(v.data))


def block_forward(f: EquivariantFeature, params: BlockParams, mode: Mode = "grad"):
    """(o, z) for one block; ``mode='off'`` returns o = f unchanged."""
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    params.check(f.spec)
    was_on_tape = f.on_tape
    x, squeeze = _as_2d_node(f)
    p = _params_for(params, x.tape)
    o_parts, z = block_forward_parts(split_parts(x, f.spec), p, mode, f.spec)
    if mode == "off":
        o = f.data
    else:
        o = _restore(join_parts(o_parts, f.spec), squeeze)
    z = _restore(z, squeeze)
    if was_on_tape:
        return EquivariantFeature(f.spec, o), z
    return EquivariantFeature(f.spec, o.value if isinstance(o, Node) else o), z.value
