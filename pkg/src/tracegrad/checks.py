"""Randomized property suites behind the ``check`` command.

Each suite returns a list of :class:`PropertyResult` carrying the worst
residual seen over all trials.  The Wigner-D routine is injectable so a
deliberately broken implementation can serve as a negative control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .block import (
    DirectSumSpec,
    EquivariantFeature,
    block_forward,
    cg_decomp_ext,
    grad_induce,
    init_block_params,
    s_nonlin,
)
from .so3 import (
    L_MAX,
    HamiltonianBlock,
    _cg_real_nullspace,
    cg_block,
    cg_decompose,
    cg_recompose,
    cg_table,
    random_rotation,
    sph_harm_batch,
    trace_label,
    wigner_d,
)

WignerFn = Callable[[int, object], np.ndarray]


@dataclass
class PropertyResult:
    suite: str
    name: str
    worst: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}.{self.name}: worst {self.worst:.3e} (tol {self.tol:.0e}, {self.trials} trials)"


def transposed_wigner(l: int, r) -> np.ndarray:
    """Deliberately wrong D^l(R)^T, used only as a negative control."""
    return wigner_d(l, r).T


FAULTS = {"wigner-transpose": transposed_wigner}


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Group-theory kernels
# ---------------------------------------------------------------------------


def so3_suite(trials: int = 100, seed: int = 0, wigner: WignerFn = wigner_d, l_max: int = L_MAX) -> list:
    rng = np.random.default_rng(seed)
    sh = homo = orth = trace = 0.0
    for t in range(trials):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        v = _unit_vectors(rng, 4)
        for l in range(l_max + 1):
            d1 = wigner(l, r1)
            lhs = sph_harm_batch(l, v @ r1.matrix.T)
            sh = max(sh, float(np.max(np.abs(lhs - sph_harm_batch(l, v) @ d1.T))))
            homo = max(homo, float(np.max(np.abs(wigner(l, r1 @ r2) - d1 @ wigner(l, r2)))))
            orth = max(orth, float(np.max(np.abs(d1 @ d1.T - np.eye(2 * l + 1)))))
        for lp in range(3):
            for lq in range(3):
                h = rng.normal(size=(2 * lp + 1, 2 * lq + 1))
                hr = wigner(lp, r1) @ h @ wigner(lq, r1).T
                t0 = trace_label(HamiltonianBlock(lp, lq, h)).value
                t1 = trace_label(HamiltonianBlock(lp, lq, hr)).value
                trace = max(trace, abs(t1 - t0) / max(t0, 1e-12))
    return [
        PropertyResult("so3", "sph_harm_equivariance", sh, 1e-10, trials),
        PropertyResult("so3", "wigner_homomorphism", homo, 1e-10, trials),
        PropertyResult("so3", "wigner_orthogonality", orth, 1e-10, trials),
        PropertyResult("so3", "trace_invariance", trace, 1e-10, trials),
    ]


def cg_suite(trials: int = 100, seed: int = 0, wigner: WignerFn = wigner_d, l_max: int = 2) -> list:
    rng = np.random.default_rng(seed)
    roundtrip = ortho = equi = agree = 0.0
    for lp in range(l_max + 1):
        for lq in range(l_max + 1):
            m = cg_table(lp, lq).matrix()
            ortho = max(ortho, float(np.max(np.abs(m @ m.T - np.eye(m.shape[0])))))
            for l in range(abs(lp - lq), lp + lq + 1):
                a, b = cg_block(lp, lq, l), _cg_real_nullspace(lp, lq, l)
                sign = np.sign(np.sum(a * b)) or 1.0
                agree = max(agree, float(np.max(np.abs(a - sign * b))))
    for _ in range(trials):
        r = random_rotation(rng)
        lp, lq = (int(x) for x in rng.integers(0, l_max + 1, size=2))
        h = rng.normal(size=(2 * lp + 1, 2 * lq + 1))
        back = cg_recompose(cg_decompose(HamiltonianBlock(lp, lq, h)), lp, lq).matrix
        roundtrip = max(roundtrip, float(np.max(np.abs(back - h))))
        dp, dq = wigner(lp, r), wigner(lq, r)
        comps = cg_decompose(HamiltonianBlock(lp, lq, dp @ h @ dq.T))
        ref = cg_decompose(HamiltonianBlock(lp, lq, h))
        for l, c in comps.items():
            equi = max(equi, float(np.max(np.abs(c - wigner(l, r) @ ref[l]))))
    return [
        PropertyResult("cg", "roundtrip", roundtrip, 1e-12, trials),
        PropertyResult("cg", "orthogonality", ortho, 1e-12, 1),
        PropertyResult("cg", "equivariance", equi, 1e-10, trials),
        PropertyResult("cg", "nullspace_agreement", agree, 1e-10, 1),
    ]


# ---------------------------------------------------------------------------
# TraceGrad block
# ---------------------------------------------------------------------------

DEFAULT_CHECK_SPECS = ("0x2+1x2+2x1", "1x1", "0x1+1x3+2x2+3x1", "2x2+4x1")


def random_feature(spec: DirectSumSpec, rng, batch: int | None = None) -> EquivariantFeature:
    shape = (spec.total_dim,) if batch is None else (batch, spec.total_dim)
    return EquivariantFeature(spec, rng.normal(size=shape) / math.sqrt(spec.total_dim) * 2.0)


def _dmats(spec, r, wigner):
    return {l: wigner(l, r) for l in spec.degrees}


def block_suite(
    trials: int = 100,
    seed: int = 0,
    wigner: WignerFn = wigner_d,
    specs=DEFAULT_CHECK_SPECS,
    channels: int = 8,
    hidden: int = 8,
) -> list:
    rng = np.random.default_rng(seed)
    v_eq = g_eq = inv_u = inv_z = fd = 0.0
    for t in range(trials):
        spec = DirectSumSpec.parse(specs[t % len(specs)])
        params = init_block_params(spec, channels, hidden, spec.num_entries, rng, zero_last=False)
        f = random_feature(spec, rng)
        r = random_rotation(rng)
        fr = f.rotated(_dmats(spec, r, wigner))
        # grad mechanism
        tape = Tape()
        v = grad_induce(EquivariantFeature(spec, tape.variable(f.data)), params)
        tape = Tape()
        vr = grad_induce(EquivariantFeature(spec, tape.variable(fr.data)), params)
        expect = EquivariantFeature(spec, v.value()).rotated(_dmats(spec, r, wigner)).data
        v_eq = max(v_eq, float(np.max(np.abs(vr.value() - expect))))
        # gate mechanism
        o, _ = block_forward(f, params, "gate")
        o_r, _ = block_forward(fr, params, "gate")
        g_eq = max(g_eq, float(np.max(np.abs(o_r.data - o.rotated(_dmats(spec, r, wigner)).data))))
        # invariants
        u, u_r = cg_decomp_ext(f, params), cg_decomp_ext(fr, params)
        inv_u = max(inv_u, float(np.max(np.abs(u - u_r))))
        inv_z = max(inv_z, float(np.max(np.abs(s_nonlin(u, params) - s_nonlin(u_r, params)))))
        # finite differences of sum(z) against v
        if t < max(5, trials // 10):
            fd = max(fd, grad_fd_error(f, params, v.value()))
    return [
        PropertyResult("grad", "grad_equivariance", v_eq, 1e-10, trials),
        PropertyResult("grad", "gate_equivariance", g_eq, 1e-10, trials),
        PropertyResult("grad", "u_invariance", inv_u, 1e-12, trials),
        PropertyResult("grad", "z_invariance", inv_z, 1e-12, trials),
        PropertyResult("grad", "grad_vs_finite_diff", fd, 1e-6, max(5, trials // 10)),
    ]


def sum_z(f: np.ndarray, spec: DirectSumSpec, params) -> float:
    return float(np.sum(s_nonlin(cg_decomp_ext(EquivariantFeature(spec, f), params), params)))


def grad_fd_error(f: EquivariantFeature, params, v: np.ndarray, step: float = 1e-3) -> float:
    """Max relative error of ``v`` against five-point central differences of sum(z).

    The denominator per component is max(|v|, |numeric|, 1e-8).
    """
    x = np.asarray(f.data, dtype=np.float64)
    num = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = step

        def at(s):
            return sum_z(x + s * e, f.spec, params)

        num.flat[k] = (-at(2) + 8 * at(1) - 8 * at(-1) + at(-2)) / (12 * step)
    denom = np.maximum(np.maximum(np.abs(v), np.abs(num)), 1e-8)
    return float(np.max(np.abs(v - num) / denom))


def second_order_fd(seed: int = 0, step: float = 1e-3) -> float:
    """Relative error of a parameter gradient taken through v = d(sum z)/df,
    against five-point central differences of the same scalar loss."""
    rng = np.random.default_rng(seed)
    spec = DirectSumSpec.parse("0x2+1x2+2x1")
    params = init_block_params(spec, 6, 6, 4, rng, zero_last=False)
    f = rng.normal(size=(3, spec.total_dim)) * 0.5
    target = rng.normal(size=f.shape)
    w0 = params.W[1]

    def loss(w_value, with_grad=False):
        tape = Tape()
        w = tape.variable(w_value)
        p = params.on_tape(tape)
        p.W[1] = w
        x = tape.variable(f)
        v = grad_induce(EquivariantFeature(spec, x), p).data
        d = ad.sub(ad.add(v, x), target)
        out = ad.sum_(ad.mul(d, d))
        if with_grad:
            return tape.grad(out, [w])[0].value
        return float(out.value)

    g = loss(w0, with_grad=True)
    num = np.empty_like(w0)
    for k in range(w0.size):
        e = np.zeros_like(w0)
        e.flat[k] = step
        num.flat[k] = (-loss(w0 + 2 * e) + 8 * loss(w0 + e) - 8 * loss(w0 - e) + loss(w0 - 2 * e)) / (12 * step)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
    return float(np.max(np.abs(g - num) / denom))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def data_suite(records: list, basis, oracle=None, seed: int = 0, trials: int | None = None) -> list:
    from .data import make_oracle_params, oracle_blocks

    rng = np.random.default_rng(seed)
    oracle = oracle or make_oracle_params(basis)
    n = len(records) if trials is None else min(trials, len(records))
    pick = rng.choice(len(records), size=n, replace=False) if n < len(records) else np.arange(n)
    eq = herm = label = 0.0
    for k in pick:
        rec = records[int(k)]
        r = random_rotation(rng)
        want = rec.blocks.rotated(r, rec.system, basis)
        got = oracle_blocks(rec.system.rotated(r), basis, oracle)
        for key, m in want.items():
            i, j, p, q = key
            eq = max(eq, float(np.max(np.abs(got.blocks[(i, j)][(p, q)] - m))))
    for rec in records:
        herm = max(herm, rec.blocks.hermiticity_error())
        tr = rec.blocks.traces()
        if set(tr) != set(rec.traces):
            label = math.inf
        else:
            label = max(label, max(abs(tr[k] - rec.traces[k]) for k in tr))
    variances = block_type_variance(records)
    low = min(variances.values()) if variances else 0.0
    return [
        PropertyResult("data", "oracle_equivariance", eq, 1e-12, n),
        PropertyResult("data", "hermiticity", herm, 1e-12, len(records)),
        PropertyResult("data", "label_consistency", label, 0.0, len(records)),
        # reported as 1e-3 / smallest variance so that <= 1 means nontrivial
        PropertyResult("data", "nontriviality", 1e-3 / low if low > 0 else math.inf, 1.0, len(variances)),
    ]


def block_type_variance(records: list) -> dict:
    """Entry variance per (lp, lq) block type over a dataset."""
    acc = {}
    for rec in records:
        for _, m in rec.blocks.items():
            key = ((m.shape[0] - 1) // 2, (m.shape[1] - 1) // 2)
            acc.setdefault(key, []).append(m.ravel())
    return {k: float(np.var(np.concatenate(v))) for k, v in acc.items()}
