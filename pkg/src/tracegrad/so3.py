"""Exact SO(3) kernels on the real spherical-harmonic basis.

Conventions used throughout the package:

* components of a degree-l quantity are ordered m = -l, ..., l;
* real spherical harmonics are orthonormal on the unit sphere, and the
  l = 1 components are proportional to (y, z, x);
* ``wigner_d(l, R)`` acts on that basis so that
  ``real_sph_harm(l, R @ v) == wigner_d(l, R) @ real_sph_harm(l, v)``;
* a (lp, lq) Hamiltonian block transforms as ``D^lp H D^lq.T``.

All tables are built once (lazily, cached) and are read-only afterwards.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre

from .errors import CapabilityError, ParameterError

L_MAX = 4

_ORTHO_TOL = 1e-12
_UNIT_TOL = 1e-9


def _check_degree(l: int, l_max: int = L_MAX) -> int:
    if int(l) != l or l < 0:
        raise ParameterError(f"degree must be a non-negative integer, got {l!r}")
    if l > l_max:
        raise CapabilityError(f"degree {l} exceeds table limit l_max={l_max}")
    return int(l)


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rotation:
    """A proper rotation, stored as its 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ParameterError("rotation matrix must be a finite 3x3 array")
        if np.max(np.abs(m.T @ m - np.eye(3))) > _ORTHO_TOL * 10:
            raise ParameterError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(m) - 1.0) > _ORTHO_TOL * 10:
            raise ParameterError("rotation matrix has det != 1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, v):
        return np.asarray(v, dtype=np.float64) @ self.matrix.T

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def euler_zyz(self) -> tuple[float, float, float]:
        """Angles (alpha, beta, gamma) with R = Rz(alpha) Ry(beta) Rz(gamma)."""
        r = self.matrix
        sb = math.hypot(r[0, 2], r[1, 2])
        beta = math.atan2(sb, r[2, 2])
        if sb > 1e-15:
            alpha = math.atan2(r[1, 2], r[0, 2])
            gamma = math.atan2(r[2, 1], -r[2, 0])
        elif r[2, 2] > 0:
            alpha, gamma = math.atan2(r[1, 0], r[0, 0]), 0.0
        else:
            alpha, gamma = math.atan2(-r[1, 0], -r[0, 0]), 0.0
        return alpha, beta, gamma


def _rz(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_from_euler_zyz(alpha: float, beta: float, gamma: float) -> Rotation:
    """R = Rz(alpha) @ Ry(beta) @ Rz(gamma) (intrinsic z-y-z)."""
    angles = np.array([alpha, beta, gamma], dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise ParameterError(f"Euler angles must be finite, got {angles}")
    return Rotation(_rz(alpha) @ _ry(beta) @ _rz(gamma))


def rotation_from_quaternion(q) -> Rotation:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(m)


def random_rotation(seed) -> Rotation:
    """Haar-uniform rotation from a normalized Gaussian quaternion.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    return rotation_from_quaternion(q)


# ---------------------------------------------------------------------------
# Spherical harmonics and the complex <-> real change of basis
# ---------------------------------------------------------------------------


@functools.cache
def real_basis_change(l: int) -> np.ndarray:
    """Unitary U with Y_real = U @ Y_complex (Condon-Shortley complex harmonics)."""
    l = _check_degree(l)
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    s2 = 1.0 / math.sqrt(2.0)
    for m in range(-l, l + 1):
        row = m + l
        if m > 0:
            u[row, l + m] = (-1) ** m * s2
            u[row, l - m] = s2
        elif m < 0:
            am = -m
            u[row, l - am] = 1j * s2
            u[row, l + am] = -1j * (-1) ** am * s2
        else:
            u[row, l] = 1.0
    u.setflags(write=False)
    return u


@functools.cache
def _legendre_derivs(l: int):
    """Coefficient arrays of d^m P_l / dz^m for m = 0..l."""
    base = legendre.Legendre.basis(l)
    return tuple(base.deriv(m) if m else base for m in range(l + 1))


def _norm(l: int, m: int) -> float:
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def sph_harm_batch(l: int, vectors) -> np.ndarray:
    """Real spherical harmonics of degree l for an (n, 3) array of unit vectors.

    No normalization check; zero vectors give zero for l > 0.
    """
    l = _check_degree(l)
    v = np.asarray(vectors, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out = np.empty(v.shape[:-1] + (2 * l + 1,))
    derivs = _legendre_derivs(l)
    xy = x + 1j * y
    power = np.ones_like(xy)
    for m in range(l + 1):
        q = derivs[m](z)
        if m == 0:
            out[..., l] = _norm(l, 0) * q
        else:
            power = power * xy
            c = math.sqrt(2.0) * _norm(l, m) * q
            out[..., l + m] = c * power.real
            out[..., l - m] = c * power.imag
    if l > 0:
        out[np.all(v == 0.0, axis=-1)] = 0.0
    return out


def real_sph_harm(l: int, v) -> np.ndarray:
    """Orthonormal real spherical harmonics Y^l(v), length 2l+1, for a unit vector v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ParameterError("expected a finite 3-vector")
    if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
        raise ParameterError(f"vector is not unit length (norm={np.linalg.norm(v)})")
    return sph_harm_batch(l, v[None])[0]


def complex_sph_harm(l: int, v) -> np.ndarray:
    """Condon-Shortley complex harmonics Y_l^m(v), m = -l..l."""
    return real_basis_change(l).conj().T @ sph_harm_batch(l, np.asarray(v)[None])[0]


# ---------------------------------------------------------------------------
# Wigner-D
# ---------------------------------------------------------------------------


def _small_d(l: int, beta: float) -> np.ndarray:
    """Wigner small-d matrix d^l_{m'm}(beta), rows m', columns m."""
    c, s = math.cos(beta / 2.0), math.sin(beta / 2.0)
    f = math.factorial
    d = np.zeros((2 * l + 1, 2 * l + 1))
    for mp in range(-l, l + 1):
        for m in range(-l, l + 1):
            pref = math.sqrt(f(l + mp) * f(l - mp) * f(l + m) * f(l - m))
            total = 0.0
            for k in range(max(0, m - mp), min(l + m, l - mp) + 1):
                den = f(l + m - k) * f(k) * f(l - k - mp) * f(k - m + mp)
                total += (
                    (-1) ** (k - m + mp)
                    * c ** (2 * l - 2 * k + m - mp)
                    * s ** (2 * k - m + mp)
                    / den
                )
            d[mp + l, m + l] = pref * total
    return d


def wigner_d_complex(l: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """D^l_{m'm} = exp(-i m' alpha) d^l_{m'm}(beta) exp(-i m gamma)."""
    ms = np.arange(-l, l + 1)
    return np.exp(-1j * ms * alpha)[:, None] * _small_d(l, beta) * np.exp(-1j * ms * gamma)[None, :]


def wigner_d(l: int, r: Rotation, l_max: int = L_MAX) -> np.ndarray:
    """Real orthogonal (2l+1)x(2l+1) representation of ``r`` on the degree-l basis."""
    l = _check_degree(l, l_max)
    if not isinstance(r, Rotation):
        r = Rotation(np.asarray(r))
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        # (y, z, x) permutation of the Cartesian matrix; exact and cheap.
        p = np.array([1, 2, 0])
        return r.matrix[np.ix_(p, p)].copy()
    alpha, beta, gamma = r.euler_zyz()
    # The Condon-Shortley harmonics obey Y(Rv) = conj(D(R)) Y(v).
    dc = np.conj(wigner_d_complex(l, alpha, beta, gamma))
    u = real_basis_change(l)
    dr = u @ dc @ u.conj().T
    if np.max(np.abs(dr.imag)) > 1e-12:
        raise ArithmeticError(f"real Wigner-D for l={l} has imaginary residue {np.max(np.abs(dr.imag))}")
    return np.ascontiguousarray(dr.real)


def wigner_d_from_euler(l: int, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Analytic real Wigner-D straight from Euler angles (no l = 1 shortcut)."""
    l = _check_degree(l)
    u = real_basis_change(l)
    dr = u @ np.conj(wigner_d_complex(l, alpha, beta, gamma)) @ u.conj().T
    return np.ascontiguousarray(dr.real)


# ---------------------------------------------------------------------------
# Clebsch-Gordan
# ---------------------------------------------------------------------------


def complex_cg(j1: int, m1: int, j2: int, m2: int, j: int, m: int) -> float:
    """<j1 m1; j2 m2 | j m> in the Condon-Shortley phase convention (Racah formula)."""
    if m1 + m2 != m or not abs(j1 - j2) <= j <= j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m) > j:
        return 0.0
    f = math.factorial
    pref = math.sqrt(
        (2 * j + 1)
        * f(j + j1 - j2)
        * f(j - j1 + j2)
        * f(j1 + j2 - j)
        / f(j1 + j2 + j + 1)
    )
    pref *= math.sqrt(f(j + m) * f(j - m) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = 0.0
    for k in range(0, j1 + j2 - j + 1):
        args = (k, j1 + j2 - j - k, j1 - m1 - k, j2 + m2 - k, j - j2 + m1 + k, j - j1 - m2 + k)
        if min(args) < 0:
            continue
        den = 1
        for a in args:
            den *= f(a)
        total += (-1) ** k / den
    return pref * total


def _cg_real_analytic(lp: int, lq: int, l: int) -> np.ndarray:
    cg = np.zeros((2 * l + 1, 2 * lp + 1, 2 * lq + 1))
    for m in range(-l, l + 1):
        for mp in range(-lp, lp + 1):
            mq = m - mp
            if abs(mq) <= lq:
                cg[m + l, mp + lp, mq + lq] = complex_cg(lp, mp, lq, mq, l, m)
    c = np.einsum(
        "Mm,mab,ai,bj->Mij",
        real_basis_change(l),
        cg,
        real_basis_change(lp).conj().T,
        real_basis_change(lq).conj().T,
    )
    flat = c.ravel()
    k = int(np.argmax(np.abs(flat)))
    c = c * (abs(flat[k]) / flat[k])
    if np.max(np.abs(c.imag)) > 1e-12:
        raise ArithmeticError("complex CG did not map to a real basis")
    c = c.real
    return c


def _cg_real_nullspace(lp: int, lq: int, l: int, seed: int = 0) -> np.ndarray:
    """Real CG block from the null space of the equivariance constraint.

    Solves D^l C - C (D^lp x D^lq) = 0 for a few random rotations; the
    solution is unique up to scale and sign, which are fixed by unit
    Frobenius norm times sqrt(2l+1) and a positive largest entry.
    """
    rng = np.random.default_rng(seed)
    dl, dp, dq = 2 * l + 1, 2 * lp + 1, 2 * lq + 1
    rows = []
    for _ in range(4):
        r = random_rotation(rng)
        a = wigner_d(l, r)
        b = np.kron(wigner_d(lp, r), wigner_d(lq, r))
        # vec(A C - C B) with C row-major of shape (dl, dp*dq)
        rows.append(np.kron(a, np.eye(dp * dq)) - np.kron(np.eye(dl), b.T))
    _, s, vt = np.linalg.svd(np.vstack(rows))
    c = vt[-1].reshape(dl, dp, dq)
    c *= math.sqrt(dl) / np.linalg.norm(c)
    flat = c.ravel()
    return c * np.sign(flat[np.argmax(np.abs(flat))])


@functools.cache
def cg_block(lp: int, lq: int, l: int) -> np.ndarray:
    """Real CG coefficients C[m, mp, mq] coupling degrees lp (x) lq -> l."""
    _check_degree(lp)
    _check_degree(lq)
    _check_degree(l)
    if not abs(lp - lq) <= l <= lp + lq:
        raise ParameterError(f"({lp}, {lq}) cannot couple to l={l}")
    try:
        c = _cg_real_analytic(lp, lq, l)
    except ArithmeticError:
        c = _cg_real_nullspace(lp, lq, l)
    c.setflags(write=False)
    return c


@dataclass(frozen=True)
class CGTable:
    """All output degrees of the product lp (x) lq."""

    lp: int
    lq: int
    coefficients: dict

    @property
    def degrees(self) -> range:
        return range(abs(self.lp - self.lq), self.lp + self.lq + 1)

    def matrix(self) -> np.ndarray:
        """Stacked (dp*dq, dp*dq) change of basis, rows ordered by degree."""
        dim = (2 * self.lp + 1) * (2 * self.lq + 1)
        return np.vstack([self.coefficients[l].reshape(-1, dim) for l in self.degrees])


@functools.cache
def cg_table(lp: int, lq: int) -> CGTable:
    for d in (lp, lq, lp + lq):
        _check_degree(d)
    coeffs = {l: cg_block(lp, lq, l) for l in range(abs(lp - lq), lp + lq + 1)}
    return CGTable(lp, lq, coeffs)


# ---------------------------------------------------------------------------
# Hamiltonian blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianBlock:
    lp: int
    lq: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2 * self.lp + 1, 2 * self.lq + 1):
            raise ParameterError(
                f"block shape {m.shape} does not match degrees ({self.lp}, {self.lq})"
            )
        if not np.all(np.isfinite(m)):
            raise ParameterError("block has non-finite entries")
        object.__setattr__(self, "matrix", m)

    def rotated(self, r: Rotation) -> "HamiltonianBlock":
        return HamiltonianBlock(
            self.lp, self.lq, wigner_d(self.lp, r) @ self.matrix @ wigner_d(self.lq, r).T
        )


def cg_decompose(block: HamiltonianBlock) -> dict[int, np.ndarray]:
    """Direct-sum components {l: h^l} of a (lp, lq) block."""
    table = cg_table(block.lp, block.lq)
    return {l: np.einsum("kab,ab->k", c, block.matrix) for l, c in table.coefficients.items()}


def cg_recompose(components: dict, lp: int, lq: int) -> HamiltonianBlock:
    """Inverse of :func:`cg_decompose`."""
    table = cg_table(lp, lq)
    needed = set(table.degrees)
    if set(components) != needed:
        raise ParameterError(
            f"components for degrees {sorted(components)} but ({lp},{lq}) needs {sorted(needed)}"
        )
    out = np.zeros((2 * lp + 1, 2 * lq + 1))
    for l, c in table.coefficients.items():
        h = np.asarray(components[l], dtype=np.float64)
        if h.shape != (2 * l + 1,):
            raise ParameterError(f"component l={l} has shape {h.shape}, expected ({2 * l + 1},)")
        out += np.einsum("kab,k->ab", c, h)
    return HamiltonianBlock(lp, lq, out)


def degree0_invariant(f1, f2) -> float:
    """Degree-0 CG projection of f1 (x) f2, normalized as <f1, f2>/sqrt(2l+1)."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.ndim != 1 or f1.shape != f2.shape or f1.size % 2 == 0:
        raise ParameterError(f"degree mismatch: shapes {f1.shape} and {f2.shape}")
    return float(f1 @ f2) / math.sqrt(f1.size)


@dataclass(frozen=True)
class TraceLabel:
    value: float


def trace_label(block: HamiltonianBlock) -> TraceLabel:
    """tr(H H^T) of a real block, i.e. the squared Frobenius norm."""
    m = block.matrix
    return TraceLabel(float(np.sum(m * m)))
