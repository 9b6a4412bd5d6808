"""SO(3) representation algebra in a fixed real basis.

Conventions used throughout the package:

* Each order ``l`` block has ``2l+1`` components indexed by ``m = -l..l``.
* Real spherical harmonics are orthonormal on the unit sphere and carry no
  Condon-Shortley sign, so the ``l = 1`` block is ``sqrt(3/4pi) * (y, z, x)``.
  The fixed permutation ``P`` below maps Cartesian ``(x, y, z)`` to that
  ordering, giving ``D^1(R) = P R P^T``.
* Wigner-D matrices act on column vectors: ``Y_l(R r) = D^l(R) Y_l(r)``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Mapping, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg

LMAX_SUPPORTED = 6

# Cartesian (x, y, z) -> real l=1 slots (m=-1, 0, +1) = (y, z, x).
P = np.array(
    [
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
    ]
)


class DegenerateInputError(ValueError):
    """Raised for zero-length directions or coincident atoms."""


class InvalidRotationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Irreps / features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Irreps:
    """Ordered ``(multiplicity, order)`` blocks, one per order, ascending."""

    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        blocks = tuple((int(m), int(l)) for m, l in self.blocks)
        if not blocks:
            raise ValueError("Irreps needs at least one block")
        orders = [l for _, l in blocks]
        if any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError(f"orders must be strictly ascending, got {orders}")
        for m, l in blocks:
            if m < 1 or l < 0:
                raise ValueError(f"invalid block {m}x{l}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def parse(cls, text: str) -> "Irreps":
        """Parse ``"16x0+16x1"``."""
        blocks = []
        for part in text.replace(" ", "").split("+"):
            mul, l = part.split("x")
            blocks.append((int(mul), int(l)))
        return cls(tuple(blocks))

    @classmethod
    def uniform(cls, mult: int, lmax: int) -> "Irreps":
        return cls(tuple((mult, l) for l in range(lmax + 1)))

    def __str__(self) -> str:
        return "+".join(f"{m}x{l}" for m, l in self.blocks)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.blocks)

    @property
    def lmax(self) -> int:
        return self.blocks[-1][1]

    @property
    def orders(self) -> list[int]:
        return [l for _, l in self.blocks]

    @property
    def dim(self) -> int:
        return sum(m * (2 * l + 1) for m, l in self.blocks)

    @property
    def num_mult(self) -> int:
        """Total multiplicity ``M = sum_l m_l``."""
        return sum(m for m, _ in self.blocks)

    def mult(self, l: int) -> int:
        for m, ll in self.blocks:
            if ll == l:
                return m
        return 0


@dataclass
class EquivariantFeature:
    """Per-order blocks ``data[l]`` of shape ``(..., m_l, 2l+1)``.

    Leading axes (e.g. atoms) are allowed; the last two axes are always
    multiplicity and representation.
    """

    layout: Irreps
    data: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.data) != set(self.layout.orders):
            raise ValueError(
                f"blocks {sorted(self.data)} do not match layout {self.layout}"
            )
        for m, l in self.layout:
            block = np.asarray(self.data[l])
            if block.shape[-2:] != (m, 2 * l + 1):
                raise ValueError(
                    f"block l={l} has shape {block.shape}, expected (..., {m}, {2 * l + 1})"
                )
            self.data[l] = block

    @classmethod
    def zeros(cls, layout: Irreps, lead: Sequence[int] = ()) -> "EquivariantFeature":
        return cls(layout, {l: np.zeros((*lead, m, 2 * l + 1)) for m, l in layout})

    @classmethod
    def random(cls, layout: Irreps, rng: np.random.Generator, lead=()) -> "EquivariantFeature":
        return cls(layout, {l: rng.standard_normal((*lead, m, 2 * l + 1)) for m, l in layout})

    @property
    def scalars(self) -> np.ndarray:
        """The ``l = 0`` channel as shape ``(..., m_0)``."""
        return self.data[0][..., 0]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.data[l].reshape(*self.data[l].shape[:-2], -1) for l in self.layout.orders],
            axis=-1,
        )

    def copy(self) -> "EquivariantFeature":
        return EquivariantFeature(self.layout, {l: v.copy() for l, v in self.data.items()})


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def check_rotation(R, tol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"rotation must be 3x3, got {R.shape}")
    err = np.max(np.abs(R @ R.T - np.eye(3)))
    if err > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidRotationError(
            f"not a proper rotation (orthogonality error {err:.2e}, det {np.linalg.det(R):.6f})"
        )
    return R


def random_rotation(seed) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


# ---------------------------------------------------------------------------
# Wigner-D (Ivanic-Ruedenberg recursion)
# ---------------------------------------------------------------------------


def _ir_p(i: int, l: int, a: int, b: int, r1: np.ndarray, prev: np.ndarray) -> float:
    ri1 = r1[i + 1, 2]
    rim1 = r1[i + 1, 0]
    ri0 = r1[i + 1, 1]
    if b == -l:
        return ri1 * prev[a + l - 1, 0] + rim1 * prev[a + l - 1, 2 * l - 2]
    if b == l:
        return ri1 * prev[a + l - 1, 2 * l - 2] - rim1 * prev[a + l - 1, 0]
    return ri0 * prev[a + l - 1, b + l - 1]


def _ir_next(l: int, r1: np.ndarray, prev: np.ndarray) -> np.ndarray:
    out = np.zeros((2 * l + 1, 2 * l + 1))
    for m in range(-l, l + 1):
        for n in range(-l, l + 1):
            d0 = 1.0 if m == 0 else 0.0
            denom = (l + n) * (l - n) if abs(n) < l else (2 * l) * (2 * l - 1)
            u = math.sqrt((l + m) * (l - m) / denom)
            v = 0.5 * math.sqrt((1 + d0) * (l + abs(m) - 1) * (l + abs(m)) / denom) * (1 - 2 * d0)
            w = -0.5 * math.sqrt((l - abs(m) - 1) * (l - abs(m)) / denom) * (1 - d0)
            val = 0.0
            if u != 0.0:
                val += u * _ir_p(0, l, m, n, r1, prev)
            if v != 0.0:
                if m == 0:
                    V = _ir_p(1, l, 1, n, r1, prev) + _ir_p(-1, l, -1, n, r1, prev)
                elif m > 0:
                    d1 = 1.0 if m == 1 else 0.0
                    V = _ir_p(1, l, m - 1, n, r1, prev) * math.sqrt(1 + d1) - _ir_p(
                        -1, l, -m + 1, n, r1, prev
                    ) * (1 - d1)
                else:
                    d1 = 1.0 if m == -1 else 0.0
                    V = _ir_p(1, l, m + 1, n, r1, prev) * (1 - d1) + _ir_p(
                        -1, l, -m - 1, n, r1, prev
                    ) * math.sqrt(1 + d1)
                val += v * V
            if w != 0.0:
                if m > 0:
                    W = _ir_p(1, l, m + 1, n, r1, prev) + _ir_p(-1, l, -m - 1, n, r1, prev)
                else:
                    W = _ir_p(1, l, m - 1, n, r1, prev) - _ir_p(-1, l, -m + 1, n, r1, prev)
                val += w * W
            out[m + l, n + l] = val
    return out


def wigner_d_all(lmax: int, rotation) -> list[np.ndarray]:
    """``[D^0, D^1, ..., D^lmax]`` for one rotation."""
    R = check_rotation(rotation)
    if lmax > LMAX_SUPPORTED:
        raise ValueError(f"lmax={lmax} exceeds supported {LMAX_SUPPORTED}")
    mats = [np.ones((1, 1))]
    if lmax == 0:
        return mats
    r1 = P @ R @ P.T
    mats.append(r1)
    for l in range(2, lmax + 1):
        mats.append(_ir_next(l, r1, mats[-1]))
    return mats


def wigner_d(order: int, rotation) -> np.ndarray:
    if order < 0:
        raise ValueError("order must be non-negative")
    R = check_rotation(rotation)
    if order == 0:
        return np.ones((1, 1))
    if np.array_equal(R, np.eye(3)):
        return np.eye(2 * order + 1)
    return wigner_d_all(order, R)[order]


def apply_group_action(rotation, h: EquivariantFeature) -> EquivariantFeature:
    """Rotate every block on its representation axis; multiplicities untouched."""
    R = check_rotation(rotation)
    if np.array_equal(R, np.eye(3)):
        return h.copy()
    mats = wigner_d_all(h.layout.lmax, R)
    out = {}
    for _, l in h.layout:
        out[l] = h.data[l].copy() if l == 0 else h.data[l] @ mats[l].T
    return EquivariantFeature(h.layout, out)


# ---------------------------------------------------------------------------
# Real spherical harmonics as polynomials in the unit-vector components
# ---------------------------------------------------------------------------


def monomial_exponents(lmax: int) -> list[tuple[int, int, int]]:
    """All ``(a, b, c)`` with ``a + b + c <= lmax``, grouped by degree."""
    out = []
    for deg in range(lmax + 1):
        for a in range(deg, -1, -1):
            for b in range(deg - a, -1, -1):
                out.append((a, b, deg - a - b))
    return out


def _xy_part(m: int) -> dict[tuple[int, int], float]:
    """Re((x+iy)^|m|) for m >= 0, Im((x+iy)^|m|) for m < 0, as {(a, b): coef}."""
    k = abs(m)
    out: dict[tuple[int, int], float] = {}
    for j in range(k + 1):
        # term C(k, j) x^(k-j) (iy)^j ; i^j is real for even j, imaginary for odd
        if (m >= 0 and j % 2 == 0) or (m < 0 and j % 2 == 1):
            sign = (-1) ** (j // 2)
            out[(k - j, j)] = out.get((k - j, j), 0.0) + sign * math.comb(k, j)
    return out


@lru_cache(maxsize=None)
def sh_coefficients(lmax: int) -> np.ndarray:
    """Matrix ``C`` with ``Y(r) = monomials(r) @ C`` for unit ``r``.

    Columns are ordered ``(l=0), (l=1, m=-1..1), ...``.
    """
    if lmax > LMAX_SUPPORTED:
        raise ValueError(f"lmax={lmax} exceeds supported {LMAX_SUPPORTED}")
    exps = monomial_exponents(lmax)
    index = {e: i for i, e in enumerate(exps)}
    C = np.zeros((len(exps), (lmax + 1) ** 2))
    col = 0
    for l in range(lmax + 1):
        leg = np.zeros(l + 1)
        leg[l] = 1.0
        for m in range(-l, l + 1):
            k = abs(m)
            dz = npleg.leg2poly(npleg.legder(leg, k)) if k <= l else np.zeros(1)
            norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - k) / math.factorial(l + k))
            if m != 0:
                norm *= math.sqrt(2.0)
            for (a, b), cxy in _xy_part(m).items():
                for c, cz in enumerate(dz):
                    if cz != 0.0:
                        C[index[(a, b, c)], col] += norm * cxy * cz
            col += 1
    C.setflags(write=False)
    return C


def monomials(direction: np.ndarray, lmax: int) -> np.ndarray:
    direction = np.asarray(direction)
    x, y, z = direction[..., 0], direction[..., 1], direction[..., 2]
    cols = [x**a * y**b * z**c for a, b, c in monomial_exponents(lmax)]
    return np.stack(cols, axis=-1)


def spherical_harmonics(lmax: int, direction) -> list[np.ndarray]:
    """Real orthonormal spherical harmonics, one vector per order.

    ``direction`` may be a single unit 3-vector or a ``(..., 3)`` stack.
    """
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateInputError("zero-length direction")
    if np.any(np.abs(norm - 1.0) > 1e-12):
        raise ValueError("direction must be a unit vector (within 1e-12)")
    Y = monomials(d, lmax) @ sh_coefficients(lmax)
    return [Y[..., l * l : (l + 1) * (l + 1)] for l in range(lmax + 1)]


# ---------------------------------------------------------------------------
# Clebsch-Gordan coefficients
# ---------------------------------------------------------------------------


def _racah(j1: int, m1: int, j2: int, m2: int, J: int, M: int) -> float:
    """Complex-basis CG <j1 m1 j2 m2 | J M> (Condon-Shortley)."""
    if m1 + m2 != M or abs(m1) > j1 or abs(m2) > j2 or abs(M) > J:
        return 0.0
    f = math.factorial
    pre = math.sqrt(
        (2 * J + 1) * f(J + j1 - j2) * f(J - j1 + j2) * f(j1 + j2 - J) / f(j1 + j2 + J + 1)
    )
    pre *= math.sqrt(f(J + M) * f(J - M) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = 0.0
    for k in range(0, j1 + j2 - J + 1):
        terms = (j1 + j2 - J - k, j1 - m1 - k, j2 + m2 - k, J - j2 + m1 + k, J - j1 - m2 + k)
        if min(terms) < 0:
            continue
        den = f(k)
        for t in terms:
            den *= f(t)
        total += (-1) ** k / den
    return pre * total


def real_basis_change(l: int) -> np.ndarray:
    """Unitary ``U`` with ``Y_real = U @ Y_complex`` (rows real m, cols complex mu)."""
    U = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    s = 1 / math.sqrt(2)
    U[l, l] = 1.0
    for m in range(1, l + 1):
        U[l + m, l - m] = s
        U[l + m, l + m] = (-1) ** m * s
        U[l - m, l - m] = 1j * s
        U[l - m, l + m] = -1j * (-1) ** m * s
    return U


_CG_LOCK = threading.Lock()
_CG_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def clebsch_gordan(l1: int, l2: int, l3: int) -> np.ndarray:
    """Real-basis coupling tensor ``C[m1, m2, m3]``; empty when triangle fails.

    ``out_{m3} = sum C[m1, m2, m3] x_{m1} y_{m2}`` is equivariant, and
    ``sum_{m1 m2} C[.,.,m3] C[.,.,m3'] = delta``.
    """
    if min(l1, l2, l3) < 0:
        raise ValueError("orders must be non-negative")
    key = (l1, l2, l3)
    with _CG_LOCK:
        if key in _CG_CACHE:
            return _CG_CACHE[key]
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        C = np.zeros((0, 0, 0))
    else:
        Cc = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
        for m1 in range(-l1, l1 + 1):
            for m2 in range(-l2, l2 + 1):
                M = m1 + m2
                if abs(M) <= l3:
                    Cc[m1 + l1, m2 + l2, M + l3] = _racah(l1, m1, l2, m2, l3, M)
        U1, U2, U3 = (real_basis_change(l) for l in key)
        # x_real = U x_c  =>  x_c = U^H x_real ; out_real = U3 out_c
        Cr = np.einsum("ai,bj,ijk,ck->abc", U1.conj(), U2.conj(), Cc, U3)
        if np.max(np.abs(Cr.real)) >= np.max(np.abs(Cr.imag)):
            C = Cr.real
        else:
            C = Cr.imag
        C = np.where(np.abs(C) < 1e-14, 0.0, C)
    C.setflags(write=False)
    with _CG_LOCK:
        _CG_CACHE.setdefault(key, C)
    return _CG_CACHE[key]


def cg_entries(l1: int, l2: int, l3: int) -> Mapping[tuple[int, int, int], float]:
    """Sparse view ``{(m1, m2, m3): value}`` with m indices from -l."""
    C = clebsch_gordan(l1, l2, l3)
    if C.size == 0:
        return {}
    idx = np.argwhere(C != 0.0)
    return {(a - l1, b - l2, c - l3): float(C[a, b, c]) for a, b, c in idx}
