"""Analytic 5-atom toy molecule used as a desk-scale labeled dataset.

The molecule has a CH2OH-like topology (atoms C0 O1 H2 H3 H4; H2, H3 on C and
H4 on O).  Energies are Morse bonds plus harmonic angle terms; forces are the
exact negative gradient.  Distribution ``B`` samples geometries around
stretched bonds at a higher temperature, emulating a covariate shift while
keeping the labeling physics fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import AtomicFrame
from .irreps import random_rotation

SYMBOLS = ["C", "O", "H", "H", "H"]

# (i, j, D eV, a 1/A, r0 A)
BONDS = [
    (0, 1, 4.0, 2.0, 1.43),
    (0, 2, 4.3, 1.8, 1.09),
    (0, 3, 4.3, 1.8, 1.09),
    (1, 4, 4.6, 2.2, 0.96),
]
TETRAHEDRAL = math.acos(-1.0 / 3.0)
# (end a, center c, end b, k eV/rad^2, theta0 rad)
ANGLES = [
    (1, 0, 2, 1.2, TETRAHEDRAL),
    (1, 0, 3, 1.2, TETRAHEDRAL),
    (2, 0, 3, 1.0, TETRAHEDRAL),
    (0, 1, 4, 1.5, math.radians(108.5)),
]
# isolated-atom reference energies, eV
ATOM_REF = {"H": -13.6, "C": -1027.5, "O": -2041.0}


@dataclass(frozen=True)
class Distribution:
    temperature: float  # K
    bond_scale: float  # multiplies every r0 of the sampling geometry


DISTRIBUTIONS = {
    "A": Distribution(300.0, 1.0),
    "B": Distribution(600.0, 1.05),
}
SIGMA_300K = 0.05  # A, per-coordinate displacement at 300 K


def oracle(positions: np.ndarray) -> tuple[float, np.ndarray]:
    """Energy (eV) and analytic forces (eV/A) for a ``(5, 3)`` geometry."""
    e, f = interaction_oracle(positions)
    return e + sum(ATOM_REF[s] for s in SYMBOLS), f


def interaction_oracle(positions: np.ndarray) -> tuple[float, np.ndarray]:
    """Bond and angle terms only (no atomic reference energies)."""
    x = np.asarray(positions, dtype=np.float64)
    e = 0.0
    grad = np.zeros_like(x)
    for i, j, D, a, r0 in BONDS:
        d = x[i] - x[j]
        r = np.linalg.norm(d)
        q = math.exp(-a * (r - r0))
        e += D * (1.0 - q) ** 2
        dEdr = 2.0 * D * a * q * (1.0 - q)
        grad[i] += dEdr * d / r
        grad[j] -= dEdr * d / r
    for ia, ic, ib, k, th0 in ANGLES:
        u, v = x[ia] - x[ic], x[ib] - x[ic]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        c = float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
        th = math.acos(c)
        e += k * (th - th0) ** 2
        s = math.sqrt(max(1.0 - c * c, 1e-300))
        dEdth = 2.0 * k * (th - th0)
        du = -(v / (nu * nv) - c * u / nu**2) / s
        dv = -(u / (nu * nv) - c * v / nv**2) / s
        grad[ia] += dEdth * du
        grad[ib] += dEdth * dv
        grad[ic] -= dEdth * (du + dv)
    return float(e), -grad


def equilibrium_geometry(bond_scale: float = 1.0) -> np.ndarray:
    """Stationary point of the oracle (for ``bond_scale = 1``)."""
    d = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1]], dtype=float) / math.sqrt(3.0)
    r = {(i, j): r0 * bond_scale for i, j, _, _, r0 in BONDS}
    x = np.zeros((5, 3))
    x[1] = r[0, 1] * d[0]
    x[2] = r[0, 2] * d[1]
    x[3] = r[0, 3] * d[2]
    perp = d[1] - (d[1] @ d[0]) * d[0]
    perp /= np.linalg.norm(perp)
    th = ANGLES[3][4]
    w = math.cos(th) * (-d[0]) + math.sin(th) * perp
    x[4] = x[1] + r[1, 4] * w
    return x


def sample(n_frames: int, seed: int, distribution: str = "A") -> list[AtomicFrame]:
    """Thermal-like Gaussian displacements, random rotation and translation."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"distribution must be one of {sorted(DISTRIBUTIONS)}")
    dist = DISTRIBUTIONS[distribution]
    rng = np.random.default_rng([seed, ord(distribution)])
    base = equilibrium_geometry(dist.bond_scale)
    sigma = SIGMA_300K * math.sqrt(dist.temperature / 300.0)
    frames = []
    for _ in range(n_frames):
        x = base + sigma * rng.standard_normal(base.shape)
        x = x - x.mean(axis=0)
        R = random_rotation(rng)
        x = x @ R.T + rng.uniform(-1.0, 1.0, size=3)
        e, f = oracle(x)
        frames.append(AtomicFrame(list(SYMBOLS), x, e, f, {"distribution": distribution}))
    return frames
