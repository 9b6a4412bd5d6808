"""Equivariance certification, feature-angle comparison and adapter timing."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, gate_forward, init_gate, modulate_blocks
from .data import AtomicFrame
from .irreps import EquivariantFeature, apply_group_action, random_rotation
from .model import Potential, forward

log = logging.getLogger(__name__)

ENERGY_TOL = 1e-9  # relative
FORCE_TOL = 1e-8  # eV/A, infinity norm
FEATURE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Equivariance
# ---------------------------------------------------------------------------


def random_frame(elements: Sequence[str], rng: np.random.Generator, n_min: int = 3, n_max: int = 6,
                 min_dist: float = 0.8) -> AtomicFrame:
    """Random compact geometry with no two atoms closer than ``min_dist``."""
    n = int(rng.integers(n_min, n_max + 1))
    pos = []
    while len(pos) < n:
        p = rng.normal(scale=1.2, size=3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pos):
            pos.append(p)
    symbols = [str(s) for s in rng.choice(list(elements), size=n)]
    return AtomicFrame(symbols, np.array(pos))


def _evaluate(potential: Potential, frame: AtomicFrame):
    batch = potential.batch([frame])
    tape = ad.Tape()
    X = tape.leaf(batch.positions)
    res = forward(potential.config, potential.weights(), batch, X, potential.plan)
    (g,) = ad.grad(tape, ad.sum_(res.energy), [X])
    feats = [{l: np.asarray(ad.value(v)) for l, v in f.items()} for f in res.features]
    return float(ad.value(res.energy)[0]), -g, feats


@dataclass
class EquivarianceReport:
    trials: int
    energy_drift: float  # max |E(Rx) - E(x)|
    energy_rel_drift: float  # max |E(Rx) - E(x)| / max(|E(x)|, 1e-300)
    force_drift: float  # max ||F(Rx) - R F(x)||_inf
    layer_drift: list[float]
    tolerances: dict = field(default_factory=dict)
    passed: bool = True
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def verify_equivariance(potential: Potential, trials: int, seed: int = 0,
                        frames: Sequence[AtomicFrame] | None = None,
                        energy_tol: float = ENERGY_TOL, force_tol: float = FORCE_TOL,
                        feature_tol: float = FEATURE_TOL) -> EquivarianceReport:
    """Compare outputs on ``(x, R x)`` pairs; frames are random unless given."""
    rng = np.random.default_rng(seed)
    layout = potential.config.hidden_irreps
    nl = potential.config.num_interactions
    e_abs = e_rel = f_max = 0.0
    layers = [0.0] * nl
    for k in range(trials):
        frame = frames[k % len(frames)] if frames else random_frame(potential.config.elements, rng)
        R = random_rotation(rng)
        e1, f1, h1 = _evaluate(potential, frame)
        e2, f2, h2 = _evaluate(potential, frame.transformed(R))
        d = abs(e2 - e1)
        e_abs = max(e_abs, d)
        e_rel = max(e_rel, d / max(abs(e1), 1e-300))
        f_max = max(f_max, float(np.max(np.abs(f2 - f1 @ R.T))))
        for t in range(nl):
            expect = apply_group_action(R, EquivariantFeature(layout, h1[t]))
            dev = max(float(np.max(np.abs(h2[t][l] - expect.data[l]))) for l in h1[t])
            layers[t] = max(layers[t], dev)
    report = EquivarianceReport(
        trials, e_abs, e_rel, f_max, layers,
        {"energy_rel": energy_tol, "force": force_tol, "feature": feature_tol},
    )
    if trials == 0:
        report.warnings.append("zero trials: nothing was checked")
        log.warning("verify_equivariance called with zero trials")
    report.passed = e_rel <= energy_tol and f_max <= force_tol and all(x <= feature_tol for x in layers)
    return report


# ---------------------------------------------------------------------------
# Angular deviation
# ---------------------------------------------------------------------------


@dataclass
class LayerDeviation:
    layer: str
    mean_deg: float
    median_deg: float
    count: int
    skipped: int


def _angles(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, int]:
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    ok = (nx > 0) & (ny > 0)
    xu = x[ok] / nx[ok, None]
    yu = y[ok] / ny[ok, None]
    # 2 atan2(|x-y|, |x+y|) is exact at 0 and 180 degrees and symmetric in x, y
    theta = 2.0 * np.arctan2(np.linalg.norm(xu - yu, axis=-1), np.linalg.norm(xu + yu, axis=-1))
    return np.degrees(theta), int(np.sum(~ok))


def _node_vectors(feats: dict) -> np.ndarray:
    """``(atoms, channels, sum_l (2l+1))``: one vector per atom and channel."""
    return np.concatenate([feats[l] for l in sorted(feats)], axis=-1)


def angular_deviation(a: Potential, b: Potential, frames: Sequence[AtomicFrame],
                      layers: Sequence[str] | None = None, batch_size: int = 50) -> list[LayerDeviation]:
    """Angle between corresponding per-channel feature vectors of two models."""
    if a.config.hidden_irreps != b.config.hidden_irreps or a.config.num_interactions != b.config.num_interactions:
        raise ValueError("checkpoints have different feature layouts")
    if a.config.elements != b.config.elements:
        raise ValueError("checkpoints use different element lists")
    points = a.config.attach_points()
    layers = list(points if layers is None else layers)
    for name in layers:
        if name not in points:
            raise ValueError(f"unknown layer {name!r}; valid: {points}")
    thetas = {name: [] for name in layers}
    skipped = dict.fromkeys(layers, 0)
    for s in range(0, len(frames), batch_size):
        batch = a.batch(frames[s : s + batch_size])
        fa = a.forward(batch).features
        fb = b.forward(batch).features
        for name in layers:
            t = points.index(name)
            th, sk = _angles(_node_vectors(fa[t]), _node_vectors(fb[t]))
            thetas[name].append(th)
            skipped[name] += sk
    out = []
    for name in layers:
        th = np.concatenate(thetas[name]) if thetas[name] else np.zeros(0)
        out.append(
            LayerDeviation(
                name,
                float(np.mean(th)) if th.size else math.nan,
                float(np.median(th)) if th.size else math.nan,
                int(th.size),
                skipped[name],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Overhead benchmark
# ---------------------------------------------------------------------------


@dataclass
class LinearFit:
    slope: float | None
    intercept: float | None
    r2: float | None
    note: str = ""


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(x)) < 2:
        return LinearFit(None, None, None, "slope undefined: fewer than two distinct ranks")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


@dataclass
class OverheadResult:
    mode: str
    ranks: list[int]
    median_s: list[float]
    q1_s: list[float]
    q3_s: list[float]
    fit: LinearFit
    nodes: int
    repetitions: int

    def to_dict(self) -> dict:
        return asdict(self)


def _adapter_pass(h: dict, gate: dict, layout, config: AdapterConfig) -> dict:
    h0 = h[0][..., 0]
    return modulate_blocks(h, gate_forward(h0, gate, layout, config), config)


def overhead_benchmark(potential: Potential, ranks: Sequence[int], repetitions: int = 20,
                       nodes: int = 20000, warmup: int = 3, seed: int = 0, enabled: bool = True,
                       phi: str = "residual") -> OverheadResult:
    """Median wall time of one adapter pass (gate + modulation) per rank.

    Features for ``nodes`` atoms are drawn at random in the model's hidden
    layout; with ``enabled=False`` the pass is the identity so per-rank times
    should coincide.
    """
    if not ranks:
        raise ValueError("ranks must be nonempty")
    rng = np.random.default_rng(seed)
    layout = potential.config.hidden_irreps
    h = {l: rng.standard_normal((nodes, layout.mult(l), 2 * l + 1)) for l in layout.orders}
    med, q1, q3 = [], [], []
    for r in ranks:
        cfg = AdapterConfig(rank=int(r), phi=phi)
        gate = {name: 0.1 * rng.standard_normal(v.shape) for name, v in init_gate(layout, cfg).items()}
        times = []
        for k in range(warmup + repetitions):
            t0 = time.perf_counter()
            if enabled:
                _adapter_pass(h, gate, layout, cfg)
            else:
                dict(h)
            dt = time.perf_counter() - t0
            if k >= warmup:
                times.append(dt)
        a, m, b = np.percentile(times, [25, 50, 75])
        q1.append(float(a))
        med.append(float(m))
        q3.append(float(b))
    return OverheadResult(
        "adapter" if enabled else "disabled",
        [int(r) for r in ranks], med, q1, q3, linear_fit(ranks, med), nodes, repetitions,
    )
