"""Weighted energy/force training with AdamW, clipping, EMA and plateau decay.

Force-loss gradients need a mixed second derivative of the energy.  The tape
is first order, so it is applied once more to a complex-perturbed forward
pass: with positions ``x + i*h*u`` and ``u = F - F_ref``, the imaginary part
of every parameter derivative is ``h`` times the directional derivative of
``dE/dx . u``, which is exactly what the force term requires.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import DivergenceError
from .data import AtomicFrame, GraphBatch
from .model import Potential, forward
from .params import ParameterStore

log = logging.getLogger(__name__)

COMPLEX_STEP = 1e-20


@dataclass
class TrainConfig:
    lr: float = 0.005
    energy_weight: float = 1.0
    force_weight: float = 1000.0
    weight_decay: float = 1e-8
    clip_norm: float = 100.0
    batch_size: int = 5
    max_epochs: int = 500
    patience: int = 5
    lr_factor: float = 0.5
    ema_decay: float = 0.995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    valid_batch_size: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "clip_norm", "batch_size", "patience", "eps", "valid_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("energy_weight", "force_weight", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        for name in ("lr_factor", "ema_decay", "beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return cls(**(d or {}))


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------


def loss(energy, forces, batch: GraphBatch, config: TrainConfig) -> float:
    """``w_E mean_f (dE_f/N_f)^2 + w_F mean_{atoms,xyz} (dF)^2``."""
    if batch.energies is None or batch.forces is None:
        raise ValueError("loss needs energy and force labels")
    de = (np.asarray(energy) - batch.energies) / batch.atoms_per_frame
    df = np.asarray(forces) - batch.forces
    return float(config.energy_weight * np.mean(de**2) + config.force_weight * np.mean(df**2))


def evaluate(potential: Potential, frames: Sequence[AtomicFrame], batch_size: int = 50) -> dict:
    """Energy errors in meV/atom and componentwise force errors in meV/A."""
    labeled = [fr for fr in frames if fr.labeled]
    out = {"n_frames": len(labeled), "n_skipped": len(frames) - len(labeled)}
    if not labeled:
        out.update(dict.fromkeys(("E_MAE", "E_RMSE", "F_MAE", "F_RMSE"), None))
        return out
    de, df = [], []
    for s in range(0, len(labeled), batch_size):
        batch = potential.batch(labeled[s : s + batch_size])
        ef = potential.energy_and_forces(batch)
        de.append((ef.energy - batch.energies) / batch.atoms_per_frame)
        df.append((ef.forces - batch.forces).ravel())
    de = 1000.0 * np.concatenate(de)
    df = 1000.0 * np.concatenate(df)
    out.update(
        E_MAE=float(np.mean(np.abs(de))),
        E_RMSE=float(np.sqrt(np.mean(de**2))),
        F_MAE=float(np.mean(np.abs(df))),
        F_RMSE=float(np.sqrt(np.mean(df**2))),
    )
    return out


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


class Objective(Protocol):
    def make_batch(self, items: Sequence): ...

    def loss(self, weights: dict, batch) -> float: ...

    def loss_and_grad(self, weights: dict, names: Sequence[str], batch) -> tuple[float, dict]: ...


class PotentialObjective:
    """Energy/force loss of a :class:`Potential` over frames."""

    def __init__(self, potential: Potential, config: TrainConfig):
        self.potential = potential
        self.config = config

    def make_batch(self, frames):
        return self.potential.batch(frames)

    def _forces(self, weights, batch):
        tape = ad.Tape()
        X = tape.leaf(batch.positions)
        res = forward(self.potential.config, weights, batch, X, self.potential.plan)
        (gX,) = ad.grad(tape, ad.sum_(res.energy), [X])
        return np.asarray(ad.value(res.energy)), -gX

    def loss(self, weights, batch) -> float:
        e, f = self._forces(weights, batch)
        return loss(e, f, batch, self.config)

    def loss_and_grad(self, weights, names, batch):
        cfg = self.config
        e, f = self._forces(weights, batch)
        value = loss(e, f, batch, cfg)
        if not math.isfinite(value):
            return value, {}
        n = batch.atoms_per_frame
        c = 2.0 * cfg.energy_weight * (e - batch.energies) / (n**2 * batch.num_frames)
        kappa = 2.0 * cfg.force_weight / (3 * batch.num_nodes)
        u = f - batch.forces

        tape = ad.Tape()
        w = dict(weights)
        leaves = {nm: tape.leaf(weights[nm]) for nm in names}
        w.update(leaves)
        Xc = batch.positions + 1j * COMPLEX_STEP * u
        res = forward(self.potential.config, w, batch, Xc, self.potential.plan)
        seed = c + 1j * kappa / COMPLEX_STEP
        root = ad.sum_(ad.mul(res.energy, seed))
        grads = ad.backward(tape, root)
        out = {}
        for nm, leaf in leaves.items():
            g = grads.get(leaf.id)
            out[nm] = np.zeros_like(weights[nm]) if g is None else np.real(g).copy()
        return value, out


# ---------------------------------------------------------------------------
# Optimizer state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    names: list[str]
    lr: float
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)
    best_valid: float = math.inf
    bad_epochs: int = 0

    @classmethod
    def create(cls, store: ParameterStore, config: TrainConfig) -> "TrainState":
        names = store.names(trainable=True)
        return cls(
            names=names,
            lr=config.lr,
            m={n: np.zeros_like(store[n]) for n in names},
            v={n: np.zeros_like(store[n]) for n in names},
            ema={n: store[n].copy() for n in names},
        )

    def ema_store(self, store: ParameterStore) -> ParameterStore:
        out = store.copy()
        for n in self.names:
            out[n] = self.ema[n].copy()
        return out


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {n: g * s for n, g in grads.items()}
    return grads, norm


def apply_update(state: TrainState, store: ParameterStore, grads: dict, config: TrainConfig) -> None:
    """One AdamW step on trainable tensors followed by the EMA update."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    d = config.ema_decay
    for n in state.names:
        g = grads[n]
        state.m[n] = b1 * state.m[n] + (1.0 - b1) * g
        state.v[n] = b2 * state.v[n] + (1.0 - b2) * g * g
        p = store[n] * (1.0 - state.lr * config.weight_decay)
        p = p - state.lr * (state.m[n] / c1) / (np.sqrt(state.v[n] / c2) + config.eps)
        store[n] = p
        state.ema[n] = d * state.ema[n] + (1.0 - d) * p


def train_step(state: TrainState, store: ParameterStore, objective, batch, config: TrainConfig) -> dict:
    weights = dict(store.tensors)
    value, grads = objective.loss_and_grad(weights, state.names, batch)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise DivergenceError(f"non-finite loss or gradient at step {state.step + 1}")
    grads, norm = clip_gradients(grads, config.clip_norm)
    apply_update(state, store, grads, config)
    return {"loss": value, "grad_norm": norm}


def mean_loss(objective, store_or_weights, items: Sequence, batch_size: int) -> float:
    weights = dict(store_or_weights.tensors) if isinstance(store_or_weights, ParameterStore) else store_or_weights
    total, count = 0.0, 0
    for s in range(0, len(items), batch_size):
        chunk = items[s : s + batch_size]
        total += objective.loss(weights, objective.make_batch(chunk)) * len(chunk)
        count += len(chunk)
    return total / count


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    best: ParameterStore  # EMA weights at the best validation loss
    last: ParameterStore  # raw weights after the final step
    history: list[dict]
    best_epoch: int
    diverged: bool = False
    message: str = ""


def fit(objective, store: ParameterStore, train: Sequence, valid: Sequence, config: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Epoch loop with EMA validation, plateau halving and best-EMA tracking.

    ``store`` is updated in place. Validation at epoch 0 uses the initial
    weights so an identity-initialized adapter reproduces the backbone.
    """
    if not train or not valid:
        raise ValueError("fit needs nonempty train and valid sets")
    state = TrainState.create(store, config)
    rng = np.random.default_rng(config.seed)
    v0 = mean_loss(objective, state.ema_store(store), valid, config.valid_batch_size)
    history = [{"epoch": 0, "train_loss": math.nan, "valid_loss": v0, "lr": state.lr}]
    state.best_valid = v0
    best, best_epoch = state.ema_store(store), 0
    last_good = store.copy()
    if on_epoch:
        on_epoch(history[-1])
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        try:
            for s in range(0, len(order), config.batch_size):
                batch = objective.make_batch([train[k] for k in order[s : s + config.batch_size]])
                losses.append(train_step(state, store, objective, batch, config)["loss"])
            ema = state.ema_store(store)
            val = mean_loss(objective, ema, valid, config.valid_batch_size)
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        except DivergenceError as exc:
            log.error("divergence: %s", exc)
            for n in last_good:
                store[n] = last_good[n]
            return FitResult(best, last_good, history, best_epoch, True, str(exc))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": val, "lr": state.lr}
        history.append(row)
        if val < state.best_valid:
            state.best_valid, state.bad_epochs = val, 0
            best, best_epoch = ema, epoch
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= config.patience:
                state.lr *= config.lr_factor
                state.bad_epochs = 0
        last_good = store.copy()
        if on_epoch:
            on_epoch(row)
    return FitResult(best, store.copy(), history, best_epoch)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "valid_loss", "lr"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in w.fieldnames})


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in ("train_loss", "valid_loss", "lr")}}
            for r in csv.DictReader(f)
        ]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
