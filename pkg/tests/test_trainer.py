import math

import numpy as np
import pytest

from mmea.adapters import AdapterConfig, DivergenceError, attach_adapters, baseline_variant
from mmea.data import AtomicFrame, make_batch
from mmea.model import ModelConfig, Potential
from mmea.params import ParameterStore
from mmea.toy import sample
from mmea.trainer import (
    PotentialObjective,
    TrainConfig,
    TrainState,
    apply_update,
    clip_gradients,
    evaluate,
    fit,
    loss,
    read_history,
    train_step,
    write_history,
)


def tiny_config(**kw):
    base = dict(elements=["H", "C", "O"], channels=4, radial_mlp=[8], readout_hidden=4, avg_num_neighbors=4.0)
    base.update(kw)
    return ModelConfig(**base)


class LinearRegression:
    """``y ~ w x`` with a quadratic loss; the batch is the whole data set."""

    def __init__(self, x, y):
        self.x, self.y = np.asarray(x), np.asarray(y)

    def make_batch(self, items):
        idx = np.asarray(items)
        return self.x[idx], self.y[idx]

    def loss(self, weights, batch):
        x, y = batch
        return float(np.mean((weights["w"][0] * x - y) ** 2))

    def loss_and_grad(self, weights, names, batch):
        x, y = batch
        r = weights["w"][0] * x - y
        return float(np.mean(r**2)), {"w": np.array([2.0 * np.mean(r * x)])}


# -- loss ----------------------------------------------------------------------------------


def _labeled(symbols, pos, e, f):
    return AtomicFrame(symbols, pos, e, np.asarray(f, dtype=float))


def test_loss_perfect_is_zero():
    fr = _labeled(["H", "O"], [[0, 0, 0], [1, 0, 0]], -3.0, [[1, 2, 3], [-1, -2, -3]])
    b = make_batch([fr], ["H", "O"], 5.0)
    assert loss(b.energies, b.forces, b, TrainConfig()) == 0.0


def test_loss_energy_unit_case():
    fr = _labeled(["H"], [[0, 0, 0]], -1.0, [[0, 0, 0]])
    b = make_batch([fr], ["H"], 5.0)
    assert loss(np.array([0.0]), b.forces, b, TrainConfig(energy_weight=1.0)) == 1.0


def test_loss_two_frame_oracle():
    a = _labeled(["H", "O"], [[0, 0, 0], [1, 0, 0]], -2.0, np.zeros((2, 3)))
    b = _labeled(["C", "H", "H"], [[0, 0, 0], [1, 0, 0], [0, 1, 0]], 5.0, np.ones((3, 3)))
    batch = make_batch([a, b], ["H", "C", "O"], 5.0)
    energy = np.array([-1.0, 2.0])  # errors 1 and -3
    forces = batch.forces.copy()
    forces[0, 0] += 0.1
    forces[4, 2] -= 0.2
    cfg = TrainConfig(energy_weight=2.0, force_weight=10.0)
    # 2 * ((1/2)^2 + (3/3)^2) / 2 + 10 * (0.01 + 0.04) / 15
    ref = 2.0 * (0.25 + 1.0) / 2 + 10.0 * 0.05 / 15
    assert abs(loss(energy, forces, batch, cfg) - ref) < 1e-15


def test_loss_needs_labels():
    b = make_batch([AtomicFrame(["H"], [[0, 0, 0]])], ["H"], 5.0)
    with pytest.raises(ValueError):
        loss(np.zeros(1), np.zeros((1, 3)), b, TrainConfig())


@pytest.mark.parametrize("kw", [dict(lr=0), dict(batch_size=0), dict(ema_decay=1.0), dict(force_weight=-1),
                                dict(max_epochs=-1), dict(lr_factor=0.0)])
def test_train_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- optimizer ----------------------------------------------------------------------------


def _store(**tensors):
    s = ParameterStore()
    for k, v in tensors.items():
        s.add(k, v)
    return s


def test_zero_gradient_only_weight_decay():
    s = _store(a=np.array([1.0, -2.0]))
    cfg = TrainConfig(lr=0.1, weight_decay=0.01)
    state = TrainState.create(s, cfg)
    apply_update(state, s, {"a": np.zeros(2)}, cfg)
    assert np.array_equal(s["a"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))


def test_clip_halves_norm_200():
    g = {"a": np.array([120.0, 0.0]), "b": np.array([[0.0, 160.0]])}
    clipped, norm = clip_gradients(g, 100.0)
    assert norm == 200.0
    assert np.array_equal(clipped["a"], g["a"] * 0.5) and np.array_equal(clipped["b"], g["b"] * 0.5)
    same, _ = clip_gradients({"a": np.array([3.0, 4.0])}, 100.0)
    assert np.array_equal(same["a"], [3.0, 4.0])


def test_ema_after_one_step():
    s = _store(a=np.array([0.5, 1.5, -1.0]))
    cfg = TrainConfig()
    state = TrainState.create(s, cfg)
    shadow = state.ema["a"].copy()
    apply_update(state, s, {"a": np.array([1.0, -1.0, 0.3])}, cfg)
    assert np.array_equal(state.ema["a"], 0.995 * shadow + (1 - 0.995) * s["a"])


def test_adam_first_step_magnitude():
    s = _store(a=np.array([0.0, 0.0]))
    cfg = TrainConfig(lr=0.01, weight_decay=0.0)
    state = TrainState.create(s, cfg)
    apply_update(state, s, {"a": np.array([3.0, -0.5])}, cfg)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(s["a"], [-0.01, 0.01], rtol=1e-8)


def test_train_step_rejects_nonfinite():
    obj = LinearRegression([1.0], [np.inf])
    s = _store(w=np.array([1.0]))
    state = TrainState.create(s, TrainConfig())
    with pytest.raises(DivergenceError):
        train_step(state, s, obj, obj.make_batch([0]), TrainConfig())


# -- fit ------------------------------------------------------------------------------------


def test_linear_regression_converges():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(40)
    y = 3.0 * x + 0.1 * rng.standard_normal(40)
    w_star = float(np.sum(x * y) / np.sum(x * x))
    obj = LinearRegression(x, y)
    s = _store(w=np.array([0.0]))
    # full-batch steps with light momentum; the default beta1 overshoots for many epochs on a 1-D bowl
    cfg = TrainConfig(lr=0.05, weight_decay=0.0, batch_size=40, valid_batch_size=40, ema_decay=0.5,
                      beta1=0.5, patience=30, max_epochs=400)
    res = fit(obj, s, list(range(40)), list(range(40)), cfg)
    assert abs(res.best["w"][0] - w_star) < 1e-6


def test_fit_max_epochs_one():
    obj = LinearRegression([1.0, 2.0], [1.0, 2.0])
    res = fit(obj, _store(w=np.array([0.0])), [0, 1], [0, 1], TrainConfig(max_epochs=1))
    assert [r["epoch"] for r in res.history] == [0, 1]
    assert math.isnan(res.history[0]["train_loss"])


def test_improving_validation_keeps_lr():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(20)
    obj = LinearRegression(x, 5.0 * x)
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0, patience=1, max_epochs=30, batch_size=20)
    res = fit(obj, _store(w=np.array([0.0])), list(range(20)), list(range(20)), cfg)
    vals = [r["valid_loss"] for r in res.history]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert all(r["lr"] == 1e-3 for r in res.history)


def test_plateau_halves_lr():
    obj = LinearRegression([1.0], [0.0])
    cfg = TrainConfig(lr=0.1, weight_decay=0.0, patience=2, max_epochs=6, ema_decay=0.5)
    res = fit(obj, _store(w=np.array([0.0])), [0], [0], cfg)
    assert [r["lr"] for r in res.history] == [0.1, 0.1, 0.1, 0.05, 0.05, 0.025, 0.025]


def test_fit_requires_data():
    with pytest.raises(ValueError):
        fit(LinearRegression([], []), _store(w=np.zeros(1)), [], [0], TrainConfig())


def test_history_round_trip(tmp_path):
    hist = [{"epoch": 0, "train_loss": math.nan, "valid_loss": 1 / 3, "lr": 0.005},
            {"epoch": 1, "train_loss": 0.1, "valid_loss": 0.2, "lr": 0.0025}]
    write_history(tmp_path / "h.csv", hist)
    back = read_history(tmp_path / "h.csv")
    assert back[1] == hist[1] and back[0]["valid_loss"] == 1 / 3 and math.isnan(back[0]["train_loss"])


@pytest.fixture(scope="module")
def toy_sets():
    frames = sample(12, 0, "A")
    return frames[:8], frames[8:]


def _base(seed=0):
    cfg = tiny_config()
    pot = Potential.create(cfg, seed)
    pot.set_e0({"H": -13.6, "C": -1027.5, "O": -2041.0})
    return pot


def test_mmea_fit_keeps_backbone_and_starts_at_backbone(toy_sets):
    train, valid = toy_sets
    base = _base()
    cfg = TrainConfig(max_epochs=2, batch_size=4)
    plan = attach_adapters(base.store, base.config, AdapterConfig(rank=2))
    pot = Potential(base.config, plan)
    backbone = {n: base.store[n].tobytes() for n in base.store}
    res = fit(PotentialObjective(pot, cfg), plan.store, train, valid, cfg)
    for s in (plan.store, res.best, res.last):
        assert all(s[n].tobytes() == b for n, b in backbone.items())
    ref = PotentialObjective(base, cfg)
    from mmea.trainer import mean_loss

    assert res.history[0]["valid_loss"] == mean_loss(ref, base.store, valid, cfg.valid_batch_size)
    assert evaluate(Potential(base.config, attach_adapters(base.store, base.config, AdapterConfig(rank=2))),
                    valid) == evaluate(base, valid)
    assert any(plan.store[n].tobytes() != np.zeros_like(plan.store[n]).tobytes()
               for n in plan.store.names(trainable=True))


def test_fit_deterministic(toy_sets):
    train, valid = toy_sets
    cfg = TrainConfig(max_epochs=2, batch_size=4, seed=3)
    out = []
    for _ in range(2):
        base = _base()
        plan = baseline_variant("full", base.store, base.config)
        res = fit(PotentialObjective(Potential(base.config, plan), cfg), plan.store, train, valid, cfg)
        out.append(res)
    assert out[0].best.equal(out[1].best)
    assert out[0].history == out[1].history or all(
        (a == b) or (math.isnan(a["train_loss"]) and a["valid_loss"] == b["valid_loss"])
        for a, b in zip(out[0].history, out[1].history)
    )


def test_fit_reduces_loss(toy_sets):
    train, valid = toy_sets
    cfg = TrainConfig(max_epochs=4, batch_size=2, ema_decay=0.5)
    base = _base()
    res = fit(PotentialObjective(base, cfg), base.store, train, valid, cfg)
    assert res.history[-1]["valid_loss"] < res.history[0]["valid_loss"]


def test_divergence_restores_last_good(toy_sets):
    train, valid = toy_sets
    cfg = TrainConfig(max_epochs=3, batch_size=4)

    class Exploding(PotentialObjective):
        calls = 0

        def loss_and_grad(self, weights, names, batch):
            Exploding.calls += 1
            value, g = super().loss_and_grad(weights, names, batch)
            return (math.inf, g) if Exploding.calls > 2 else (value, g)

    base = _base()
    res = fit(Exploding(base, cfg), base.store, train, valid, cfg)
    assert res.diverged and "non-finite" in res.message
    assert len(res.history) == 2
    assert res.last.equal(base.store)


# -- evaluate --------------------------------------------------------------------------------


class Fixed:
    """Stand-in potential returning preset energies and forces."""

    def __init__(self, energy, forces):
        self.e, self.f = np.asarray(energy, float), np.asarray(forces, float)

    def batch(self, frames):
        return make_batch(frames, ["H", "O"], 5.0)

    def energy_and_forces(self, batch):
        class R:
            pass

        r = R()
        r.energy, r.forces = self.e, self.f
        return r


def test_evaluate_perfect():
    fr = _labeled(["H", "O"], [[0, 0, 0], [1, 0, 0]], -3.0, [[1, 2, 3], [-1, -2, -3]])
    m = evaluate(Fixed([-3.0], fr.forces), [fr])
    assert m["E_MAE"] == m["E_RMSE"] == m["F_MAE"] == m["F_RMSE"] == 0.0


def test_evaluate_hand_arithmetic():
    fr = _labeled(["H", "O"], [[0, 0, 0], [1, 0, 0]], -3.0, np.zeros((2, 3)))
    forces = np.zeros((2, 3))
    forces[0, 0], forces[1, 1] = 0.003, -0.004  # eV/A
    m = evaluate(Fixed([-2.99], forces), [fr, AtomicFrame(["H"], [[0, 0, 0]])])
    assert m["n_frames"] == 1 and m["n_skipped"] == 1
    assert abs(m["E_MAE"] - 5.0) < 1e-9 and abs(m["E_RMSE"] - 5.0) < 1e-9  # 10 meV over 2 atoms
    assert abs(m["F_MAE"] - 7.0 / 6) < 1e-9
    assert abs(m["F_RMSE"] - math.sqrt(25.0 / 6)) < 1e-9
    assert m["F_RMSE"] >= m["F_MAE"]


def test_evaluate_unlabeled_only():
    m = evaluate(Fixed([0.0], np.zeros((1, 3))), [AtomicFrame(["H"], [[0, 0, 0]])])
    assert m["E_MAE"] is None and m["n_skipped"] == 1
