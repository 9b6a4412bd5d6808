import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmea import autodiff as ad
from mmea.adapters import (
    AdapterConfig,
    DivergenceError,
    adapter_param_count,
    attach_adapters,
    baseline_variant,
    count_parameters,
    gate_forward,
    init_gate,
    modulate,
    modulate_blocks,
)
from mmea.irreps import EquivariantFeature, Irreps, apply_group_action, random_rotation
from mmea.model import Potential
from mmea.trainer import PotentialObjective, TrainConfig, TrainState, train_step

from conftest import desk_config
from test_model import frame


def rand_feature(rng, layout, lead=(4,)):
    return EquivariantFeature(layout, {l: rng.standard_normal(lead + (m, 2 * l + 1)) for m, l in layout})


def rand_gate(rng, layout, cfg, scale=0.5):
    return {k: scale * rng.standard_normal(v.shape) for k, v in init_gate(layout, cfg).items()}


CONFIGS = [
    AdapterConfig(rank=4, phi="residual"),
    AdapterConfig(rank=4, phi="exp"),
    AdapterConfig(rank=3, shared_high_order=True),
    AdapterConfig(rank=3, input_head_reuse=False, phi="exp"),
    AdapterConfig(rank=2, scalar_modulation=False),
    AdapterConfig(rank=2, high_order_modulation=False),
    AdapterConfig(rank=2, nonlinear_activation=False),
]


# -- gate ---------------------------------------------------------------------------------


def test_zero_gate_gives_zero_gains():
    layout = Irreps.uniform(8, 2)
    cfg = AdapterConfig(rank=4)
    gains = gate_forward(np.random.default_rng(0).standard_normal((5, 8)), init_gate(layout, cfg), layout, cfg)
    assert set(gains) == {0, 1, 2}
    assert all(np.array_equal(g, np.zeros((5, 8))) for g in gains.values())


def test_gate_silu_hand_chain():
    layout = Irreps([(1, 0), (1, 1)])  # m0 = 1, M = 2
    cfg = AdapterConfig(rank=1)
    gate = {"W_down": np.array([[0.7]]), "b_down": np.array([-0.2]),
            "W_up": np.array([[1.5], [-0.4]]), "b_up": np.array([0.1, 0.3])}
    x = 0.9
    z = 0.7 * x - 0.2
    s = z / (1 + math.exp(-z))
    gains = gate_forward(np.array([[x]]), gate, layout, cfg)
    assert abs(gains[0][0, 0] - (1.5 * s + 0.1)) < 1e-15
    assert abs(gains[1][0, 0] - (-0.4 * s + 0.3)) < 1e-15


def test_gate_layout_error():
    layout = Irreps.uniform(8, 1)
    cfg = AdapterConfig()
    with pytest.raises(ValueError, match="scalar channels"):
        gate_forward(np.zeros((2, 5)), init_gate(layout, cfg), layout, cfg)


def test_gate_needs_scalars():
    with pytest.raises(ValueError):
        init_gate(Irreps([(4, 1)]), AdapterConfig())


@pytest.mark.parametrize("kw", [dict(rank=0), dict(phi="tanh"), dict(scalar_modulation=False, high_order_modulation=False)])
def test_adapter_config_rejects(kw):
    with pytest.raises(ValueError):
        AdapterConfig(**kw)


# -- modulation laws ---------------------------------------------------------------------


@pytest.mark.parametrize("phi", ["residual", "exp"])
def test_zero_gains_identity(phi):
    layout = Irreps.uniform(6, 2)
    h = rand_feature(np.random.default_rng(1), layout)
    cfg = AdapterConfig(phi=phi)
    gains = {l: np.zeros((4, 6)) for l in (0, 1, 2)}
    out = modulate(h, gains, cfg)
    for l in (0, 1, 2):
        assert out.data[l].tobytes() == h.data[l].tobytes()


def test_exp_ln2_doubles_row():
    layout = Irreps.uniform(3, 1)
    h = rand_feature(np.random.default_rng(2), layout, lead=())
    g1 = np.zeros(3)
    g1[1] = math.log(2.0)
    out = modulate(h, {0: np.zeros(3), 1: g1}, AdapterConfig(phi="exp"))
    assert np.array_equal(out.data[1][1], 2.0 * h.data[1][1])
    assert np.array_equal(out.data[1][[0, 2]], h.data[1][[0, 2]])


def test_exp_overflow_guard():
    layout = Irreps.uniform(2, 1)
    h = rand_feature(np.random.default_rng(3), layout)
    with pytest.raises(DivergenceError):
        modulate(h, {1: np.full((4, 2), 701.0)}, AdapterConfig(phi="exp"))


def test_modulate_rejects_wrong_gain_width():
    layout = Irreps.uniform(3, 1)
    with pytest.raises(ValueError):
        modulate(rand_feature(np.random.default_rng(0), layout), {1: np.zeros((4, 2))}, AdapterConfig())


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: f"{c.phi}-s{c.shared_high_order}-r{c.input_head_reuse}")
def test_commutation_law(cfg):
    """Modulating then rotating equals rotating then modulating, gains from the gate."""
    rng = np.random.default_rng(4)
    layout = Irreps([(5, 0), (3, 1), (2, 2)])
    worst = 0.0
    for _ in range(100):
        h = rand_feature(rng, layout)
        gate = rand_gate(rng, layout, cfg)
        R = random_rotation(rng)

        def adapt(x):
            return modulate(x, gate_forward(x.data[0][..., 0], gate, layout, cfg), cfg)

        a = adapt(apply_group_action(R, h))
        b = apply_group_action(R, adapt(h))
        worst = max(worst, max(np.abs(a.data[l] - b.data[l]).max() for l in a.data))
    assert worst <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gain_invariance_bitwise(seed):
    rng = np.random.default_rng(seed)
    layout = Irreps.uniform(4, 2)
    cfg = AdapterConfig(rank=3)
    gate = rand_gate(rng, layout, cfg)
    h = rand_feature(rng, layout)
    hr = apply_group_action(random_rotation(rng), h)
    g1 = gate_forward(h.data[0][..., 0], gate, layout, cfg)
    g2 = gate_forward(hr.data[0][..., 0], gate, layout, cfg)
    for l in g1:
        assert g1[l].tobytes() == g2[l].tobytes()


def test_no_mixing_law():
    rng = np.random.default_rng(5)
    layout = Irreps.uniform(5, 2)
    cfg = AdapterConfig(phi="exp")
    h = rand_feature(rng, layout, lead=())
    gains = {l: rng.standard_normal(5) for l in (0, 1, 2)}
    for l in (1, 2):
        for k in range(5):
            data = {j: v.copy() for j, v in h.data.items()}
            data[l][k] = 0.0
            out = modulate(EquivariantFeature(layout, data), gains, cfg).data[l]
            assert np.all(out[k] == 0.0)
            others = [j for j in range(5) if j != k]
            assert np.all(out[others] != 0.0)


def test_modulate_blocks_on_tape():
    layout = Irreps.uniform(2, 1)
    cfg = AdapterConfig()
    tape = ad.Tape()
    h1 = tape.leaf(np.ones((1, 2, 3)))
    g = tape.leaf(np.array([[0.5, -0.25]]))
    out = modulate_blocks({1: h1}, {1: g}, cfg)
    dg, = ad.grad(tape, ad.sum_(out[1]), [g])
    assert np.array_equal(dg, np.full((1, 2), 3.0))
    del layout


# -- plans and budgets --------------------------------------------------------------------


def test_budget_example():
    assert adapter_param_count(Irreps.uniform(128, 1), AdapterConfig(rank=16)) == 6416


@pytest.mark.parametrize("r", [8, 16, 32])
def test_budget_formula(r):
    for layout in (Irreps.uniform(16, 1), Irreps([(7, 0), (3, 1), (2, 2)])):
        m0, M = layout.mult(0), sum(m for m, _ in layout)
        assert adapter_param_count(layout, AdapterConfig(rank=r)) == r * m0 + r + r * M + M


def test_budget_affine_in_rank():
    layout = Irreps.uniform(128, 1)
    c = {r: adapter_param_count(layout, AdapterConfig(rank=r)) for r in (8, 16, 32)}
    assert c[32] - c[16] == 16 * (128 + 1 + 256)
    assert c[32] - 256 == 2 * (c[16] - 256)


def test_attach_counts_and_unknown_point():
    cfg = desk_config()
    store = Potential.create(cfg, 0).store
    plan = attach_adapters(store, cfg, AdapterConfig())
    assert len(plan.store.names(trainable=True)) == 2 * 4
    assert all(n.startswith("adapter/") for n in plan.store.names(trainable=True))
    with pytest.raises(ValueError, match="unknown attach point"):
        attach_adapters(store, cfg, AdapterConfig(attach_points=["interaction_9"]))


def test_parameter_fractions():
    cfg = desk_config()
    store = Potential.create(cfg, 0).store
    full = count_parameters(baseline_variant("full", store, cfg))
    assert full["trainable"] == full["full"] and full["percent"] == 100.0
    ro = count_parameters(baseline_variant("readout", store, cfg))
    mm = count_parameters(baseline_variant("mmea", store, cfg, rank=16))
    lr = count_parameters(baseline_variant("lowrank", store, cfg, rank=16))
    assert ro["percent"] < 1.0
    assert mm["percent"] < lr["percent"]
    assert mm["trainable"] == 2 * (16 * 16 + 16 + 16 * 32 + 32)


@pytest.mark.parametrize("phi", ["residual", "exp"])
def test_identity_at_init(phi):
    cfg = desk_config()
    base = Potential.create(cfg, 0)
    plan = attach_adapters(base.store, cfg, AdapterConfig(phi=phi))
    frames = [frame(np.random.default_rng(6), 5)]
    a, b = base.energy_and_forces(frames), Potential(cfg, plan).energy_and_forces(frames)
    assert a.energy.tobytes() == b.energy.tobytes() and a.forces.tobytes() == b.forces.tobytes()


def test_lowrank_zero_b_identity():
    cfg = desk_config()
    base = Potential.create(cfg, 0)
    plan = baseline_variant("lowrank", base.store, cfg, rank=4)
    assert plan.lowrank_targets == cfg.equivariant_linear_names()
    frames = [frame(np.random.default_rng(7), 5)]
    a, b = base.energy_and_forces(frames), Potential(cfg, plan).energy_and_forces(frames)
    assert a.energy.tobytes() == b.energy.tobytes() and a.forces.tobytes() == b.forces.tobytes()


@pytest.mark.parametrize("method", ["mmea", "readout", "lowrank", "adapter-naive"])
def test_frozen_tensors_get_zero_gradient(method):
    cfg = desk_config()
    store = Potential.create(cfg, 0).store
    plan = baseline_variant(method, store, cfg, rank=4)
    pot = Potential(cfg, plan)
    rng = np.random.default_rng(8)
    frames = []
    for _ in range(2):
        f = frame(rng, 4)
        f.energy, f.forces = float(rng.standard_normal()), rng.standard_normal((4, 3))
        frames.append(f)
    tc = TrainConfig()
    obj = PotentialObjective(pot, tc)
    batch = obj.make_batch(frames)
    before = plan.store.copy()
    state = TrainState.create(plan.store, tc)
    train_step(state, plan.store, obj, batch, tc)
    frozen = plan.store.names(trainable=False)
    assert frozen and all(plan.store[n].tobytes() == before[n].tobytes() for n in frozen)
    moved = [n for n in plan.store.names(trainable=True) if plan.store[n].tobytes() != before[n].tobytes()]
    assert moved
    # the gradient restricted to trainable names equals the same entries of the full gradient
    _, sub = obj.loss_and_grad(before.tensors, before.names(trainable=True), batch)
    _, every = obj.loss_and_grad(before.tensors, before.names(), batch)
    for n, g in sub.items():
        assert np.abs(g - every[n]).max() <= 1e-12 * max(1.0, np.abs(every[n]).max())


def _two_steps(plan, cfg):
    pot = Potential(cfg, plan)
    rng = np.random.default_rng(9)
    frames = []
    for _ in range(2):
        f = frame(rng, 4)
        f.energy, f.forces = float(rng.standard_normal()), rng.standard_normal((4, 3))
        frames.append(f)
    tc = TrainConfig()
    obj = PotentialObjective(pot, tc)
    batch = obj.make_batch(frames)
    before = plan.store.copy()
    state = TrainState.create(plan.store, tc)
    for _ in range(2):
        train_step(state, plan.store, obj, batch, tc)
    return {n: plan.store[n].tobytes() != before[n].tobytes() for n in plan.store.names(trainable=True)}


def test_every_gate_tensor_trains():
    cfg = desk_config()
    plan = attach_adapters(Potential.create(cfg, 0).store, cfg, AdapterConfig(rank=4))
    moved = _two_steps(plan, cfg)
    assert moved and all(moved.values())


def test_all_zero_gate_is_a_saddle():
    # with W_down = 0 as well, z = SiLU(0) = 0 and W_up = 0 block each other's gradient
    cfg = desk_config()
    plan = attach_adapters(Potential.create(cfg, 0).store, cfg, AdapterConfig(rank=4))
    for n in plan.store.names(trainable=True):
        plan.store[n] = np.zeros_like(plan.store[n])
    moved = _two_steps(plan, cfg)
    assert {n.rsplit("/", 1)[1] for n, m in moved.items() if m} == {"b_up"}


def test_unknown_method():
    cfg = desk_config()
    with pytest.raises(ValueError):
        baseline_variant("prefix", Potential.create(cfg, 0).store, cfg)
