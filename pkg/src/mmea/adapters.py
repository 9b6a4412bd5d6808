"""Magnitude-modulated equivariant adapters and fine-tuning baselines.

The gate reads only the invariant ``l = 0`` channel and emits one gain per
multiplicity copy of every order.  Scalars are shifted by their gain and each
``l >= 1`` copy is rescaled by ``phi(gain)``; copies are never mixed, so the
adapter commutes with rotations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .irreps import EquivariantFeature, Irreps
from .params import ADAPTER_PREFIX, ParameterStore

PHI_CHOICES = ("residual", "exp")
EXP_OVERFLOW = 700.0

METHOD_ALIASES = {
    "readout-only": "readout",
    "naive-bottleneck": "adapter-naive",
    "equivariant-lowrank-linear": "lowrank",
}
METHODS = ("full", "scratch", "readout", "adapter-naive", "lowrank", "mmea")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class AdapterConfig:
    rank: int = 16
    phi: str = "residual"
    scalar_modulation: bool = True
    high_order_modulation: bool = True
    shared_high_order: bool = False
    input_head_reuse: bool = True
    nonlinear_activation: bool = True
    attach_points: list[str] | None = None

    def __post_init__(self):
        if self.phi == "exponential":
            self.phi = "exp"
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.phi not in PHI_CHOICES:
            raise ValueError(f"phi must be one of {PHI_CHOICES}, got {self.phi!r}")
        if not (self.scalar_modulation or self.high_order_modulation):
            raise ValueError("at least one modulation path must be enabled")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AdapterConfig":
        return cls(**(d or {}))


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------


def gain_layout(layout: Irreps, config: AdapterConfig) -> list[tuple[int, int]]:
    """``(order, rows)`` produced by the up-projection, in row order."""
    rows = []
    if config.scalar_modulation:
        rows.append((0, layout.mult(0)))
    if config.high_order_modulation:
        for m, l in layout:
            if l >= 1:
                rows.append((l, 1 if config.shared_high_order else m))
    return rows


def _heads(layout: Irreps, config: AdapterConfig) -> dict[str, list[tuple[int, int]]]:
    rows = gain_layout(layout, config)
    if config.input_head_reuse:
        return {"": rows}
    heads = {}
    if config.scalar_modulation:
        heads["scalar/"] = [r for r in rows if r[0] == 0]
    if config.high_order_modulation:
        heads["tensor/"] = [r for r in rows if r[0] >= 1]
    return heads


def init_gate(layout: Irreps, config: AdapterConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Gate tensors whose gains are exactly zero at step 0.

    ``W_up`` and both biases start at zero; ``W_down`` is drawn with the
    ``1/sqrt(fan_in)`` rule.  Zeroing ``W_down`` too would leave both weight
    matrices with identically zero gradients, so only ``b_up`` could train.
    """
    m0 = layout.mult(0)
    if m0 == 0:
        raise ValueError("the gate needs a scalar (l=0) channel")
    r = config.rank
    rng = np.random.default_rng(seed)
    out = {}
    for head, rows in _heads(layout, config).items():
        n = sum(c for _, c in rows)
        out[head + "W_down"] = rng.standard_normal((r, m0)) / np.sqrt(m0)
        out[head + "b_down"] = np.zeros(r)
        out[head + "W_up"] = np.zeros((n, r))
        out[head + "b_up"] = np.zeros(n)
    return out


def gate_forward(h0, gate: dict, layout: Irreps, config: AdapterConfig) -> dict[int, object]:
    """Gains per order from the scalar channel ``h0`` of shape ``(..., m0)``.

    Returned gains have shape ``(..., m_l)``, or ``(..., 1)`` when high-order
    gains are shared across multiplicities.
    """
    m0 = layout.mult(0)
    if ad.value(h0).shape[-1] != m0:
        raise ValueError(f"gate expects {m0} scalar channels, got {ad.value(h0).shape[-1]}")
    gains = {}
    for head, rows in _heads(layout, config).items():
        z = ad.add(ad.matmul(h0, ad.transpose(gate[head + "W_down"], (1, 0))), gate[head + "b_down"])
        if config.nonlinear_activation:
            z = ad.silu(z)
        g = ad.add(ad.matmul(z, ad.transpose(gate[head + "W_up"], (1, 0))), gate[head + "b_up"])
        start = 0
        for l, n in rows:
            gains[l] = ad.slice_(g, (..., slice(start, start + n)))
            start += n
    return gains


def _phi(gamma, kind: str):
    if kind == "residual":
        return ad.add(gamma, 1.0)
    if np.any(np.real(ad.value(gamma)) > EXP_OVERFLOW):
        raise DivergenceError("exponential gain overflow (gamma > 700)")
    return ad.exp(gamma)


def modulate_blocks(blocks: dict, gains: dict, config: AdapterConfig) -> dict:
    """Apply gains to ``{l: (..., m_l, 2l+1)}`` blocks (arrays or Vars)."""
    out = {}
    for l, h in blocks.items():
        g = gains.get(l)
        if g is None:
            out[l] = h
            continue
        col = ad.reshape(g, ad.value(g).shape + (1,))
        if l == 0:
            out[l] = ad.add(h, col)
        else:
            out[l] = ad.mul(_phi(col, config.phi), h)
    return out


def modulate(h: EquivariantFeature, gains: dict, config: AdapterConfig) -> EquivariantFeature:
    for m, l in h.layout:
        if l in gains and np.shape(gains[l])[-1] not in (m, 1):
            raise ValueError(f"gain for l={l} has {np.shape(gains[l])[-1]} entries, expected {m}")
    return EquivariantFeature(h.layout, modulate_blocks(dict(h.data), gains, config))


def mmea_apply(blocks: dict, gate: dict, layout: Irreps, config: AdapterConfig) -> dict:
    h0 = ad.reshape(blocks[0], ad.value(blocks[0]).shape[:-1])
    return modulate_blocks(blocks, gate_forward(h0, gate, layout, config), config)


# ---------------------------------------------------------------------------
# Symmetry-breaking bottleneck (ablation)
# ---------------------------------------------------------------------------


def init_naive(layout: Irreps, rank: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Conventional bottleneck over the flattened feature.

    Both projections start random so the map is non-trivial from step 0.
    """
    d = layout.dim
    return {
        "W_down": rng.standard_normal((rank, d)) / np.sqrt(d),
        "b_down": np.zeros(rank),
        "W_up": rng.standard_normal((d, rank)) / np.sqrt(rank),
        "b_up": np.zeros(d),
    }


def naive_apply(blocks: dict, gate: dict, layout: Irreps) -> dict:
    lead = ad.value(blocks[0]).shape[:-2]
    flat = ad.concat(
        [ad.reshape(blocks[l], lead + (m * (2 * l + 1),)) for m, l in layout], axis=-1
    )
    z = ad.silu(ad.add(ad.matmul(flat, ad.transpose(gate["W_down"], (1, 0))), gate["b_down"]))
    flat = ad.add(flat, ad.add(ad.matmul(z, ad.transpose(gate["W_up"], (1, 0))), gate["b_up"]))
    out, start = {}, 0
    for m, l in layout:
        n = m * (2 * l + 1)
        out[l] = ad.reshape(ad.slice_(flat, (..., slice(start, start + n))), lead + (m, 2 * l + 1))
        start += n
    return out


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass
class FineTunePlan:
    """Parameters plus routing: which tensors train and where adapters sit."""

    method: str
    store: ParameterStore
    adapter: AdapterConfig | None = None
    attach_points: list[str] = field(default_factory=list)
    lowrank_targets: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "adapter": self.adapter.to_dict() if self.adapter else None,
            "attach_points": list(self.attach_points),
            "lowrank_targets": list(self.lowrank_targets),
        }

    @classmethod
    def from_dict(cls, d: dict | None, store: ParameterStore) -> "FineTunePlan":
        d = d or {"method": "full"}
        return cls(
            method=d["method"],
            store=store,
            adapter=AdapterConfig.from_dict(d["adapter"]) if d.get("adapter") else None,
            attach_points=list(d.get("attach_points", [])),
            lowrank_targets=list(d.get("lowrank_targets", [])),
        )

    def gate(self, point: str) -> dict:
        prefix = f"{ADAPTER_PREFIX}{point}/"
        return {n[len(prefix):]: self.store[n] for n in self.store.names(prefix=prefix)}

    @property
    def backbone_names(self) -> list[str]:
        return [n for n in self.store.names() if not n.startswith(ADAPTER_PREFIX)]


def _check_points(points, model_config) -> list[str]:
    valid = model_config.attach_points()
    points = valid if points is None else list(points)
    for p in points:
        if p not in valid:
            raise ValueError(f"unknown attach point {p!r}; valid: {valid}")
    return points


def attach_adapters(store: ParameterStore, model_config, config: AdapterConfig, seed: int = 0) -> FineTunePlan:
    """Freeze the backbone and add an identity-at-init MMEA gate per attach point."""
    points = _check_points(config.attach_points, model_config)
    out = store.copy()
    out.freeze_all()
    layout = model_config.hidden_irreps
    for i, p in enumerate(points):
        for name, value in init_gate(layout, config, seed=seed + i).items():
            out.add(f"{ADAPTER_PREFIX}{p}/{name}", value, trainable=True)
    return FineTunePlan("mmea", out, config, points)


def baseline_variant(kind: str, store: ParameterStore, model_config, rank: int = 16, seed: int = 0,
                     attach_points=None) -> FineTunePlan:
    kind = METHOD_ALIASES.get(kind, kind)
    out = store.copy()
    if kind in ("full", "scratch"):
        out.freeze_all()
        out.set_trainable([n for n in out.names() if not n.startswith(ADAPTER_PREFIX)])
        return FineTunePlan(kind, out)
    if kind == "readout":
        out.freeze_all()
        out.set_trainable(model_config.readout_names())
        return FineTunePlan(kind, out)
    if kind == "adapter-naive":
        points = _check_points(attach_points, model_config)
        out.freeze_all()
        rng = np.random.default_rng(seed)
        for p in points:
            for name, value in init_naive(model_config.hidden_irreps, rank, rng).items():
                out.add(f"{ADAPTER_PREFIX}{p}/{name}", value)
        return FineTunePlan(kind, out, AdapterConfig(rank=rank), points)
    if kind == "lowrank":
        points = _check_points(attach_points, model_config)
        out.freeze_all()
        rng = np.random.default_rng(seed)
        targets = [n for n in model_config.equivariant_linear_names() if n.split("/")[0] in points]
        for n in targets:
            k_out, k_in = out[n].shape
            out.add(f"{ADAPTER_PREFIX}{n}/A", rng.standard_normal((rank, k_in)) / np.sqrt(k_in))
            out.add(f"{ADAPTER_PREFIX}{n}/B", np.zeros((k_out, rank)))
        return FineTunePlan(kind, out, AdapterConfig(rank=rank), points, targets)
    if kind == "mmea":
        return attach_adapters(store, model_config, AdapterConfig(rank=rank, attach_points=attach_points), seed=seed)
    raise ValueError(f"unknown fine-tuning method {kind!r}")


def effective_weight(plan: FineTunePlan | None, name: str, weights: dict):
    """Backbone weight plus any low-rank update ``B @ A``."""
    w = weights[name]
    if plan is not None and plan.method == "lowrank" and name in plan.lowrank_targets:
        a = weights[f"{ADAPTER_PREFIX}{name}/A"]
        b = weights[f"{ADAPTER_PREFIX}{name}/B"]
        w = ad.add(w, ad.matmul(b, a))
    return w


def adapter_param_count(layout: Irreps, config: AdapterConfig) -> int:
    return int(sum(v.size for v in init_gate(layout, config).values()))


def count_parameters(plan: FineTunePlan) -> dict:
    s = plan.store
    trainable = s.num_params(s.names(trainable=True))
    full = s.num_params(plan.backbone_names)
    return {
        "method": plan.method,
        "trainable": trainable,
        "total": s.num_params(),
        "full": full,
        "percent": 100.0 * trainable / full,
    }
