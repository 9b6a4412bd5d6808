"""Miniature MACE backbone: radial embedding, A/B features, update, readout.

Features are handled as per-order blocks ``{l: (atoms, channels, 2l+1)}``.
Dense arrays over several orders use the flattened ``(l, m)`` axis of size
``(lmax+1)**2`` with order ``l`` occupying columns ``l*l:(l+1)*(l+1)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import FineTunePlan, baseline_variant, effective_weight, mmea_apply, naive_apply
from .data import AtomicFrame, GraphBatch, make_batch
from .irreps import EquivariantFeature, Irreps, clebsch_gordan, monomial_exponents, sh_coefficients
from .params import ParameterStore

SUPPORTED_CORRELATION = (1, 2, 3)

# Harmonics enter messages component-normalized (Y_00 = 1), so edge features
# are O(1); the irreps module keeps the orthonormal convention.
SH_COMPONENT_SCALE = math.sqrt(4.0 * math.pi)


def _silu_second_moment() -> float:
    x, w = np.polynomial.hermite_e.hermegauss(80)
    s = x * np.exp(-np.logaddexp(0.0, -x))
    return float(np.sum(w * s * s) / np.sum(w))


# Radial MLP activation gain: unit second moment for standard normal input.
SILU_GAIN = 1.0 / math.sqrt(_silu_second_moment())


@dataclass
class ModelConfig:
    elements: list[str] = field(default_factory=lambda: ["H", "C", "N", "O"])
    r_cut: float = 5.0
    num_radial: int = 8
    cutoff_p: int = 5
    lmax_input: int = 3
    lmax_hidden: int = 1
    channels: int = 128
    correlation: int = 3
    num_interactions: int = 2
    radial_mlp: list[int] = field(default_factory=lambda: [64, 64, 64])
    readout_hidden: int = 16
    final_readout: str = "mlp"
    avg_num_neighbors: float = 1.0

    def __post_init__(self):
        self.elements = list(self.elements)
        self.radial_mlp = list(self.radial_mlp)
        if self.correlation not in SUPPORTED_CORRELATION:
            raise ValueError(f"correlation must be one of {SUPPORTED_CORRELATION}")
        if not 0 <= self.lmax_hidden <= self.lmax_input <= 3:
            raise ValueError("need 0 <= lmax_hidden <= lmax_input <= 3")
        if not 1 <= self.num_interactions <= 4:
            raise ValueError("num_interactions must be in 1..4")
        for name in ("channels", "num_radial", "readout_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.final_readout not in ("mlp", "linear"):
            raise ValueError("final_readout must be 'mlp' or 'linear'")
        if self.r_cut <= 0 or self.avg_num_neighbors <= 0:
            raise ValueError("r_cut and avg_num_neighbors must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @property
    def hidden_irreps(self) -> Irreps:
        return Irreps.uniform(self.channels, self.lmax_hidden)

    def attach_points(self) -> list[str]:
        return [f"interaction_{t}" for t in range(1, self.num_interactions + 1)]

    def readout_names(self) -> list[str]:
        if self.final_readout == "linear":
            return [f"readout_{t}" for t in range(1, self.num_interactions + 1)]
        names = [f"readout_{t}" for t in range(1, self.num_interactions)]
        return names + ["readout_mlp/W1", "readout_mlp/W2"]

    def equivariant_linear_names(self) -> list[str]:
        out = []
        for t in range(1, self.num_interactions + 1):
            if t > 1:
                out += [f"interaction_{t}/mix_l{l}" for l in range(self.lmax_hidden + 1)]
            out += [f"interaction_{t}/linear_l{l}" for l in range(self.lmax_hidden + 1)]
        return out


# ---------------------------------------------------------------------------
# Constant coupling structures
# ---------------------------------------------------------------------------


def _dim(lmax: int) -> int:
    return (lmax + 1) ** 2


def _block(l: int) -> slice:
    return slice(l * l, (l + 1) * (l + 1))


@dataclass
class ProductBasis:
    """Coupling paths for the B-features, sorted lexicographically per order.

    ``paths`` entries are ``(nu, key, L)`` where ``key`` is ``(l1,)``,
    ``(l1, l2, L)`` or ``(l1, l2, lam, l3, L)``.
    """

    paths: list[tuple]
    stage1: list[tuple[int, int, int]]
    stage1_coupling: ad.Coupling | None
    stage1_select: np.ndarray
    stage2: list[tuple]
    stage2_coupling: ad.Coupling | None
    expand: np.ndarray  # (num_paths, Q)
    reduce: np.ndarray  # (Q, hidden dim)


@lru_cache(maxsize=None)
def product_basis(lmax_in: int, lmax_out: int, nu: int) -> ProductBasis:
    din = _dim(lmax_in)
    paths: list[tuple] = []
    for l1 in range(lmax_out + 1):
        paths.append((1, (l1,), l1))

    stage1, s1_off = [], []
    off = 0
    for l1 in range(lmax_in + 1):
        for l2 in range(lmax_in + 1):
            for lam in range(abs(l1 - l2), min(l1 + l2, lmax_in) + 1):
                stage1.append((l1, l2, lam))
                s1_off.append(off)
                off += 2 * lam + 1
    p1 = off
    C1 = np.zeros((din, din, p1))
    for (l1, l2, lam), o in zip(stage1, s1_off):
        C1[_block(l1), _block(l2), o : o + 2 * lam + 1] = clebsch_gordan(l1, l2, lam)

    select = []
    if nu >= 2:
        for (l1, l2, lam), o in zip(stage1, s1_off):
            if lam <= lmax_out:
                paths.append((2, (l1, l2, lam), lam))
                select.extend(range(o, o + 2 * lam + 1))

    stage2 = []
    C2 = None
    if nu >= 3:
        rows = []
        off2 = 0
        for (l1, l2, lam), o in zip(stage1, s1_off):
            for l3 in range(lmax_in + 1):
                for L in range(abs(lam - l3), min(lam + l3, lmax_out) + 1):
                    stage2.append(((l1, l2, lam), l3, L))
                    rows.append((o, lam, l3, L, off2))
                    paths.append((3, (l1, l2, lam, l3, L), L))
                    off2 += 2 * L + 1
        C2 = np.zeros((p1, din, off2))
        for o, lam, l3, L, o2 in rows:
            C2[o : o + 2 * lam + 1, _block(l3), o2 : o2 + 2 * L + 1] = clebsch_gordan(lam, l3, L)

    # B columns follow the path list order.
    q = sum(2 * L + 1 for *_, L in paths)
    expand = np.zeros((len(paths), q))
    reduce = np.zeros((q, _dim(lmax_out)))
    c = 0
    for p, (_, _, L) in enumerate(paths):
        n = 2 * L + 1
        expand[p, c : c + n] = 1.0
        reduce[c : c + n, _block(L)] = np.eye(n)
        c += n
    return ProductBasis(
        paths=paths,
        stage1=stage1,
        stage1_coupling=ad.Coupling(C1) if nu >= 2 else None,
        stage1_select=np.array(select, dtype=np.intp),
        stage2=stage2,
        stage2_coupling=ad.Coupling(C2) if nu >= 3 else None,
        expand=expand,
        reduce=reduce,
    )


@dataclass
class EdgeBasis:
    """Paths ``(l1 of Y, l2 of h, l3 of A)`` for the general A-features."""

    paths: list[tuple[int, int, int]]
    coupling: ad.Coupling
    expand: np.ndarray  # (num_paths, P)
    reduce: np.ndarray  # (P, dim A)


@lru_cache(maxsize=None)
def edge_basis(lmax_sh: int, h_orders: tuple[int, ...], lmax_a: int) -> EdgeBasis:
    dy, dh, da = _dim(lmax_sh), _dim(max(h_orders)), _dim(lmax_a)
    paths = []
    for l1 in range(lmax_sh + 1):
        for l2 in h_orders:
            for l3 in range(abs(l1 - l2), min(l1 + l2, lmax_a) + 1):
                paths.append((l1, l2, l3))
    P = sum(2 * l3 + 1 for *_, l3 in paths)
    C = np.zeros((dy, dh, P))
    expand = np.zeros((len(paths), P))
    reduce = np.zeros((P, da))
    o = 0
    for p, (l1, l2, l3) in enumerate(paths):
        n = 2 * l3 + 1
        C[_block(l1), _block(l2), o : o + n] = clebsch_gordan(l1, l2, l3)
        expand[p, o : o + n] = 1.0
        reduce[o : o + n, _block(l3)] = np.eye(n)
        o += n
    return EdgeBasis(paths, ad.Coupling(C), expand, reduce)


def _first_layer_expand(lmax: int) -> np.ndarray:
    E = np.zeros((lmax + 1, _dim(lmax)))
    for l in range(lmax + 1):
        E[l, _block(l)] = 1.0
    return E


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def radial_out_dim(config: ModelConfig, t: int) -> int:
    k = config.channels
    if t == 1:
        return k * (config.lmax_input + 1)
    orders = tuple(range(config.lmax_hidden + 1))
    return k * len(edge_basis(config.lmax_input, orders, config.lmax_input).paths)


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Normal weights scaled by ``1/sqrt(fan_in)``; E0 buffer zero."""
    rng = np.random.default_rng(seed)
    k, ne = config.channels, len(config.elements)
    store = ParameterStore()

    def normal(name, shape, fan_in):
        store.add(name, rng.standard_normal(shape) / math.sqrt(fan_in))

    normal("embedding", (ne, k), 1)
    for t in range(1, config.num_interactions + 1):
        pre = f"interaction_{t}"
        sizes = [config.num_radial, *config.radial_mlp, radial_out_dim(config, t)]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            normal(f"{pre}/radial_{i}", (a, b), a)
        if t > 1:
            for l in range(config.lmax_hidden + 1):
                normal(f"{pre}/mix_l{l}", (k, k), k)
        for xi in range(1, config.correlation + 1):
            normal(f"{pre}/product_{xi}", (k, k), k)
        # each path weight scales one B column; fan-in is the paths summed into its order
        out_orders = [L for *_, L in product_basis(config.lmax_input, config.lmax_hidden, config.correlation).paths]
        fan = np.array([out_orders.count(L) for L in out_orders], dtype=float)
        store.add(f"{pre}/message", rng.standard_normal((ne, k, len(out_orders))) / np.sqrt(fan))
        # the first layer has no residual, so an atom without neighbors has zero features
        prev_orders = [] if t == 1 else list(range(config.lmax_hidden + 1))
        for l in range(config.lmax_hidden + 1):
            normal(f"{pre}/linear_l{l}", (k, k), k)
            if l in prev_orders:
                normal(f"{pre}/residual_l{l}", (ne, k, k), k)
    linear_last = config.final_readout == "linear"
    for t in range(1, config.num_interactions + linear_last):
        normal(f"readout_{t}", (k,), k)
    if not linear_last:
        normal("readout_mlp/W1", (k, config.readout_hidden), k)
        normal("readout_mlp/W2", (config.readout_hidden,), config.readout_hidden)
    store.add("buffer/e0", np.zeros(ne), trainable=False)
    return store


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def radial_basis(r, config: ModelConfig):
    """Bessel features times a polynomial envelope; exact zeros beyond r_cut.

    ``r`` has shape ``(E,)`` (array or Var) and the result ``(E, num_radial)``.
    """
    rv = ad.value(r)
    if np.any(np.real(rv) <= 0):
        raise ValueError("radial_basis needs r > 0")
    rc, p = config.r_cut, config.cutoff_p
    n = config.num_radial
    e = rv.shape[0]
    freq = (np.arange(1, n + 1) * math.pi / rc).reshape(1, n)
    r_col = ad.reshape(r, (e, 1))
    bessel = ad.mul(ad.scale(ad.sin(ad.matmul(r_col, freq)), math.sqrt(2.0 / rc)), ad.reciprocal(r_col))
    u = ad.scale(r, 1.0 / rc)
    a, b, c = (p + 1) * (p + 2) / 2.0, p * (p + 2.0), p * (p + 1) / 2.0
    up = ad.power(u, p)
    env = ad.add(
        ad.sub(ad.add(ad.scale(up, -a), 1.0), ad.scale(ad.mul(up, ad.power(u, 2)), c)),
        ad.scale(ad.mul(up, u), b),
    )
    mask = (np.real(rv) < rc).astype(np.float64)
    env = ad.mul(env, mask)
    return ad.mul(bessel, ad.reshape(env, (e, 1)))


def sh_features(unit, lmax: int):
    """Real spherical harmonics of ``(E, 3)`` unit vectors -> ``(E, (lmax+1)**2)``."""
    u = ad.value(unit)
    e = u.shape[0]
    comps = [ad.slice_(unit, (slice(None), slice(i, i + 1))) for i in range(3)]
    powers = []
    for c in comps:
        pw = [None, c]
        for _ in range(2, lmax + 1):
            pw.append(ad.mul(pw[-1], c))
        powers.append(pw)
    cols = []
    ones = np.ones((e, 1), dtype=u.dtype)
    for exps in monomial_exponents(lmax):
        term = None
        for pw, a in zip(powers, exps):
            if a:
                term = pw[a] if term is None else ad.mul(term, pw[a])
        cols.append(ones if term is None else term)
    return ad.matmul(ad.concat(cols, axis=1), sh_coefficients(lmax))


def first_layer_a_features(config, weights, batch: GraphBatch, Y, radial, n: int):
    """Simplified first layer: sum_j R_kl(r) Y_lm(r_hat) W_{k z_j}."""
    k = config.channels
    e = ad.value(Y).shape[0]
    if e == 0:
        return np.zeros((n, k, _dim(config.lmax_input)))
    R = ad.reshape(_radial_mlp(radial, weights, "interaction_1", config), (e, k, config.lmax_input + 1))
    R = ad.matmul(R, _first_layer_expand(config.lmax_input))
    wz = ad.reshape(ad.gather_rows(weights["embedding"], batch.species[batch.senders]), (e, k, 1))
    msg = ad.mul(ad.mul(R, ad.reshape(Y, (e, 1, -1))), wz)
    return ad.scale(ad.scatter_add_rows(msg, batch.receivers, n), 1.0 / config.avg_num_neighbors)


def general_a_features(config, weights, batch: GraphBatch, Y, radial, h: dict, t: int, n: int,
                       plan=None):
    """CG-coupled edge features with learnable radial path weights."""
    k = config.channels
    orders = tuple(sorted(h))
    expected = tuple(range(config.lmax_hidden + 1))
    if orders != expected:
        raise ValueError(f"layer {t}: feature orders {orders} do not match hidden orders {expected}")
    for l in orders:
        if ad.value(h[l]).shape[1:] != (k, 2 * l + 1):
            raise ValueError(f"layer {t}: block l={l} has shape {ad.value(h[l]).shape}")
    e = ad.value(Y).shape[0]
    if e == 0:
        return np.zeros((n, k, _dim(config.lmax_input)))
    basis = edge_basis(config.lmax_input, orders, config.lmax_input)
    mixed = ad.concat(
        [ad.matmul(effective_weight(plan, f"interaction_{t}/mix_l{l}", weights), h[l]) for l in orders],
        axis=-1,
    )
    hj = ad.gather_rows(mixed, batch.senders)
    Yk = ad.mul(ad.reshape(Y, (e, 1, -1)), np.ones((1, k, 1)))
    coupled = ad.contract(Yk, hj, basis.coupling)
    R = ad.reshape(_radial_mlp(radial, weights, f"interaction_{t}", config), (e, k, len(basis.paths)))
    msg = ad.matmul(ad.mul(coupled, ad.matmul(R, basis.expand)), basis.reduce)
    return ad.scale(ad.scatter_add_rows(msg, batch.receivers, n), 1.0 / config.avg_num_neighbors)


def _radial_mlp(radial, weights, prefix, config):
    x = radial
    nl = len(config.radial_mlp) + 1
    for i in range(nl):
        x = ad.matmul(x, weights[f"{prefix}/radial_{i}"])
        if i < nl - 1:
            x = ad.scale(ad.silu(x), SILU_GAIN)
    return x


def b_features(A, weights, config: ModelConfig, t: int, nu: int | None = None):
    """Channel-mixed A factors coupled into body-ordered B-features.

    Returns ``(B, basis)`` with ``B`` of shape ``(atoms, k, Q)``; columns follow
    ``basis.paths``.
    """
    nu = config.correlation if nu is None else nu
    if nu not in SUPPORTED_CORRELATION:
        raise ValueError(f"correlation {nu} not supported")
    basis = product_basis(config.lmax_input, config.lmax_hidden, nu)
    factors = [ad.matmul(weights[f"interaction_{t}/product_{xi}"], A) for xi in range(1, nu + 1)]
    cols = [ad.slice_(factors[0], (..., slice(0, _dim(config.lmax_hidden))))]
    if nu >= 2:
        s1 = ad.contract(factors[0], factors[1], basis.stage1_coupling)
        cols.append(ad.slice_(s1, (..., basis.stage1_select)))
    if nu >= 3:
        cols.append(ad.contract(s1, factors[2], basis.stage2_coupling))
    return ad.concat(cols, axis=-1), basis


def message_and_update(B, basis: ProductBasis, h_prev: dict, weights, config, batch, t: int, plan=None):
    """Element-dependent path expansion of B, then linear update plus residual."""
    n = len(batch.species)
    k = config.channels
    wm = ad.gather_rows(weights[f"interaction_{t}/message"], batch.species)
    wm = ad.matmul(ad.reshape(wm, (n, k, len(basis.paths))), basis.expand)
    m = ad.matmul(ad.mul(wm, B), basis.reduce)
    out = {}
    for L in range(config.lmax_hidden + 1):
        mL = ad.slice_(m, (..., _block(L)))
        hL = ad.matmul(effective_weight(plan, f"interaction_{t}/linear_l{L}", weights), mL)
        if t > 1 and L in h_prev:
            res = ad.gather_rows(weights[f"interaction_{t}/residual_l{L}"], batch.species)
            hL = ad.add(hL, ad.matmul(res, h_prev[L]))
        out[L] = hL
    return out


def readout(h0, weights, config: ModelConfig, t: int):
    """Site energies from the invariant channels ``h0`` of shape ``(atoms, k)``."""
    if t < config.num_interactions or config.final_readout == "linear":
        return ad.matmul(h0, weights[f"readout_{t}"])
    hidden = ad.silu(ad.matmul(h0, weights["readout_mlp/W1"]))
    return ad.matmul(hidden, weights["readout_mlp/W2"])


def apply_attach_point(h: dict, point: str, plan: FineTunePlan | None, weights, config):
    if plan is None or point not in plan.attach_points:
        return h
    prefix = f"adapter/{point}/"
    gate = {name[len(prefix):]: w for name, w in weights.items() if name.startswith(prefix)}
    if plan.method == "mmea":
        return mmea_apply(h, gate, config.hidden_irreps, plan.adapter)
    if plan.method == "adapter-naive":
        return naive_apply(h, gate, config.hidden_irreps)
    return h


@dataclass
class ForwardResult:
    energy: object  # (frames,)
    site_energies: list  # per layer (atoms,)
    features: list  # per layer {l: (atoms, k, 2l+1)}


def forward(config: ModelConfig, weights, batch: GraphBatch, positions=None, plan=None) -> ForwardResult:
    X = batch.positions if positions is None else positions
    n = batch.num_nodes
    k = config.channels
    vec = ad.sub(ad.gather_rows(X, batch.receivers), ad.gather_rows(X, batch.senders))
    e = len(batch.senders)
    if e:
        r = ad.sqrt(ad.sum_(ad.mul(vec, vec), axis=1))
        unit = ad.mul(vec, ad.reshape(ad.reciprocal(r), (e, 1)))
        Y = ad.scale(sh_features(unit, config.lmax_input), SH_COMPONENT_SCALE)
        radial = radial_basis(r, config)
    else:
        Y = np.zeros((0, _dim(config.lmax_input)))
        radial = np.zeros((0, config.num_radial))

    h = {0: ad.reshape(ad.gather_rows(weights["embedding"], batch.species), (n, k, 1))}
    site, feats = [], []
    for t in range(1, config.num_interactions + 1):
        if t == 1:
            A = first_layer_a_features(config, weights, batch, Y, radial, n)
        else:
            A = general_a_features(config, weights, batch, Y, radial, h, t, n, plan)
        B, basis = b_features(A, weights, config, t)
        h = message_and_update(B, basis, h, weights, config, batch, t, plan)
        h = apply_attach_point(h, f"interaction_{t}", plan, weights, config)
        feats.append(h)
        site.append(readout(ad.reshape(h[0], (n, k)), weights, config, t))
    node_e = ad.gather_rows(weights["buffer/e0"], batch.species)
    for s in site:
        node_e = ad.add(node_e, s)
    energy = ad.scatter_add_rows(node_e, batch.node_frame, batch.num_frames)
    return ForwardResult(energy, site, feats)


# ---------------------------------------------------------------------------
# Model wrapper
# ---------------------------------------------------------------------------


@dataclass
class EnergyForces:
    energy: np.ndarray  # per frame, eV
    forces: np.ndarray  # (atoms, 3), eV/A
    site_energies: list[np.ndarray]
    e0: np.ndarray  # per-atom reference energy


class Potential:
    """A backbone plus fine-tuning plan, ready for evaluation."""

    def __init__(self, config: ModelConfig, plan: FineTunePlan | ParameterStore):
        if isinstance(plan, ParameterStore):
            plan = baseline_variant("full", plan, config)
        self.config = config
        self.plan = plan

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Potential":
        return cls(config, init_params(config, seed))

    @property
    def store(self) -> ParameterStore:
        return self.plan.store

    def weights(self) -> dict:
        return dict(self.store.tensors)

    def batch(self, frames: Sequence[AtomicFrame]) -> GraphBatch:
        return make_batch(frames, self.config.elements, self.config.r_cut)

    def forward(self, batch: GraphBatch, weights=None, positions=None) -> ForwardResult:
        return forward(self.config, self.weights() if weights is None else weights, batch, positions, self.plan)

    def energy(self, frames) -> np.ndarray:
        batch = frames if isinstance(frames, GraphBatch) else self.batch(frames)
        return np.asarray(self.forward(batch).energy)

    def energy_and_forces(self, frames) -> EnergyForces:
        batch = frames if isinstance(frames, GraphBatch) else self.batch(frames)
        tape = ad.Tape()
        X = tape.leaf(batch.positions)
        res = self.forward(batch, positions=X)
        total = ad.sum_(res.energy)
        (gX,) = ad.grad(tape, total, [X])
        return EnergyForces(
            energy=np.asarray(ad.value(res.energy)),
            forces=-gX,
            site_energies=[np.asarray(ad.value(s)) for s in res.site_energies],
            e0=self.store["buffer/e0"][batch.species],
        )

    def features(self, frame: AtomicFrame) -> list[EquivariantFeature]:
        """Per-layer node features (after any attached adapter)."""
        res = self.forward(self.batch([frame]))
        layout = self.config.hidden_irreps
        return [EquivariantFeature(layout, {l: np.asarray(v) for l, v in f.items()}) for f in res.features]

    def header(self) -> dict:
        return {"model": self.config.to_dict(), "plan": self.plan.to_dict()}

    @classmethod
    def from_header(cls, header: dict, store: ParameterStore) -> "Potential":
        config = ModelConfig.from_dict(header["model"])
        return cls(config, FineTunePlan.from_dict(header.get("plan"), store))

    def save(self, path, extra: dict | None = None) -> None:
        from .params import save_checkpoint

        save_checkpoint(path, {**self.header(), **(extra or {})}, self.store)

    @classmethod
    def load(cls, path) -> "Potential":
        from .params import load_checkpoint

        header, store = load_checkpoint(path)
        return cls.from_header(header, store)

    def set_e0(self, e0: dict[str, float]) -> None:
        self.store["buffer/e0"] = np.array([e0.get(s, 0.0) for s in self.config.elements])
