"""Molecular frames: extended-XYZ I/O, neighbor lists, E0 statistics, splits."""

from __future__ import annotations

import io
import logging
import shlex
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .irreps import DegenerateInputError

log = logging.getLogger(__name__)

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe"
).split()
ATOMIC_NUMBERS = {s: z for z, s in enumerate(SYMBOLS) if z > 0}


class ExtXYZError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass
class AtomicFrame:
    symbols: list[str]
    positions: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.symbols) != len(self.positions):
            raise ValueError("symbols and positions disagree on atom count")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite positions")
        for s in self.symbols:
            if s not in ATOMIC_NUMBERS:
                raise ValueError(f"unknown element {s!r}")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != self.positions.shape:
                raise ValueError(
                    f"forces shape {self.forces.shape} != positions {self.positions.shape}"
                )
        if self.energy is not None:
            self.energy = float(self.energy)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def numbers(self) -> np.ndarray:
        return np.array([ATOMIC_NUMBERS[s] for s in self.symbols], dtype=int)

    @property
    def labeled(self) -> bool:
        return self.energy is not None and self.forces is not None

    def transformed(self, rotation=None, shift=None) -> "AtomicFrame":
        """Copy with positions (and forces) rotated then shifted."""
        pos = self.positions
        forces = self.forces
        if rotation is not None:
            pos = pos @ np.asarray(rotation).T
            if forces is not None:
                forces = forces @ np.asarray(rotation).T
        if shift is not None:
            pos = pos + np.asarray(shift)
        return AtomicFrame(list(self.symbols), pos, self.energy, forces, dict(self.info))


# ---------------------------------------------------------------------------
# Extended XYZ
# ---------------------------------------------------------------------------

_BASE_PROPS = ["species", "S", "1", "pos", "R", "3"]


def _parse_properties(spec: str, lineno: int) -> bool:
    """Return True when a forces column group is declared."""
    parts = spec.split(":")
    if len(parts) % 3 or parts[:6] != _BASE_PROPS:
        raise ExtXYZError(f"malformed Properties {spec!r}", lineno)
    rest = parts[6:]
    if not rest:
        return False
    if rest == ["forces", "R", "3"]:
        return True
    raise ExtXYZError(f"unsupported Properties columns {':'.join(rest)!r}", lineno)


def _parse_comment(line: str, lineno: int) -> dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ExtXYZError(f"bad comment line: {exc}", lineno) from None
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ExtXYZError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _float(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ExtXYZError(f"non-numeric field {tok!r}", lineno) from None


def parse_extxyz(text: str | bytes) -> list[AtomicFrame]:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = i + 1
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise ExtXYZError(f"expected atom count, got {lines[i]!r}", head) from None
        if n < 1:
            raise ExtXYZError("atom count must be positive", head)
        if i + 1 >= len(lines):
            raise ExtXYZError("missing comment line", head + 1)
        kv = _parse_comment(lines[i + 1], head + 1)
        has_forces = _parse_properties(kv.get("Properties", ":".join(_BASE_PROPS)), head + 1)
        energy = _float(kv["energy"], head + 1) if "energy" in kv else None
        ncols = 7 if has_forces else 4
        symbols, pos, frc = [], [], []
        for k in range(n):
            lineno = i + 3 + k
            if i + 2 + k >= len(lines):
                raise ExtXYZError(f"atom count mismatch: expected {n} atom lines", lineno)
            toks = lines[i + 2 + k].split()
            if len(toks) != ncols:
                raise ExtXYZError(f"expected {ncols} columns, got {len(toks)}", lineno)
            symbols.append(toks[0])
            pos.append([_float(t, lineno) for t in toks[1:4]])
            if has_forces:
                frc.append([_float(t, lineno) for t in toks[4:7]])
        info = {k: v for k, v in kv.items() if k not in ("energy", "Properties")}
        try:
            frames.append(
                AtomicFrame(symbols, np.array(pos), energy, np.array(frc) if has_forces else None, info)
            )
        except ValueError as exc:
            raise ExtXYZError(str(exc), head) from None
        i += n + 2
    return frames


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_extxyz(frames: Iterable[AtomicFrame]) -> str:
    buf = io.StringIO()
    for fr in frames:
        props = ":".join(_BASE_PROPS + (["forces", "R", "3"] if fr.forces is not None else []))
        head = []
        if fr.energy is not None:
            head.append(f"energy={_fmt(fr.energy)}")
        head.append(f"Properties={props}")
        for k, v in fr.info.items():
            head.append(f"{k}={shlex.quote(str(v))}")
        buf.write(f"{len(fr)}\n{' '.join(head)}\n")
        for a, s in enumerate(fr.symbols):
            cols = [s] + [_fmt(v) for v in fr.positions[a]]
            if fr.forces is not None:
                cols += [_fmt(v) for v in fr.forces[a]]
            buf.write(" ".join(cols) + "\n")
    return buf.getvalue()


def read_extxyz(path) -> list[AtomicFrame]:
    with open(path, "rb") as f:
        return parse_extxyz(f.read())


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass
class AtomicGraph:
    frame: AtomicFrame
    r_cut: float
    senders: np.ndarray  # j
    receivers: np.ndarray  # i
    vectors: np.ndarray  # x_i - x_j
    lengths: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.senders)

    @property
    def unit_vectors(self) -> np.ndarray:
        return self.vectors / self.lengths[:, None]


def build_graph(frame: AtomicFrame, r_cut: float) -> AtomicGraph:
    """Exact all-pairs neighbor list, edges sorted by (receiver, sender)."""
    if r_cut <= 0:
        raise ValueError("r_cut must be positive")
    x = frame.positions
    diff = x[:, None, :] - x[None, :, :]  # [i, j] = x_i - x_j
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = len(x)
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] < 1e-8):
        i, j = np.argwhere((dist < 1e-8) & off)[0]
        raise DegenerateInputError(f"atoms {i} and {j} coincide")
    recv, send = np.nonzero((dist <= r_cut) & off)
    return AtomicGraph(frame, float(r_cut), send, recv, diff[recv, send], dist[recv, send])


@dataclass
class GraphBatch:
    """Several frames merged into one disjoint graph."""

    species: np.ndarray  # per-atom index into the model's element list
    positions: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    node_frame: np.ndarray
    num_frames: int
    atoms_per_frame: np.ndarray
    energies: np.ndarray | None
    forces: np.ndarray | None

    @property
    def num_nodes(self) -> int:
        return len(self.species)


def make_batch(frames: Sequence[AtomicFrame], elements: Sequence[str], r_cut: float) -> GraphBatch:
    index = {s: k for k, s in enumerate(elements)}
    species, pos, send, recv, node_frame = [], [], [], [], []
    offset = 0
    for f, fr in enumerate(frames):
        try:
            species.extend(index[s] for s in fr.symbols)
        except KeyError as exc:
            raise ValueError(f"element {exc.args[0]} not in model elements {list(elements)}") from None
        g = build_graph(fr, r_cut)
        pos.append(fr.positions)
        send.append(g.senders + offset)
        recv.append(g.receivers + offset)
        node_frame.extend([f] * len(fr))
        offset += len(fr)
    labeled = all(fr.labeled for fr in frames)
    return GraphBatch(
        species=np.array(species, dtype=np.intp),
        positions=np.concatenate(pos),
        senders=np.concatenate(send).astype(np.intp),
        receivers=np.concatenate(recv).astype(np.intp),
        node_frame=np.array(node_frame, dtype=np.intp),
        num_frames=len(frames),
        atoms_per_frame=np.array([len(fr) for fr in frames]),
        energies=np.array([fr.energy for fr in frames]) if labeled else None,
        forces=np.concatenate([fr.forces for fr in frames]) if labeled else None,
    )


def average_num_neighbors(frames: Sequence[AtomicFrame], r_cut: float) -> float:
    edges = sum(build_graph(fr, r_cut).num_edges for fr in frames)
    atoms = sum(len(fr) for fr in frames)
    return edges / atoms


# ---------------------------------------------------------------------------
# Statistics and splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetStats:
    e0: dict[str, float]
    counts: dict[str, int]
    mode: str  # "least-squares" or "uniform-fallback"


def compute_e0(frames: Sequence[AtomicFrame], elements: Sequence[str] | None = None) -> DatasetStats:
    """Per-element reference energies by least squares on composition."""
    labeled = [fr for fr in frames if fr.energy is not None]
    if not labeled:
        raise ValueError("compute_e0 needs at least one labeled frame")
    if elements is None:
        elements = sorted({s for fr in labeled for s in fr.symbols}, key=ATOMIC_NUMBERS.get)
    elements = list(elements)
    X = np.array([[fr.symbols.count(e) for e in elements] for fr in labeled], dtype=float)
    y = np.array([fr.energy for fr in labeled])
    counts = {e: int(X[:, k].sum()) for k, e in enumerate(elements)}
    present = X.sum(axis=0) > 0
    Xp = X[:, present]
    if np.linalg.matrix_rank(Xp) == Xp.shape[1]:
        sol, *_ = np.linalg.lstsq(Xp, y, rcond=None)
        e0 = dict.fromkeys(elements, 0.0)
        for e, v in zip(np.array(elements)[present], sol):
            e0[str(e)] = float(v)
        return DatasetStats(e0, counts, "least-squares")
    per_atom = float(np.mean(y / X.sum(axis=1)))
    log.warning("E0 design matrix is rank deficient; using uniform per-atom split %.6f", per_atom)
    return DatasetStats(dict.fromkeys(elements, per_atom), counts, "uniform-fallback")


def split_dataset(frames: Sequence, n_train: int, seed: int):
    if not 0 < n_train < len(frames):
        raise ValueError(f"n_train={n_train} must be in (0, {len(frames)})")
    perm = np.random.default_rng(seed).permutation(len(frames))
    return [frames[k] for k in perm[:n_train]], [frames[k] for k in perm[n_train:]]
