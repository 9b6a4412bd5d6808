"""Named tensors with a trainability mask, and the MMEACKPT container."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"MMEACKPT"
FORMAT_VERSION = 1
BUFFER_PREFIX = "buffer/"
ADAPTER_PREFIX = "adapter/"


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered ``name -> float64 array`` with one trainable flag per tensor.

    Names starting with ``buffer/`` hold statistics (e.g. E0) rather than
    learnable weights and are never trainable nor counted as parameters.
    """

    def __init__(self):
        self.tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate tensor {name}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name} has non-finite entries")
        self.tensors[name] = arr
        self.trainable[name] = bool(trainable) and not name.startswith(BUFFER_PREFIX)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self.tensors:
            raise KeyError(name)
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, trainable: bool | None = None, prefix: str | None = None) -> list[str]:
        out = []
        for n in self.tensors:
            if trainable is not None and self.trainable[n] != trainable:
                continue
            if prefix is not None and not n.startswith(prefix):
                continue
            out.append(n)
        return out

    def set_trainable(self, names, flag: bool = True) -> None:
        for n in names:
            if n not in self.tensors:
                raise KeyError(n)
            self.trainable[n] = flag and not n.startswith(BUFFER_PREFIX)

    def freeze_all(self) -> None:
        for n in self.tensors:
            self.trainable[n] = False

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, v in self.tensors.items():
            out.tensors[n] = v.copy()
            out.trainable[n] = self.trainable[n]
        return out

    def num_params(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names if not n.startswith(BUFFER_PREFIX)))

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, masks and values."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            self.trainable[n] == other.trainable[n]
            and self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].tobytes() == other.tensors[n].tobytes()
            for n in self.tensors
        )


def save_checkpoint(path, config: dict, store: ParameterStore) -> None:
    entries, payload, offset = [], [], 0
    for name, arr in store.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "trainable": store.trainable[name]}
        )
        payload.append(data)
        offset += len(data)
    header = json.dumps(
        {"format-version": FORMAT_VERSION, "config": config, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path) -> tuple[dict, ParameterStore]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format-version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format-version {header.get('format-version')}")
    base = 16 + hlen
    store = ParameterStore()
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        store.tensors[e["name"]] = arr.astype(np.float64)
        store.trainable[e["name"]] = bool(e["trainable"])
    return header["config"], store
