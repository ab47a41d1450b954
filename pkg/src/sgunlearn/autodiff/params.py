"""Named parameters grouped into generator partitions, with a flat-vector view.

Flattening order is fixed: partition (encoder, grl, layout, decoder), then
parameter name in lexicographic order, then row-major within each array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import DimensionMismatch, ParseError
from .tensor import Tensor

PARTITIONS = ("encoder", "grl", "layout", "decoder")

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._partition: dict[str, str] = {}
        self.optim_state: dict = {}

    def add(self, partition: str, name: str, value: np.ndarray) -> Tensor:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._partition[name] = partition
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, partitions: Iterable[str] | None = None) -> list[str]:
        """Parameter names in flattening order, optionally restricted."""
        wanted = PARTITIONS if partitions is None else tuple(partitions)
        out = []
        for part in PARTITIONS:
            if part in wanted:
                out.extend(sorted(n for n, p in self._partition.items() if p == part))
        return out

    def partition_of(self, name: str) -> str:
        return self._partition[name]

    def tensors(self, partitions: Iterable[str] | None = None) -> list[Tensor]:
        return [self._params[n] for n in self.names(partitions)]

    @property
    def size(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def flatten(self, partitions: Iterable[str] | None = None) -> np.ndarray:
        ts = self.tensors(partitions)
        if not ts:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in ts])

    def unflatten(self, vec: np.ndarray, partitions: Iterable[str] | None = None) -> None:
        """Overwrite parameters (in place) from a flat vector."""
        ts = self.tensors(partitions)
        need = sum(t.data.size for t in ts)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (need,):
            raise DimensionMismatch(f"flat vector has shape {vec.shape}, expected ({need},)")
        pos = 0
        for t in ts:
            k = t.data.size
            t.data = vec[pos : pos + k].reshape(t.shape).copy()
            pos += k

    def partition_mask(self, partitions: Iterable[str]) -> np.ndarray:
        wanted = set(partitions)
        return np.concatenate(
            [np.full(self._params[n].data.size, self._partition[n] in wanted) for n in self.names()]
        )

    def grads_flat(self, grads: Mapping[str, np.ndarray], partitions: Iterable[str] | None = None) -> np.ndarray:
        names = self.names(partitions)
        return np.concatenate([np.asarray(grads[n]).ravel() for n in names]) if names else np.zeros(0)

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for n in self.names():
            new.add(self._partition[n], n, self._params[n].data.copy())
        return new

    def set_requires_grad(self, partitions: Iterable[str] | None) -> None:
        wanted = set(PARTITIONS if partitions is None else partitions)
        for n, t in self._params.items():
            t.requires_grad = self._partition[n] in wanted

    def equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.names())

    # checkpoint I/O -----------------------------------------------------------

    def to_bytes(self) -> bytes:
        table = [
            {"partition": self._partition[n], "name": n, "shape": list(self._params[n].shape)}
            for n in self.names()
        ]
        header = json.dumps({"params": table}, separators=(",", ":")).encode("utf-8")
        body = self.flatten().astype("<f8").tobytes()
        return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if blob[:4] != CHECKPOINT_MAGIC:
            raise ParseError("not a parameter checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        table = json.loads(blob[12 : 12 + hlen].decode("utf-8"))["params"]
        data = np.frombuffer(blob, dtype="<f8", offset=12 + hlen)
        store = cls()
        pos = 0
        for entry in table:
            k = int(np.prod(entry["shape"])) if entry["shape"] else 1
            store.add(entry["partition"], entry["name"], data[pos : pos + k].reshape(entry["shape"]))
            pos += k
        if pos != data.size:
            raise ParseError("checkpoint payload length disagrees with partition table")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())


def adam_step(
    store: ParameterStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; moments live in ``store.optim_state``."""
    st = store.optim_state
    t = st.get("t", 0) + 1
    st["t"] = t
    m = st.setdefault("m", {})
    v = st.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = store[name]
        mi = m.get(name)
        vi = v.get(name)
        if mi is None:
            mi = np.zeros(p.shape)
            vi = np.zeros(p.shape)
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * (g * g)
        m[name], v[name] = mi, vi
        p.data = p.data - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
