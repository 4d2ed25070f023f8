"""Named parameter/gradient storage with a flat binary serialization format.

File layout: 8-byte magic "ELAKIT01", uint64 little-endian header length,
UTF-8 JSON header (tensor names, shapes, dtypes, byte offsets, roles, free
meta dict), then the raw tensor bytes back to back. Round trips are bit
exact.
"""

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"ELAKIT01"


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    role: str = "weight"


class ParamStore:
    """Ordered map of name -> (value, grad) pairs for one module or network."""

    def __init__(self):
        self._entries: dict[str, Param] = {}
        self.meta: dict = {}

    def add(self, name, value, role="weight"):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        self._entries[name] = Param(value, np.zeros_like(value), role)
        return value

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def value(self, name):
        try:
            return self._entries[name].value
        except KeyError:
            raise KeyError(f"parameter store has no entry {name!r}") from None

    def grad(self, name):
        return self._entries[name].grad

    def role(self, name):
        return self._entries[name].role

    def set_value(self, name, value):
        entry = self._entries[name]
        if value.shape != entry.value.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {value.shape} vs {entry.value.shape}"
            )
        entry.value = np.ascontiguousarray(value)

    def accumulate_grad(self, name, grad):
        entry = self._entries[name]
        if grad.shape != entry.grad.shape:
            raise ValueError(
                f"gradient shape mismatch for {name!r}: {grad.shape} vs {entry.grad.shape}"
            )
        entry.grad += grad

    def zero_grads(self):
        for entry in self._entries.values():
            entry.grad.fill(0.0)

    def total_params(self):
        return sum(e.value.size for e in self._entries.values())

    def items(self):
        return self._entries.items()

    def save(self, path):
        tensors = []
        offset = 0
        for name, entry in self._entries.items():
            nbytes = entry.value.nbytes
            tensors.append(
                {
                    "name": name,
                    "shape": list(entry.value.shape),
                    "dtype": str(entry.value.dtype),
                    "offset": offset,
                    "nbytes": nbytes,
                    "role": entry.role,
                }
            )
            offset += nbytes
        header = json.dumps({"version": 1, "meta": self.meta, "tensors": tensors})
        header_bytes = header.encode("utf-8")
        atomic_write_bytes(
            path,
            MAGIC
            + len(header_bytes).to_bytes(8, "little")
            + header_bytes
            + b"".join(
                np.ascontiguousarray(e.value).tobytes() for e in self._entries.values()
            ),
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MAGIC:
            raise ValueError(f"{path}: not a parameter store file")
        header_len = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
        data = blob[16 + header_len:]
        store = cls()
        store.meta = header.get("meta", {})
        for t in header["tensors"]:
            arr = np.frombuffer(
                data, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=int)),
                offset=t["offset"],
            ).reshape(t["shape"]).copy()
            store.add(t["name"], arr, role=t.get("role", "weight"))
        return store


def atomic_write_bytes(path, data):
    """Write via temp file + rename so interrupted runs never leave partials."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".elakit-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))
