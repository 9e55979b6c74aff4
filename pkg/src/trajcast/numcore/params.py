"""Named parameter collections and the on-disk checkpoint format.

A checkpoint is two files: a text manifest with one ``name shape dtype offset``
line per parameter, and a little-endian binary blob of row-major values.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import CheckpointError, ConsistencyError
from .tensor import Tensor

_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class ParamTree:
    """Dotted-name -> Tensor mapping with lexicographic iteration order."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, tensor in (entries or {}).items():
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise ConsistencyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in self.names()]

    def subtree(self, prefix: str) -> ParamTree:
        """View of the entries under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return ParamTree({n[cut:]: t for n, t in self._entries.items() if n.startswith(prefix + ".")})

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients; parameters untouched by the last backward get zeros."""
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.items()
        }

    def copy(self) -> ParamTree:
        return ParamTree({n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.items()})

    def astype(self, dtype) -> ParamTree:
        return ParamTree({n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for n, t in self.items()})


def save_checkpoint(params: ParamTree, manifest_path: str | Path, blob_path: str | Path) -> None:
    lines = []
    offset = 0
    chunks = []
    for name, t in params.items():
        code = _CODE_FOR[t.dtype]
        raw = np.ascontiguousarray(t.data, dtype=_DTYPE_CODES[code]).tobytes()
        shape = "x".join(str(d) for d in t.shape) if t.shape else "scalar"
        lines.append(f"{name} {shape} {code} {offset}")
        chunks.append(raw)
        offset += len(raw)
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    Path(blob_path).write_bytes(b"".join(chunks))


def load_checkpoint(manifest_path: str | Path, blob_path: str | Path) -> ParamTree:
    blob = Path(blob_path).read_bytes()
    tree = ParamTree()
    expected = 0
    for lineno, line in enumerate(Path(manifest_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"manifest line {lineno}: expected 'name shape dtype offset', got {line!r}")
        name, shape_s, code, offset_s = parts
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"manifest line {lineno}: unknown dtype {code!r}")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        dtype = _DTYPE_CODES[code]
        offset = int(offset_s)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset != expected:
            raise CheckpointError(f"manifest line {lineno}: offset {offset} != expected {expected}")
        if offset + nbytes > len(blob):
            raise CheckpointError(f"blob too short for {name}: need {offset + nbytes} bytes, have {len(blob)}")
        values = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        native = np.dtype(np.float32) if code == "f32" else np.dtype(np.float64)
        tree.add(name, Tensor(values.reshape(shape).astype(native), requires_grad=True))
        expected = offset + nbytes
    if expected != len(blob):
        raise CheckpointError(f"blob length {len(blob)} does not match manifest total {expected}")
    return tree
