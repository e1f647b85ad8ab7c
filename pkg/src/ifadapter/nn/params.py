"""Named parameter storage, freezing, and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import Tensor

MAGIC = b"IFAL"
FORMAT_VERSION = 1
DTYPE_F64 = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered name -> Tensor mapping with per-name freeze flags.

    Frozen parameters have ``requires_grad=False`` so no gradient ever reaches
    them and the optimizer skips them.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen, name=name)
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def set_frozen(self, name: str, frozen: bool = True) -> None:
        t = self._params[name]
        t.requires_grad = not frozen
        if frozen:
            self._frozen.add(name)
            t.grad = None
        else:
            self._frozen.discard(name)

    def freeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.set_frozen(n, True)

    def unfreeze(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.set_frozen(n, False)

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self._frozen]

    def zero_grad(self) -> None:
        for n, t in self._params.items():
            t.grad = None if n in self._frozen else np.zeros_like(t.data)

    def num_params(self, prefix: str = "") -> int:
        return sum(self._params[n].data.size for n in self.names(prefix))

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self._params[n].data.copy() for n in self.names(prefix)}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, arr in state.items():
            if n not in self._params:
                if strict:
                    raise CheckpointError(f"unknown parameter {n!r}")
                continue
            t = self._params[n]
            if t.shape != arr.shape:
                raise CheckpointError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def digest(self, prefix: str = "") -> str:
        return hashlib.sha256(encode_checkpoint(self, prefix)).hexdigest()

    # checkpoint I/O
    def save(self, path, prefix: str = "") -> str:
        blob = encode_checkpoint(self, prefix)
        Path(path).write_bytes(blob)
        return hashlib.sha256(blob).hexdigest()

    def load(self, path, strict: bool = True, apply_freeze: bool = True) -> None:
        entries = decode_checkpoint(Path(path).read_bytes())
        self.load_state({n: a for n, (a, _) in entries.items()}, strict=strict)
        if apply_freeze:
            for n, (_, frozen) in entries.items():
                if n in self._params:
                    self.set_frozen(n, frozen)


def encode_checkpoint(store: ParamStore, prefix: str = "") -> bytes:
    buf = io.BytesIO()
    names = store.names(prefix)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(names)))
    for n in names:
        arr = np.asarray(store[n].data, dtype="<f8", order="C")  # keeps 0-d shapes
        raw = n.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BBI", DTYPE_F64, int(store.is_frozen(n)), arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> dict[str, tuple[np.ndarray, bool]]:
    """Parse a checkpoint into ``{name: (array, frozen)}`` preserving order."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic")
    if len(view) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", view, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, tuple[np.ndarray, bool]] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            dtype, frozen, rank = struct.unpack_from("<BBI", view, pos)
            pos += 6
            if dtype != DTYPE_F64:
                raise CheckpointError(f"{name}: unknown dtype tag {dtype}")
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
            out[name] = (arr, bool(frozen))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError("truncated checkpoint") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return out
