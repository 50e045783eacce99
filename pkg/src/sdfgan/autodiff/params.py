"""Named trainable arrays, RMSprop state, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
import threading
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"SGPC"
VERSION = 1


class ParameterStore:
    """Ordered name -> Tensor map with per-parameter RMSprop state.

    Reads may happen from any thread; ``update``/``load_state`` take a lock.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._sq_avg: dict[str, np.ndarray] = {}
        self._lock = threading.RLock()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._sq_avg[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._params.values())

    def zero_(self) -> None:
        with self._lock:
            for t in self._params.values():
                t.data[...] = 0.0

    def rmsprop_update(self, grads: Mapping[str, np.ndarray], lr: float,
                       alpha: float = 0.99, eps: float = 1e-8) -> None:
        """In-place RMSprop step. Plain update, no clipping of any kind."""
        with self._lock:
            for name, g in grads.items():
                t = self._params[name]
                if g.shape != t.shape:
                    raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {t.shape}")
                v = self._sq_avg[name]
                v *= alpha
                v += (1.0 - alpha) * g * g
                t.data -= lr * g / (np.sqrt(v) + eps)

    # ------------------------------------------------------------ checkpoints

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t.data
        for name, v in self._sq_avg.items():
            out[prefix + "rmsprop/" + name] = v
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        with self._lock:
            for name, t in self._params.items():
                key = prefix + name
                if key not in arrays:
                    raise KeyError(f"checkpoint lacks parameter {key!r}")
                arr = np.asarray(arrays[key], dtype=np.float64)
                if arr.shape != t.shape:
                    raise ValueError(f"{key!r}: checkpoint shape {arr.shape} != {t.shape}")
                t.data[...] = arr
                sq = arrays.get(prefix + "rmsprop/" + name)
                self._sq_avg[name][...] = 0.0 if sq is None else sq

    def save(self, path: str | Path) -> None:
        save_arrays(path, self.state())

    def load(self, path: str | Path) -> None:
        self.load_state(load_arrays(path))


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return out
