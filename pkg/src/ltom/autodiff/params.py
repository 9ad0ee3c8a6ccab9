"""Named parameter storage, Adam, and the LTOM1 checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Gradients, Tensor

MAGIC = b"LTOM1"


class ParamStore:
    """Dot-path -> Tensor map with per-parameter gradients and Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def set(self, name: str, value: np.ndarray) -> None:
        p = self[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.shape:
            raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
        p.data = value.copy()

    def zero_grad(self) -> None:
        self.grads.clear()

    def accumulate(self, grads: Gradients) -> None:
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            self.grads[name] = self.grads[name] + g if name in self.grads else g.copy()

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def optim_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out

    def load_optim(self, arrays: dict[str, np.ndarray]) -> None:
        self.m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v.")}
        self.t = int(arrays["t"][0])


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> None:
    """One bias-corrected Adam update over ``names`` (default: every parameter)."""
    names = list(store.params) if names is None else list(names)
    missing = [n for n in names if n not in store.grads]
    if missing:
        raise KeyError(f"missing gradient for parameter(s): {', '.join(missing)}")
    store.t += 1
    c1 = 1.0 - beta1**store.t
    c2 = 1.0 - beta2**store.t
    for n in names:
        g = store.grads[n]
        m = beta1 * store.m.get(n, 0.0) + (1.0 - beta1) * g
        v = beta2 * store.v.get(n, 0.0) + (1.0 - beta2) * g * g
        store.m[n], store.v[n] = m, v
        p = store.params[n]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# checkpoint IO: magic, then per entry
#   u32 name length | name bytes (utf-8) | u32 rank | u32 dims... | f64 LE data


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not an LTOM1 checkpoint")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out


def save_params(store: ParamStore, path: str | Path) -> None:
    write_arrays(path, store.state_dict())


def load_params(path: str | Path, store: ParamStore | None = None) -> ParamStore:
    arrays = read_arrays(path)
    if store is None:
        store = ParamStore()
        for name, a in arrays.items():
            store.add(name, a)
        return store
    unknown = set(arrays) - set(store.params)
    absent = set(store.params) - set(arrays)
    if unknown or absent:
        raise KeyError(f"checkpoint mismatch: unexpected {sorted(unknown)}, missing {sorted(absent)}")
    for name, a in arrays.items():
        store.set(name, a)
    return store
