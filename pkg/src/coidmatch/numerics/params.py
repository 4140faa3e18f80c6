"""Named parameter store, Adam updates, and checkpoint serialization."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

_MAGIC = b"COIDCKPT"
_VERSION = 1


def glorot_uniform(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None:
        fan_in = shape[-2] if len(shape) >= 2 else 1
    if fan_out is None:
        fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """All trainable tensors by name, plus Adam moment state and step count."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most ``max_norm``.

        Returns the pre-clip norm.  Rare near-coincident world positions
        make the reciprocal-distance similarity term (and therefore the
        squared loss) arbitrarily large; clipping keeps those outliers
        from dominating the optimizer direction.
        """
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(np.asarray(t.grad) ** 2))
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0.0:
            factor = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad = t.grad * factor
        return norm

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """One bias-corrected Adam update; clears gradients afterwards."""
        missing = [n for n, t in self._params.items() if t.grad is None]
        if missing:
            raise ValueError(f"missing gradients for {missing}")
        self.step += 1
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for name, t in self._params.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            t.grad = None

    # -------------------------------------------------------- state copies

    def snapshot(self) -> dict:
        """Deep copy of parameters, moments and step (for best-val tracking)."""
        return {
            "params": {n: t.data.copy() for n, t in self._params.items()},
            "m": {n: a.copy() for n, a in self._m.items()},
            "v": {n: a.copy() for n, a in self._v.items()},
            "step": self.step,
        }

    def restore(self, snap: dict) -> None:
        for n, arr in snap["params"].items():
            self._params[n].data = arr.copy()
            self._params[n].grad = None
        self._m = {n: a.copy() for n, a in snap["m"].items()}
        self._v = {n: a.copy() for n, a in snap["v"].items()}
        self.step = snap["step"]

    # ------------------------------------------------------------ file I/O

    def save(self, path, config_hash: str = "") -> None:
        """Write a versioned binary checkpoint (header JSON + float64 payload)."""
        entries = []
        blobs = []
        offset = 0

        def put(kind, name, arr):
            nonlocal offset
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"kind": kind, "name": name,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)

        for name, t in self._params.items():
            put("param", name, t.data)
            put("adam_m", name, self._m[name])
            put("adam_v", name, self._v[name])
        header = json.dumps(
            {"step": self.step, "config_hash": config_hash, "entries": entries},
            sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", str]:
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", raw[8:12])
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", raw[12:20])
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        payload = raw[20 + hlen:]
        store = cls()
        store.step = int(header["step"])
        for ent in header["entries"]:
            shape = tuple(ent["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = ent["offset"]
            arr = np.frombuffer(payload, dtype="<f8", count=count,
                                offset=start).reshape(shape).astype(np.float64)
            if ent["kind"] == "param":
                store.add(ent["name"], arr)
            elif ent["kind"] == "adam_m":
                store._m[ent["name"]] = arr.copy()
            elif ent["kind"] == "adam_v":
                store._v[ent["name"]] = arr.copy()
            else:
                raise ValueError(f"unknown checkpoint entry kind {ent['kind']!r}")
        return store, header.get("config_hash", "")
