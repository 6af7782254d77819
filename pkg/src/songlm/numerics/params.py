"""Named parameter storage with a frozen set."""
from __future__ import annotations

import fnmatch
import hashlib
from collections import OrderedDict
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` map. Frozen names never receive updates."""

    def __init__(self, tensors=None, frozen: Iterable[str] = ()):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen: set[str] = set()
        for name, value in (tensors or {}).items():
            self.add(name, value)
        self.freeze(frozen)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        if t.parents:
            raise ValueError(f"parameter {name!r} must be a leaf tensor")
        t.requires_grad = name not in self.frozen
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def matching(self, pattern: str) -> list[str]:
        return [n for n in self._tensors if fnmatch.fnmatchcase(n, pattern)]

    def freeze(self, names_or_patterns: Iterable[str]) -> None:
        for pat in names_or_patterns:
            hits = self.matching(pat) if any(c in pat for c in "*?[") else [pat]
            for name in hits:
                if name not in self._tensors:
                    raise KeyError(f"unknown parameter {name!r}")
                self.frozen.add(name)
                self._tensors[name].requires_grad = False

    def unfreeze_all(self) -> None:
        self.frozen.clear()
        for t in self._tensors.values():
            t.requires_grad = True

    def set_frozen(self, patterns: Iterable[str]) -> None:
        self.unfreeze_all()
        self.freeze(patterns)

    def copy(self, frozen: bool | None = None) -> "ParamStore":
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.copy()))
        out.freeze(self.frozen if frozen is None else (self.names() if frozen else ()))
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._tensors.items():
            out.add(name, Tensor(t.data.astype(dtype)))
        out.freeze(self.frozen)
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._tensors.items())

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def checksum(self, pattern: str = "*") -> str:
        """SHA-256 over names and raw bytes of every parameter matching ``pattern``."""
        h = hashlib.sha256()
        for name in self.matching(pattern):
            data = np.ascontiguousarray(self._tensors[name].data)
            h.update(name.encode())
            h.update(str(data.shape).encode())
            h.update(data.tobytes())
        return h.hexdigest()
