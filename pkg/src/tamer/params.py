"""Learnable arrays partitioned into independently freezable groups.

Three groups exist: "backbone" (the sequence encoder), "tta" (the
self-supervised adaptation layer), and "moe" (the expert mixture plus the
prediction head, so freezing "moe" freezes the head as well).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape
from .errors import ContractError, ShapeError

GROUPS = ("backbone", "tta", "moe")


class ParameterStore:
    """Flat name -> float64 array mapping with a group partition."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}
        self._groups: dict[str, list[str]] = {g: [] for g in GROUPS}

    def add(self, group: str, name: str, value) -> None:
        if group not in self._groups:
            raise ContractError(f"unknown parameter group {group!r}")
        if name in self._arrays:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ShapeError(f"parameter {name!r} has unsupported rank {arr.ndim}")
        self._arrays[name] = arr
        self._groups[group].append(name)

    def add_group(self, group: str, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            self.add(group, name, value)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise ContractError(f"unknown parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ShapeError(
                f"parameter {name!r}: shapes {arr.shape} and {self._arrays[name].shape} differ"
            )
        self._arrays[name] = arr

    def names(self, group: str | None = None) -> tuple[str, ...]:
        if group is None:
            return tuple(self._arrays)
        if group not in self._groups:
            raise ContractError(f"unknown parameter group {group!r}")
        return tuple(self._groups[group])

    def group_of(self, name: str) -> str:
        for group, names in self._groups.items():
            if name in names:
                return group
        raise ContractError(f"unknown parameter {name!r}")

    def arrays(self, group: str) -> dict[str, np.ndarray]:
        return {name: self._arrays[name] for name in self.names(group)}

    def count_params(self, group: str) -> int:
        """Exact number of scalar parameters in a group (0 if empty)."""
        return int(sum(self._arrays[n].size for n in self.names(group)))

    def clone(self) -> "ParameterStore":
        other = ParameterStore()
        for group in GROUPS:
            for name in self._groups[group]:
                other.add(group, name, self._arrays[name].copy())
        return other

    def group_bytes(self, group: str) -> bytes:
        """Deterministic serialization of one group, for freeze checks."""
        chunks = []
        for name in self.names(group):
            arr = self._arrays[name]
            header = f"{name}:{','.join(map(str, arr.shape))};".encode()
            chunks.append(header)
            chunks.append(arr.astype("<f8").tobytes(order="C"))
        return b"".join(chunks)

    def bind(self, tape: Tape, groups=GROUPS) -> dict[str, Node]:
        """Create one leaf node per parameter on the given tape."""
        bound = {}
        for group in groups:
            for name in self.names(group):
                bound[name] = tape.leaf(self._arrays[name])
        return bound


def count_params(store: ParameterStore, group: str) -> int:
    """Scalar parameter count of one group; unknown group raises ContractError."""
    return store.count_params(group)
