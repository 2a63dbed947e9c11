"""Named parameter bundles shared by the server-side models."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad


class ParamSet:
    """Ordered name -> array mapping.

    A forward pass asks for fresh leaf tensors with :meth:`leaves`, and the
    optimizer result is written back with :meth:`assign`.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.arrays: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.arrays[k] = np.asarray(v, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def values(self) -> list[np.ndarray]:
        return list(self.arrays.values())

    def leaves(self) -> dict[str, ad.Tensor]:
        return {k: ad.tensor(v) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, ad.Tensor]:
        return {k: ad.constant(v) for k, v in self.arrays.items()}

    def assign(self, values: list[np.ndarray]) -> None:
        for k, v in zip(list(self.arrays), values):
            self.arrays[k] = np.asarray(v, dtype=np.float64)

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for k, v in self.arrays.items():
            self.arrays[k] = np.asarray(flat[offset : offset + v.size], dtype=np.float64).reshape(v.shape)
            offset += v.size
        if offset != flat.size:
            raise ValueError("flat vector length does not match parameter set")

    def copy(self) -> ParamSet:
        return ParamSet({k: v.copy() for k, v in self.arrays.items()})

    def bitwise_equal(self, other: ParamSet) -> bool:
        return self.names() == other.names() and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.values(), other.values())
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    lim = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))
