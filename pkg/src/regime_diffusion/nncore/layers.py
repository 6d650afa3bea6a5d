"""Parameter initialisation and a tiny parameter registry."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, parameter

GROUPS = 8


class ParamStore:
    """Ordered name -> Tensor map; insertion order is the checkpoint order."""

    def __init__(self, prefix: str = ""):
        self.prefix = prefix
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        full = f"{self.prefix}{name}"
        if full in self.tensors:
            raise KeyError(f"duplicate parameter {full}")
        t = parameter(value, full)
        self.tensors[full] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[f"{self.prefix}{name}"]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_dense(store: ParamStore, name: str, rng, n_in: int, n_out: int) -> None:
    store.add(f"{name}.w", uniform_fan_in(rng, (n_in, n_out), n_in))
    store.add(f"{name}.b", uniform_fan_in(rng, (n_out,), n_in))


def add_conv(store: ParamStore, name: str, rng, k: int, c_in: int, c_out: int) -> None:
    store.add(f"{name}.w", uniform_fan_in(rng, (k, c_in, c_out), k * c_in))
    store.add(f"{name}.b", uniform_fan_in(rng, (c_out,), k * c_in))


def add_group_norm(store: ParamStore, name: str, channels: int) -> None:
    store.add(f"{name}.gamma", np.ones(channels))
    store.add(f"{name}.beta", np.zeros(channels))
