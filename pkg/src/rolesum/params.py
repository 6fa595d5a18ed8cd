"""Named parameter registry shared by all model components."""
from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class ParamStore:
    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, shape, init: str = "glorot", scale: float | None = None) -> Parameter:
        if name in self.params:
            raise ValueError(f"parameter name collision: {name}")
        shape = tuple(shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "normal":
            value = self.rng.normal(0.0, scale or 0.1, shape)
        elif init == "uniform":
            value = self.rng.uniform(-(scale or 0.1), scale or 0.1, shape)
        elif init == "glorot":
            fan_in, fan_out = (shape[-2], shape[-1]) if len(shape) >= 2 else (shape[0], 1)
            lim = (scale or 1.0) * np.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-lim, lim, shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, value.astype(self.dtype))
        self.params[name] = p
        return p

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.astype(dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, values: dict[str, np.ndarray]):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter sets differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in values.items():
            p = self.params[k]
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.value[...] = v
