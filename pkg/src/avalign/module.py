"""Minimal parameter-container base class for model components."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    """Holds named parameters and child modules; no forward contract."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, array) -> Tensor:
        t = Tensor(np.asarray(array), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, child in self._children.items():
            out.update(child.parameters(prefix + name + "."))
        return out

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}
