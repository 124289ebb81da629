"""Parameter containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import RngState, Tensor


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self._buffers: dict[str, Tensor] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform_param(self, name: str, shape, bound: float, rng: RngState) -> Tensor:
        return self.add_param(name, rng.uniform(-bound, bound, shape))

    def zeros_param(self, name: str, shape) -> Tensor:
        return self.add_param(name, np.zeros(shape))

    def add_buffer(self, name: str, value: np.ndarray) -> Tensor:
        """Constant tensor that is saved with the parameters but never trained."""
        t = Tensor(np.ascontiguousarray(value, dtype=np.float64), name=name)
        self._buffers[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
