"""Small MLP helpers over a flat name -> Tensor parameter dict."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul, softplus, softplus_array


@dataclass(frozen=True)
class MLP:
    """Softplus MLP; parameters live in an external dict under ``prefix``.

    With ``stack > 0`` the network is ``stack`` independent copies sharing
    nothing, evaluated together on inputs of shape (stack, N, in).
    """

    prefix: str
    sizes: tuple[int, ...]
    stack: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out += [f"{self.prefix}.w{i}", f"{self.prefix}.b{i}"]
        return out

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, Tensor]:
        params = {}
        lead = (self.stack,) if self.stack else ()
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            std = np.sqrt(1.0 / fan_in)
            if i == self.n_layers - 1:
                std *= out_scale
            w = rng.normal(0.0, std, size=lead + (fan_in, fan_out))
            b = np.zeros(lead + (1, fan_out) if self.stack else (fan_out,))
            params[f"{self.prefix}.w{i}"] = Tensor(w, requires_grad=True, name=f"{self.prefix}.w{i}")
            params[f"{self.prefix}.b{i}"] = Tensor(b, requires_grad=True, name=f"{self.prefix}.b{i}")
        return params

    def __call__(self, params: dict[str, Tensor], x: Tensor) -> Tensor:
        h = x
        for i in range(self.n_layers):
            h = matmul(h, params[f"{self.prefix}.w{i}"]) + params[f"{self.prefix}.b{i}"]
            if i < self.n_layers - 1:
                h = softplus(h)
        return h

    def apply(self, params: dict[str, Tensor], x: np.ndarray, member: int | None = None) -> np.ndarray:
        """Plain-array forward pass (no tape); ``member`` picks one copy of a stack."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            w = params[f"{self.prefix}.w{i}"].data
            b = params[f"{self.prefix}.b{i}"].data
            if member is not None:
                w, b = w[member], b[member]
            h = h @ w + b
            if i < self.n_layers - 1:
                h = softplus_array(h)
        return h

    def param_count(self) -> int:
        per = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        return per * max(self.stack, 1)
