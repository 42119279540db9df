from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from src.app.core.errors import ConfigError, ShapeMismatchError
from src.app.core.rng import RngState
from src.app.services.nn import ForwardCache, Tensor, TimeLike, VelocityNet


@dataclass
class AdapterSet:
    """Низкоранговые факторы A_l (rows × r) и B_l (r × cols) для адаптируемых слоёв."""

    rank: int
    alpha: float
    layers: tuple[int, ...]
    a: list[Tensor]
    b: list[Tensor]

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError("adapter rank must be at least 1")
        if len(self.a) != len(self.layers) or len(self.b) != len(self.layers):
            raise ShapeMismatchError("one (A, B) pair per adapted layer is required")
        for a, b in zip(self.a, self.b):
            if a.shape[1] != self.rank or b.shape[0] != self.rank:
                raise ShapeMismatchError(f"factor shapes {a.shape}, {b.shape} do not match rank {self.rank}")

    @classmethod
    def init(
        cls,
        base: VelocityNet,
        rank: int,
        rng: RngState,
        *,
        alpha: Optional[float] = None,
        layers: Optional[Sequence[int]] = None,
    ) -> "AdapterSet":
        """A равномерная, B = 0: адаптированная сеть совпадает с базовой."""
        if rank < 1:
            raise ConfigError("adapter rank must be at least 1")
        chosen = tuple(range(base.n_layers - 1)) if layers is None else tuple(layers)
        if any(not 0 <= layer < base.n_layers for layer in chosen):
            raise ConfigError(f"adapted layers {chosen} out of range")
        gen = rng.generator()
        a_list, b_list = [], []
        for layer in chosen:
            rows, cols = base.weights[layer].shape
            limit = 1.0 / math.sqrt(rank)
            a_list.append(gen.uniform(-limit, limit, size=(rows, rank)))
            b_list.append(np.zeros((rank, cols)))
        return cls(rank, float(rank if alpha is None else alpha), chosen, a_list, b_list)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.a, self.b))

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for a, b in zip(self.a, self.b):
            params.extend((a, b))
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for layer in self.layers:
            names.extend((f"adapters.{layer}.A", f"adapters.{layer}.B"))
        return names

    def delta(self, slot: int) -> Tensor:
        return self.scale * (self.a[slot] @ self.b[slot])

    def check(self, base: VelocityNet) -> None:
        for layer, a, b in zip(self.layers, self.a, self.b):
            if layer >= base.n_layers:
                raise ShapeMismatchError(f"adapter for layer {layer} but base has {base.n_layers} layers")
            rows, cols = base.weights[layer].shape
            if a.shape[0] != rows or b.shape[1] != cols:
                raise ShapeMismatchError(f"adapter for layer {layer} does not match weight {rows}x{cols}")

    def copy(self) -> "AdapterSet":
        return copy.deepcopy(self)


@dataclass
class LoraNetwork:
    """Адаптированная сеть: базовые веса + (α/r)·A·B; обучаются только A и B."""

    base: VelocityNet
    adapters: AdapterSet

    def __post_init__(self) -> None:
        self.adapters.check(self.base)

    def effective_weights(self) -> list[Tensor]:
        weights = list(self.base.weights)
        for slot, layer in enumerate(self.adapters.layers):
            weights[layer] = self.base.weights[layer] + self.adapters.delta(slot)
        return weights

    def parameters(self) -> list[Tensor]:
        return self.adapters.parameters()

    def forward_cached(
        self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None
    ) -> tuple[Tensor, ForwardCache]:
        return self.base.forward_cached(x, t, cond, weights=self.effective_weights())

    def __call__(self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
        out, _ = self.forward_cached(x, t, cond)
        return out

    def backward(
        self,
        cache: Optional[ForwardCache],
        grad_out: Tensor,
        hidden_grads: Optional[Mapping[int, Tensor]] = None,
    ) -> tuple[list[Tensor], Tensor]:
        d_w, _, grad_x = self.base.backward_weights(cache, grad_out, hidden_grads)
        s = self.adapters.scale
        grads: list[Tensor] = []
        for slot, layer in enumerate(self.adapters.layers):
            a, b = self.adapters.a[slot], self.adapters.b[slot]
            grads.extend((s * d_w[layer] @ b.T, s * a.T @ d_w[layer]))
        return grads, grad_x

    def merged(self) -> VelocityNet:
        net = self.base.copy()
        net.weights = [w.copy() for w in self.effective_weights()]
        return net


def lora_forward(
    base: VelocityNet, adapters: AdapterSet, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None
) -> Tensor:
    return LoraNetwork(base, adapters)(x, t, cond)
