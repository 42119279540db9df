from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from src.app.core.errors import NumericError, ShapeMismatchError, StateError
from src.app.core.rng import RngState
from src.app.models.networks import NetConfig, TrainConfig

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]
TimeLike = Union[float, Tensor]


class VelocityField(Protocol):
    def __call__(self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor: ...


class Parametrized(Protocol):
    def parameters(self) -> list[Tensor]: ...


class Trainable(Parametrized, Protocol):
    """Сеть, умеющая forward с кэшем и backward по нему."""

    def forward_cached(
        self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None
    ) -> tuple[Tensor, "ForwardCache"]: ...

    def backward(
        self,
        cache: Optional["ForwardCache"],
        grad_out: Tensor,
        hidden_grads: Optional[Mapping[int, Tensor]] = None,
    ) -> tuple[list[Tensor], Tensor]: ...


def as_batch(x: Tensor, dim: int, what: str) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeMismatchError(f"{what}: expected (n, {dim}), got {np.shape(x)}")
    return arr


def time_column(t: TimeLike, n: int) -> Tensor:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n, float(arr))
    arr = arr.reshape(-1)
    if arr.shape[0] != n:
        raise ShapeMismatchError(f"time: expected {n} entries, got {arr.shape[0]}")
    return arr


def time_features(t: Tensor, n_freqs: int) -> Tensor:
    """Пары (sin 2πf_k t, cos 2πf_k t), f_k = 2^k."""
    if n_freqs == 0:
        return np.zeros((t.shape[0], 0))
    freqs = 2.0 ** np.arange(n_freqs)
    angles = 2.0 * math.pi * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def silu(z: Tensor) -> Tensor:
    return z * expit(z)


def silu_grad(z: Tensor) -> Tensor:
    s = expit(z)
    return s + z * s * (1.0 - s)


@dataclass
class ForwardCache:
    inputs: Tensor
    pre_activations: list[Tensor]
    activations: list[Tensor]
    weights: list[Tensor]
    squeeze: bool = False

    @property
    def hidden(self) -> list[Tensor]:
        return self.activations


@dataclass
class GradientBuffer:
    arrays: list[Tensor]

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "GradientBuffer":
        return cls([np.zeros_like(p) for p in params])

    def add_(self, grads: Sequence[Tensor], scale: float = 1.0) -> "GradientBuffer":
        if len(grads) != len(self.arrays):
            raise ShapeMismatchError("gradient list does not mirror the parameters")
        for acc, g in zip(self.arrays, grads):
            if acc.shape != g.shape:
                raise ShapeMismatchError(f"gradient shape {g.shape} != {acc.shape}")
            acc += scale * g
        return self

    def zero_(self) -> "GradientBuffer":
        for acc in self.arrays:
            acc.fill(0.0)
        return self

    def global_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g * g)) for g in self.arrays)))


@dataclass
class VelocityNet:
    """MLP v(x, t, cond) с синусоидальным кодированием времени и SiLU."""

    config: NetConfig
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, config: NetConfig, rng: RngState) -> "VelocityNet":
        gen = rng.generator()
        weights, biases = [], []
        for rows, cols in config.layer_shapes:
            limit = math.sqrt(6.0 / (rows + cols))
            weights.append(gen.uniform(-limit, limit, size=(rows, cols)))
            biases.append(np.zeros(rows))
        return cls(config, weights, biases)

    @classmethod
    def zeros(cls, config: NetConfig) -> "VelocityNet":
        return cls(
            config,
            [np.zeros(shape) for shape in config.layer_shapes],
            [np.zeros(rows) for rows, _ in config.layer_shapes],
        )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for idx in range(self.n_layers):
            names.extend((f"layers.{idx}.weight", f"layers.{idx}.bias"))
        return names

    def load_parameters(self, arrays: Sequence[Tensor]) -> "VelocityNet":
        params = self.parameters()
        if len(arrays) != len(params):
            raise ShapeMismatchError("parameter list length mismatch")
        for dst, src in zip(params, arrays):
            if dst.shape != np.shape(src):
                raise ShapeMismatchError(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src
        return self

    def copy(self) -> "VelocityNet":
        return copy.deepcopy(self)

    def assemble_inputs(self, x: Tensor, t: TimeLike, cond: Optional[Tensor]) -> tuple[Tensor, bool]:
        cfg = self.config
        squeeze = np.ndim(x) == 1
        xb = as_batch(x, cfg.state_dim, "state")
        n = xb.shape[0]
        parts = [xb, time_features(time_column(t, n), cfg.n_freqs)]
        if cfg.cond_dim:
            if cond is None:
                raise ShapeMismatchError(f"condition of dim {cfg.cond_dim} is required")
            cb = as_batch(cond, cfg.cond_dim, "condition")
            if cb.shape[0] == 1 and n > 1:
                cb = np.broadcast_to(cb, (n, cfg.cond_dim))
            if cb.shape[0] != n:
                raise ShapeMismatchError("condition rows do not match state rows")
            parts.append(cb)
        elif cond is not None and np.size(cond):
            raise ShapeMismatchError("network takes no condition")
        return np.concatenate(parts, axis=1), squeeze

    def forward_cached(
        self,
        x: Tensor,
        t: TimeLike,
        cond: Optional[Tensor] = None,
        weights: Optional[Sequence[Tensor]] = None,
    ) -> tuple[Tensor, ForwardCache]:
        used = list(self.weights if weights is None else weights)
        h, squeeze = self.assemble_inputs(x, t, cond)
        inputs = h
        pre, post = [], []
        last = self.n_layers - 1
        for idx, (w, b) in enumerate(zip(used, self.biases)):
            z = h @ w.T + b
            if idx < last:
                pre.append(z)
                h = silu(z)
                post.append(h)
            else:
                h = z
        cache = ForwardCache(inputs, pre, post, used, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
        out, _ = self.forward_cached(x, t, cond)
        return out

    def backward_weights(
        self,
        cache: Optional[ForwardCache],
        grad_out: Tensor,
        hidden_grads: Optional[Mapping[int, Tensor]] = None,
    ) -> tuple[list[Tensor], list[Tensor], Tensor]:
        """Обратный проход по кэшу: (dW по слоям, db по слоям, d/dx)."""
        if cache is None:
            raise StateError("backward called without a recorded forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        hidden_grads = hidden_grads or {}
        d_w: list[Tensor] = [np.empty(0)] * self.n_layers
        d_b: list[Tensor] = [np.empty(0)] * self.n_layers
        last = self.n_layers - 1
        g_in = g
        for idx in range(last, -1, -1):
            if idx < last:
                g = g * silu_grad(cache.pre_activations[idx])
            layer_in = cache.inputs if idx == 0 else cache.activations[idx - 1]
            d_w[idx] = g.T @ layer_in
            d_b[idx] = g.sum(axis=0)
            g_in = g @ cache.weights[idx]
            if idx > 0:
                g = g_in
                if idx - 1 in hidden_grads:
                    g = g + hidden_grads[idx - 1]
        grad_x = g_in[:, : self.config.state_dim]
        return d_w, d_b, (grad_x[0] if cache.squeeze else grad_x)

    def backward(
        self,
        cache: Optional[ForwardCache],
        grad_out: Tensor,
        hidden_grads: Optional[Mapping[int, Tensor]] = None,
    ) -> tuple[list[Tensor], Tensor]:
        d_w, d_b, grad_x = self.backward_weights(cache, grad_out, hidden_grads)
        grads: list[Tensor] = []
        for gw, gb in zip(d_w, d_b):
            grads.extend((gw, gb))
        return grads, grad_x


def forward(net: VelocityNet, x: Tensor, t: TimeLike, cond: Optional[Tensor] = None) -> Tensor:
    return net(x, t, cond)


def backward(
    net: Trainable, cache: Optional[ForwardCache], grad_out: Tensor, into: Optional[GradientBuffer] = None
) -> GradientBuffer:
    grads, _ = net.backward(cache, grad_out)
    if into is None:
        return GradientBuffer([np.array(g) for g in grads])
    return into.add_(grads)


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], cfg: Optional[TrainConfig] = None, **overrides: float) -> "OptimizerState":
        base = dict(learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
        if cfg is not None:
            base.update(
                learning_rate=cfg.learning_rate,
                beta1=cfg.beta1,
                beta2=cfg.beta2,
                eps=cfg.eps,
                weight_decay=cfg.weight_decay,
            )
        base.update(overrides)
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **base,
        )


def opt_step(
    model: Parametrized,
    grads: Sequence[Tensor],
    state: OptimizerState,
    *,
    learning_rate: Optional[float] = None,
    frozen: Optional[Sequence[bool]] = None,
) -> tuple[Parametrized, OptimizerState]:
    """Шаг AdamW; замороженные параметры не трогаются вовсе."""
    params = model.parameters()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ShapeMismatchError("gradients/moments do not mirror the parameters")
    for idx, g in enumerate(grads):
        if g.shape != params[idx].shape:
            raise ShapeMismatchError(f"gradient {idx} has shape {g.shape}, expected {params[idx].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {idx}", index=idx, step=state.step)

    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    for idx, (p, g) in enumerate(zip(params, grads)):
        if frozen is not None and frozen[idx]:
            continue
        state.m[idx] = state.beta1 * state.m[idx] + (1.0 - state.beta1) * g
        state.v[idx] = state.beta2 * state.v[idx] + (1.0 - state.beta2) * g * g
        m_hat = state.m[idx] / bias1
        v_hat = state.v[idx] / bias2
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return model, state


LossFn = Callable[[Parametrized], tuple[float, Sequence[Tensor]]]


def grad_check(model: Parametrized, loss_fn: LossFn, h: float = 1e-5, *, floor: float = 1e-12) -> float:
    """Максимальная относительная ошибка аналитического градиента против центральных разностей.

    ``floor`` ограничивает знаменатель снизу: max(|a|, |n|, floor).
    """
    value, analytic = loss_fn(model)
    if not math.isfinite(value):
        raise NumericError("loss is not finite")
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    worst = 0.0
    for p_idx, param in enumerate(model.parameters()):
        flat = param.reshape(-1)
        grad_flat = analytic[p_idx].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            plus, _ = loss_fn(model)
            flat[i] = saved - h
            minus, _ = loss_fn(model)
            flat[i] = saved
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericError("loss is not finite under perturbation", index=p_idx)
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad_flat[i])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
