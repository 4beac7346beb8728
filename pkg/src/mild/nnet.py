"""Small numpy feed-forward networks with exact reverse-mode gradients and AdamW."""

from __future__ import annotations

import ctypes
import ctypes.util
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mild.errors import DimensionMismatch, ShapeMismatch
from mild.numkit import make_rng

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "linear")

# glibc mallopt parameters
_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3
_heap_retained = False


def retain_heap() -> bool:
    """Ask glibc to keep freed memory mapped instead of returning it to the OS.

    A training step allocates and frees the same multi-megabyte temporaries
    over and over. By default glibc hands them back to the kernel and the
    next step pays the page faults again, which costs about a third of the
    step time. Process-wide, idempotent, and a no-op without glibc.
    """
    global _heap_retained
    if _heap_retained:
        return True
    name = ctypes.util.find_library("c")
    try:
        mallopt = ctypes.CDLL(name).mallopt
    except (OSError, AttributeError, TypeError):
        return False
    _heap_retained = all(
        mallopt(k, v) == 1 for k, v in ((_M_TRIM_THRESHOLD, 1 << 30), (_M_TOP_PAD, 1 << 28), (_M_MMAP_THRESHOLD, 1 << 30))
    )
    return _heap_retained


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch(f"weight {self.weight.shape} and bias {self.bias.shape} do not chain")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Cache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    slopes: list[np.ndarray | None]  # per-entry activation derivative, None for linear layers


class DenseNet:
    """Chain of affine layers, each followed by Leaky-ReLU or nothing.

    Inputs are row batches of shape ``(n, in_dim)``.
    """

    def __init__(self, layers: Sequence[Dense], leaky_slope: float = LEAKY_SLOPE):
        self.layers = list(layers)
        self.leaky_slope = float(leaky_slope)
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in [0, 1)")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeMismatch(f"layer output {a.out_dim} does not feed input {b.in_dim}")

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng,
        hidden_activation: str = "leaky_relu",
        output_activation: str = "linear",
        leaky_slope: float = LEAKY_SLOPE,
    ) -> "DenseNet":
        """Uniform fan-in init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
        rng = make_rng(rng)
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=n_out)
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Dense(w, b, act))
        return cls(layers, leaky_slope)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers], self.leaky_slope
        )

    def forward(self, x) -> tuple[np.ndarray, Cache]:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected input batch (n, {self.in_dim}), got {x.shape}")
        cache = Cache([], [], [])
        h = x
        for layer in self.layers:
            cache.inputs.append(h)
            a = h @ layer.weight
            a += layer.bias  # in place: a second large temporary costs more than the add
            cache.pre.append(a)
            if layer.activation == "leaky_relu":
                # branch-free: np.where/np.maximum are several times slower on mixed signs
                slope = (a > 0) * (1.0 - self.leaky_slope) + self.leaky_slope
                h = a * slope
            else:
                slope = None
                h = a
            cache.slopes.append(slope)
        return h, cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: Cache, upstream, input_grad: bool = True) -> tuple[list[np.ndarray], np.ndarray | None]:
        """Gradients of a scalar loss given ``dloss/doutput``.

        Returns ``(param_grads, input_grad)``; ``param_grads`` follows the order
        of :meth:`parameters`. The input gradient is None when not requested.
        """
        g = np.asarray(upstream, dtype=float)
        if len(cache.pre) != len(self.layers) or g.shape != cache.pre[-1].shape:
            raise ShapeMismatch(f"upstream gradient shape {g.shape} does not match the cached forward pass")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if cache.slopes[i] is not None:
                if i == len(self.layers) - 1:
                    g = g * cache.slopes[i]  # the caller owns upstream
                else:
                    g *= cache.slopes[i]
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i or input_grad:
                g = g @ layer.weight.T
        return grads, g if input_grad else None


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """One AdamW update, applied to ``params`` in place.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the Adam step.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    lr = state.learning_rate
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {np.shape(g)}")
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params: Sequence[np.ndarray], **hyper):
        self.params = list(params)
        self.state = OptimizerState(**hyper)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adamw_step(self.params, grads, self.state)


def finite_difference_check(
    loss: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-8,
    order: int = 2,
) -> float:
    """Max relative error between ``grads`` and central differences of ``loss``.

    ``loss`` must re-evaluate with the current (mutated) parameter values and
    be deterministic. ``order=4`` uses the five-point stencil, which tolerates
    a larger ``h`` when the loss is strongly curved.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    stencil = {2: ((1.0, 0.5),), 4: ((1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0))}[order]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            num = 0.0
            for k, c in stencil:
                flat[j] = old + k * h
                up = loss()
                flat[j] = old - k * h
                down = loss()
                num += c * (up - down)
            flat[j] = old
            num /= h
            err = abs(num - gflat[j]) / max(abs(num), abs(gflat[j]), floor)
            worst = max(worst, err)
    return worst
