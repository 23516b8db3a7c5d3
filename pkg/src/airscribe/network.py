"""Sequential execution, the Adam optimizer, and a gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .layers import Layer


def run_forward(layers: Sequence[Layer], x, train=False, update_stats=True):
    for layer in layers:
        x = layer.forward(x, train=train, update_stats=update_stats)
    return x


def run_backward(layers: Sequence[Layer], dy):
    for layer in reversed(layers):
        dy = layer.backward(dy)
    return dy


@dataclass
class AdamState:
    """First/second moment estimates for one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("adam_step: params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(
    layers: Sequence[Layer],
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float = 1e-3,
    include_input: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn maps the network output to (scalar loss, d loss / d output).
    Runs every forward with frozen batch-norm statistics and, when dropout
    layers are present, with their RNG state reset before each call so the
    differentiated function is deterministic. Expects float64 parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    rng_states = [
        (layer, layer.rng.bit_generator.state)
        for layer in layers
        if layer.rng is not None
    ]

    def run(inp):
        for layer, state in rng_states:
            layer.rng.bit_generator.state = state
        return run_forward(layers, inp, train=True, update_stats=False)

    out = run(x)
    _, dy = loss_fn(out)
    dx = run_backward(layers, dy)

    targets = [(layer.grads[name], layer.params[name]) for layer in layers
               for name in layer.params]
    analytic_grads = [g.copy() for g, _ in targets]
    tensors = [p for _, p in targets]
    if include_input:
        analytic_grads.append(np.asarray(dx).copy())
        tensors.append(x)

    worst = 0.0
    for tensor, analytic in zip(tensors, analytic_grads):
        flat = tensor.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn(run(x))[0]
            flat[i] = orig - step
            f_minus = loss_fn(run(x))[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
