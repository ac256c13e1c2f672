"""Plain gradient descent and Adam, with per-parameter trainable masks.

Parameters are updated in place. A ``mask`` is a list of booleans aligned
with the parameter list; ``False`` entries are left bit-identical and their
optimizer moments are not touched.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError
from .network import AUGMENTED

WARMUP = "warmup"
JOINT = "joint"


def _check(params, grads, mask):
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"parameter shape {p.shape} != gradient shape {g.shape}")
    if mask is None:
        return [True] * len(params)
    if len(mask) != len(params):
        raise DimensionError(f"mask has {len(mask)} entries for {len(params)} parameters")
    return list(mask)


def sgd_step(params, grads, lr, mask=None):
    mask = _check(params, grads, mask)
    for p, g, on in zip(params, grads, mask):
        if on and lr != 0:
            p -= lr * g
    return params


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)
    # per-parameter update counts, used for bias correction
    counts: list = field(default=None, repr=False)


def init_optimizer(params, kind="adam", lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    if kind not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state = OptimizerState(kind, lr, beta1, beta2, eps)
    if kind == "adam":
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        state.counts = [0] * len(params)
    return state


def adam_step(state, params, grads, mask=None):
    if state.m is None or state.v is None:
        raise StateError("Adam state has no moment buffers; call init_optimizer first")
    mask = _check(params, grads, mask)
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g, on) in enumerate(zip(params, grads, mask)):
        if not on:
            continue
        state.counts[i] += 1
        k = state.counts[i]
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**k)
        v_hat = state.v[i] / (1 - b2**k)
        if state.lr != 0:
            p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


def step(state, params, grads, mask=None):
    if state.kind == "sgd":
        state.t += 1
        sgd_step(params, grads, state.lr, mask)
        return state, params
    return adam_step(state, params, grads, mask)


def warmup_mask(net, phase):
    """Trainable flags per parameter: only augmented ones during warm-up."""
    if phase == JOINT:
        return [True] * len(net.param_groups())
    if phase == WARMUP:
        return [tag == AUGMENTED for tag in net.param_tags()]
    raise ValueError(f"phase must be 'warmup' or 'joint', got {phase!r}")
