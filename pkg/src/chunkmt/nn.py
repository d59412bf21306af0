"""Neural building blocks: LSTM cell, bidirectional encoder, the two-layer
scoring network, parameter initialization, and Adam.

All forward functions are pure maps over autodiff Nodes.  Gate layout in the
fused LSTM weight matrices is (input, forget, candidate, output).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass
class LstmParams:
    """Weights of one LSTM direction.

    w_in: (input_size, 4*hidden), w_rec: (hidden, 4*hidden), b: (4*hidden,).
    """

    w_in: Node
    w_rec: Node
    b: Node
    hidden_size: int


def uniform_init(rng: np.random.Generator, shape, dtype=np.float32, scale=0.1):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def init_lstm(rng, input_size: int, hidden_size: int, dtype=np.float32) -> LstmParams:
    """Uniform [-0.1, 0.1] weights; forget-gate bias 1.0, other biases 0."""
    h = hidden_size
    b = np.zeros(4 * h, dtype=dtype)
    b[h : 2 * h] = 1.0
    return LstmParams(
        w_in=ad.leaf(uniform_init(rng, (input_size, 4 * h), dtype)),
        w_rec=ad.leaf(uniform_init(rng, (h, 4 * h), dtype)),
        b=ad.leaf(b),
        hidden_size=h,
    )


def lstm_zero_state(params: LstmParams, dtype=None) -> tuple[Node, Node]:
    dtype = dtype or params.b.value.dtype
    return ad.zeros(params.hidden_size, dtype), ad.zeros(params.hidden_size, dtype)


def lstm_step(params: LstmParams, x: Node, h: Node, c: Node) -> tuple[Node, Node]:
    """One LSTM recurrence: c' = f*c + i*g, h' = o*tanh(c')."""
    hs = params.hidden_size
    z = ad.add(
        ad.add(ad.matmul(x, params.w_in), ad.matmul(h, params.w_rec)), params.b
    )
    i = ad.sigmoid(ad.slice_(z, 0, hs))
    f = ad.sigmoid(ad.slice_(z, hs, 2 * hs))
    g = ad.tanh(ad.slice_(z, 2 * hs, 3 * hs))
    o = ad.sigmoid(ad.slice_(z, 3 * hs, 4 * hs))
    c_next = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_next = ad.mul(o, ad.tanh(c_next))
    return h_next, c_next


def lstm_run(params: LstmParams, xs, state=None) -> list[Node]:
    """Run an LSTM over a sequence, returning the hidden state per step."""
    h, c = state if state is not None else lstm_zero_state(params, xs[0].dtype)
    out = []
    for x in xs:
        h, c = lstm_step(params, x, h, c)
        out.append(h)
    return out


def bilstm_encode(fwd: LstmParams, bwd: LstmParams, xs) -> list[Node]:
    """Per-position forward-state-after-x1..xt || backward-state-after-xN..xt."""
    if not xs:
        raise ValueError("bilstm_encode requires a nonempty sequence")
    f_states = lstm_run(fwd, xs)
    b_states = lstm_run(bwd, list(reversed(xs)))
    b_states.reverse()
    return [ad.concat([f, b]) for f, b in zip(f_states, b_states)]


def final_state(fwd: LstmParams, bwd: LstmParams, xs) -> Node:
    """Both directions fully consumed: fwd last state || bwd last state."""
    if not xs:
        raise ValueError("final_state requires a nonempty sequence")
    f_last = lstm_run(fwd, xs)[-1]
    b_last = lstm_run(bwd, list(reversed(xs)))[-1]
    return ad.concat([f_last, b_last])


def feedforward2(w1: Node, b1: Node, w2: Node, b2: Node, x: Node) -> Node:
    """w2 . tanh(w1 . x + b1) + b2 as a (1,)-shaped node.

    Shapes: w1 (in, hidden), b1 (hidden,), w2 (hidden, 1), b2 (1,).
    """
    h1 = ad.tanh(ad.add(ad.matmul(x, w1), b1))
    return ad.add(ad.matmul(h1, w2), b2)


def feedforward2_rows(w1: Node, b1: Node, w2: Node, b2: Node, xs: Node) -> Node:
    """feedforward2 applied to each row of a (k, in) matrix, giving (k,)."""
    h1 = ad.tanh(ad.add(ad.matmul(xs, w1), b1))
    scores = ad.add(ad.matmul(h1, w2), b2)
    return ad.reshape(scores, (xs.value.shape[0],))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and hyperparameters, keyed like the parameter dict."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, value in params.items():
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state


def adam_step(state: AdamState, params: dict, grads: dict):
    """Bias-corrected Adam update, in place on the parameter arrays."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise ValueError(f"adam_step: missing gradients for {missing}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.shape} for {name!r}"
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
