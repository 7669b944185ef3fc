"""Dense MLPs and the Adam optimizer on top of :mod:`survae.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
}


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class MlpParams:
    """Layer weights ``W[k]`` of shape (fan_in, fan_out) and biases ``b[k]``.

    Entries may be arrays or :class:`~survae.autodiff.Node` leaves; the
    latter is how a training step obtains gradients.
    """

    weights: list
    biases: list
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            ws, bs = np.shape(_val(w)), np.shape(_val(b))
            if len(ws) != 2 or bs != (ws[1],):
                raise ValueError(f"layer {k}: weight {ws} and bias {bs} do not chain")
            if k and np.shape(_val(self.weights[k - 1]))[1] != ws[0]:
                raise ValueError(f"layer {k}: input width {ws[0]} does not match previous output")
        for name in (self.hidden_activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def widths(self) -> list[int]:
        w0 = np.shape(_val(self.weights[0]))
        return [w0[0]] + [np.shape(_val(w))[1] for w in self.weights]

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [_val(w), _val(b)]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(arrays[0::2], arrays[1::2], self.hidden_activation, self.output_activation)


def _val(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x)


def init_mlp(
    widths: list[int],
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "linear",
) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, hidden_activation, output_activation)


def dropout_mask(rng: np.random.Generator, shape, keep_prob: float) -> np.ndarray:
    """Bernoulli keep-mask already scaled by 1/keep_prob (inverted dropout)."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if keep_prob == 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep_prob) / keep_prob


def mlp_forward(params: MlpParams, x, mask=None):
    """Run the network on a vector (width,) or batch (n, width).

    ``mask`` multiplies the first hidden layer's activations; pass None at
    inference.  Returns a Node when any input is a Node, else an array.
    """
    track = isinstance(x, ad.Node) or any(
        isinstance(p, ad.Node) for p in params.weights + params.biases
    )
    h = ad.as_node(x)
    if h.shape[-1] != params.input_width:
        raise ValueError(f"input width {h.shape[-1]} != network input width {params.input_width}")
    hidden = ACTIVATIONS[params.hidden_activation]
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if k < n_layers - 1:
            h = hidden(h)
            if k == 0 and mask is not None:
                m = np.asarray(mask, dtype=np.float64)
                if m.shape[-1] != h.shape[-1]:
                    raise ValueError(
                        f"dropout mask width {m.shape[-1]} != hidden width {h.shape[-1]}"
                    )
                h = ad.dropout(h, m)
        else:
            h = ACTIVATIONS[params.output_activation](h)
    return h if track else h.value


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
