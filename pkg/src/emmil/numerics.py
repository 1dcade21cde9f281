"""Small dense MLPs with hand-written reverse mode, BCE and Adam.

Arrays are plain float64 numpy arrays; rows are clips, columns are features
or classes. Everything here is deterministic given a seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from emmil.errors import ConfigError, NumericsError

BCE_EPS = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class ScoringNetwork:
    """MLP with ReLU hidden layers and a sigmoid (or identity) output layer.

    Applied row-wise: a ``(T, d)`` input gives a ``(T, k)`` output.
    """

    layers: list[Layer]
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("network needs at least one layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].fan_out != self.layers[i + 1].fan_in:
                raise ConfigError(
                    f"layer {i} outputs {self.layers[i].fan_out} but layer {i + 1} "
                    f"expects {self.layers[i + 1].fan_in}"
                )
        if self.output_activation not in ("sigmoid", "identity"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @classmethod
    def init(
        cls,
        sizes: list[int] | tuple[int, ...],
        rng: np.random.Generator,
        output_activation: str = "sigmoid",
    ) -> "ScoringNetwork":
        """Glorot-uniform weights, zero biases. ``sizes = [d, h1, ..., k]``."""
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"invalid layer sizes {list(sizes)}")
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out)))
        return cls(layers, output_activation)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def num_parameters(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.weight, l.bias])
        return out

    def copy(self) -> "ScoringNetwork":
        return ScoringNetwork(
            [Layer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            self.output_activation,
        )

    def to_dict(self) -> dict:
        return {
            "output_activation": self.output_activation,
            "layers": [
                {"weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoringNetwork":
        layers = [
            Layer(np.asarray(l["weight"], dtype=np.float64).reshape(len(l["weight"]), -1),
                  np.asarray(l["bias"], dtype=np.float64))
            for l in d["layers"]
        ]
        return cls(layers, d.get("output_activation", "sigmoid"))


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # input to each layer
    pre_activations: list[np.ndarray]
    output: np.ndarray


def forward(net: ScoringNetwork, inputs: np.ndarray, keep_cache: bool = False):
    """Evaluate ``net`` on every row of ``inputs``.

    Returns the ``(T, k)`` output, or a :class:`ForwardCache` when
    ``keep_cache`` is set (needed for :func:`backward`).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ConfigError(
            f"input shape {x.shape} incompatible with network input dim {net.input_dim}"
        )
    acts, pres = [], []
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        acts.append(h)
        z = h @ layer.weight + layer.bias
        pres.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif net.output_activation == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    if keep_cache:
        return ForwardCache(acts, pres, h)
    return h


def backward(net: ScoringNetwork, cache: ForwardCache, grad_output: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dLoss/dOutput, ordered like ``net.parameters()``."""
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ConfigError(f"gradient shape {g.shape} != output shape {cache.output.shape}")
    if net.output_activation == "sigmoid":
        g = g * cache.output * (1.0 - cache.output)
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        grads[2 * i] = cache.activations[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ layer.weight.T) * (cache.pre_activations[i - 1] > 0.0)
    return grads


def bce_loss(
    predictions: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray | None = None,
    eps: float = BCE_EPS,
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over unmasked entries and its gradient.

    Predictions are clamped to ``[eps, 1 - eps]``; the returned gradient is
    that of the clamped expression, so it is zero where the clamp is active
    and at masked entries. An all-zero mask gives loss 0.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError(f"prediction shape {p.shape} != target shape {t.shape}")
    m = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != p.shape:
        raise ConfigError(f"mask shape {m.shape} != prediction shape {p.shape}")
    n = m.sum()
    if n == 0:
        return 0.0, np.zeros_like(p)
    pc = np.clip(p, eps, 1.0 - eps)
    per_entry = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    loss = float((per_entry * m).sum() / n)
    inside = (p >= eps) & (p <= 1.0 - eps)
    grad = (-(t / pc) + (1.0 - t) / (1.0 - pc)) * m * inside / n
    return loss, grad


@dataclass
class OptimizerState:
    """Adam moments for one network."""

    learning_rate: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: ScoringNetwork, learning_rate: float, **kw) -> "OptimizerState":
        if not learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        params = net.parameters()
        return cls(learning_rate, [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.learning_rate, [a.copy() for a in self.m],
                              [a.copy() for a in self.v], self.step,
                              self.beta1, self.beta2, self.eps)


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
                lr: float | None = None) -> None:
    """In-place Adam step on ``params``. ``lr`` overrides the state's rate."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in parameter {i} (layer {i // 2})")
    lr = state.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def backward_and_step(net: ScoringNetwork, state: OptimizerState, cache: ForwardCache,
                      loss_gradient: np.ndarray, lr: float | None = None) -> list[np.ndarray]:
    grads = backward(net, cache, loss_gradient)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            kind = "weight" if i % 2 == 0 else "bias"
            raise NumericsError(f"non-finite {kind} gradient in layer {i // 2}")
    adam_update(net.parameters(), grads, state, lr)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f, params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each entry of ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            fp = f()
            flat[j] = old - h
            fm = f()
            flat[j] = old
            gflat[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def grad_check(net: ScoringNetwork, inputs: np.ndarray, targets: np.ndarray,
               mask: np.ndarray | None = None, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences for BCE(net(inputs), targets)."""
    if net.num_parameters > 1000:
        raise ConfigError("grad_check is meant for networks with at most 1000 parameters")
    cache = forward(net, inputs, keep_cache=True)
    _, g_out = bce_loss(cache.output, targets, mask)
    analytic = backward(net, cache, g_out)
    numeric = numeric_gradient(lambda: bce_loss(forward(net, inputs), targets, mask)[0],
                               net.parameters(), h)
    return float(max(relative_error(a, n).max() for a, n in zip(analytic, numeric)))


def parameter_digest(net: ScoringNetwork) -> str:
    import hashlib

    hsh = hashlib.sha256()
    for p in net.parameters():
        hsh.update(np.ascontiguousarray(p).tobytes())
    return hsh.hexdigest()
