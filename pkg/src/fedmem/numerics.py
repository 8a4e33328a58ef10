"""Dense feed-forward networks with hand-written reverse-mode gradients.

Every model in the simulator (client classifiers, friend models and the
conditional generator) is a plain MLP stored as a :class:`ParamSet`.  Values
are float64 numpy arrays throughout; a ParamSet is treated as immutable and
every operation returns a new one.

Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, NumericError, ParseError

ACTIVATIONS = ("relu", "tanh", "linear")

MAGIC = b"APFL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Layer:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


class ParamSet:
    """Ordered named layers of one MLP.

    The same container doubles as the gradient type: a gradient is a
    ParamSet that is layout-equal to the parameters it differentiates.
    """

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[Layer]):
        layers = tuple(layers)
        if not layers:
            raise ConfigurationError("a ParamSet needs at least one layer")
        names = set()
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(
                    f"layer {layer.name!r}: unknown activation {layer.activation!r}"
                )
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ConfigurationError(
                    f"layer {layer.name!r}: weight {layer.weight.shape} and bias "
                    f"{layer.bias.shape} are incompatible"
                )
            if layer.name in names:
                raise ConfigurationError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            if i and layers[i - 1].fan_out != layer.fan_in:
                raise ConfigurationError(
                    f"layer {layer.name!r} expects {layer.fan_in} inputs but "
                    f"{layers[i - 1].name!r} emits {layers[i - 1].fan_out}"
                )
        self.layers = layers

    # -- structure ---------------------------------------------------------
    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].fan_in,) + tuple(l.fan_out for l in self.layers)

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(l.activation for l in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def layout(self) -> tuple:
        return tuple((l.name, l.weight.shape, l.bias.shape) for l in self.layers)

    def layout_equal(self, other: "ParamSet") -> bool:
        return self.layout() == other.layout()

    # -- array views -------------------------------------------------------
    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.append(l.weight)
            out.append(l.bias)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ParamSet":
        if len(arrays) != 2 * len(self.layers):
            raise ConfigurationError("array count does not match layer count")
        layers = []
        for i, l in enumerate(self.layers):
            w = np.asarray(arrays[2 * i], dtype=np.float64)
            b = np.asarray(arrays[2 * i + 1], dtype=np.float64)
            if w.shape != l.weight.shape or b.shape != l.bias.shape:
                raise ConfigurationError(f"layer {l.name!r}: shape mismatch")
            layers.append(Layer(l.name, w, b, l.activation))
        return ParamSet(layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ConfigurationError(f"expected {self.size} values, got {flat.shape}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self.with_arrays(out)

    def copy(self) -> "ParamSet":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "ParamSet":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def scale(self, c: float) -> "ParamSet":
        return self.with_arrays([c * a for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "ParamSet") -> bool:
        """Bit-level equality including layout."""
        return self.layout_equal(other) and self.activations == other.activations and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __repr__(self) -> str:
        return f"ParamSet(widths={self.widths}, activations={self.activations})"


Gradients = ParamSet


def affine(a: ParamSet, b: ParamSet, wa: float, wb: float) -> ParamSet:
    """Elementwise ``wa * a + wb * b``."""
    if not a.layout_equal(b):
        raise ConfigurationError("affine combination of ParamSets with different layouts")
    return a.with_arrays([wa * x + wb * y for x, y in zip(a.arrays(), b.arrays())])


def init_mlp(
    widths: Sequence[int],
    seed: int | np.random.Generator = 0,
    hidden_activation: str = "relu",
    output_activation: str = "linear",
    prefix: str = "fc",
) -> ParamSet:
    """He-normal initialised MLP with zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigurationError(f"invalid layer widths {widths}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    n = len(widths) - 1
    for i in range(n):
        act = output_activation if i == n - 1 else hidden_activation
        gain = 2.0 if act == "relu" else 1.0
        w = rng.normal(0.0, np.sqrt(gain / widths[i]), size=(widths[i], widths[i + 1]))
        layers.append(Layer(f"{prefix}{i}", w, np.zeros(widths[i + 1]), act))
    return ParamSet(layers)


# -- forward / backward -----------------------------------------------------

def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: str, g: np.ndarray) -> np.ndarray:
    if act == "relu":
        return g * (z > 0.0)
    if act == "tanh":
        return g * (1.0 - a * a)
    return g


def _check_input(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ConfigurationError(f"batch must be 2-d, got shape {batch.shape}")
    if batch.shape[1] != params.input_dim:
        raise ConfigurationError(
            f"batch has {batch.shape[1]} columns but the first layer expects {params.input_dim}"
        )
    return batch


def forward(params: ParamSet, batch: np.ndarray) -> np.ndarray:
    """Raw network outputs (logits for a classifier)."""
    out = _check_input(params, batch)
    for l in params.layers:
        out = _activate(out @ l.weight + l.bias, l.activation)
    return out


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def result(self) -> np.ndarray:
        return self.outputs[-1]


def forward_with_cache(params: ParamSet, batch: np.ndarray) -> ForwardCache:
    cache = ForwardCache()
    out = _check_input(params, batch)
    for l in params.layers:
        cache.inputs.append(out)
        z = out @ l.weight + l.bias
        out = _activate(z, l.activation)
        cache.preacts.append(z)
        cache.outputs.append(out)
    return cache


def backward_from_cache(
    params: ParamSet,
    cache: ForwardCache,
    grad_out: np.ndarray,
    param_grads: bool = True,
) -> tuple[Gradients | None, np.ndarray]:
    """Vector-Jacobian product of the network at a cached forward pass.

    Returns the parameter gradient (or None when ``param_grads`` is False,
    as for frozen models) and the gradient with respect to the input batch.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    grads: list[np.ndarray] = [None] * (2 * len(params.layers))  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        l = params.layers[i]
        g = _activation_grad(cache.preacts[i], cache.outputs[i], l.activation, g)
        if param_grads:
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ l.weight.T
    return (params.with_arrays(grads) if param_grads else None), g


# -- losses -----------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise InputError(f"label {bad} outside [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy_rows(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient ``softmax - onehot`` (unscaled)."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return losses, grad


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    losses, grad = cross_entropy_rows(logits, labels)
    n = len(losses)
    return float(losses.mean()), grad / n


class CrossEntropy:
    """Plain mean cross-entropy of the network's logits."""

    def value_and_grad(self, params: ParamSet, batch, labels) -> tuple[float, Gradients]:
        cache = forward_with_cache(params, batch)
        loss, g = softmax_cross_entropy(cache.result, labels)
        grads, _ = backward_from_cache(params, cache, g)
        return loss, grads


@dataclass(frozen=True)
class ProximalCrossEntropy:
    """Cross-entropy plus ``mu/2 * ||params - anchor||^2`` (FedProx)."""

    mu: float
    anchor: ParamSet

    def value_and_grad(self, params: ParamSet, batch, labels) -> tuple[float, Gradients]:
        if not params.layout_equal(self.anchor):
            raise ConfigurationError("proximal anchor layout differs from the trained parameters")
        loss, grads = CrossEntropy().value_and_grad(params, batch, labels)
        if self.mu == 0.0:
            return loss, grads
        diffs = [p - a for p, a in zip(params.arrays(), self.anchor.arrays())]
        loss += 0.5 * self.mu * sum(float(np.sum(d * d)) for d in diffs)
        grads = grads.with_arrays([g + self.mu * d for g, d in zip(grads.arrays(), diffs)])
        return loss, grads


def backward(params: ParamSet, batch, labels, loss_spec=None) -> tuple[float, Gradients]:
    """Loss value and parameter gradient for any object exposing ``value_and_grad``."""
    spec = CrossEntropy() if loss_spec is None else loss_spec
    loss, grads = spec.value_and_grad(params, batch, labels)
    if not grads.layout_equal(params):
        raise ConfigurationError("loss produced gradients with a foreign layout")
    return loss, grads


# -- Adam -------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, **hyper) -> "AdamState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(zeros, tuple(np.zeros_like(a) for a in params.arrays()), 0, **hyper)


def adam_step(
    params: ParamSet, grads: Gradients, state: AdamState, lr: float
) -> tuple[ParamSet, AdamState]:
    if not params.layout_equal(grads) or len(state.m) != len(params.arrays()):
        raise ConfigurationError("Adam step on mismatched layouts")
    if any(m.shape != a.shape for m, a in zip(state.m, params.arrays())):
        raise ConfigurationError("Adam state layout differs from the parameters")
    if not grads.is_finite():
        raise NumericError("non-finite gradient; Adam step refused")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), AdamState(
        tuple(new_m), tuple(new_v), t, b1, b2, state.eps
    )


# -- binary container -------------------------------------------------------

def _write_str(buf: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _write_array(buf: BinaryIO, a: np.ndarray) -> None:
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def params_to_bytes(params: ParamSet) -> bytes:
    """Serialise to the ``APFL`` container.

    Layout: magic, u32 version, u32 layer count, then per layer the name,
    the activation tag and the weight and bias arrays (u32 ndim, u32 dims,
    little-endian float64 payload).  Strings are u32-length-prefixed UTF-8.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(params.layers)))
    for l in params.layers:
        _write_str(buf, l.name)
        _write_str(buf, l.activation)
        _write_array(buf, l.weight)
        _write_array(buf, l.bias)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError("truncated ParamSet container")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)


def params_from_bytes(data: bytes) -> ParamSet:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ParseError("not an APFL ParamSet container (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported container version {version}")
    layers = []
    for _ in range(r.u32()):
        name = r.string()
        act = r.string()
        w = r.array()
        b = r.array()
        layers.append(Layer(name, w, b, act))
    if r.pos != len(data):
        raise ParseError("trailing bytes after ParamSet container")
    return ParamSet(layers)


def save_params(params: ParamSet, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(params_to_bytes(params))
    return path


def load_params(path: str | Path) -> ParamSet:
    return params_from_bytes(Path(path).read_bytes())


# -- flat-buffer fast path --------------------------------------------------

class FlatModel:
    """Mutable single-buffer copy of a ParamSet for tight training loops.

    Weights and gradients live in one contiguous vector each, with per-layer
    views, so an optimiser step touches three arrays instead of one per
    layer.  The arithmetic is the same as the functional path.
    """

    def __init__(self, params: ParamSet):
        self.template = params
        self.flat = params.flatten()
        self.grad = np.zeros_like(self.flat)
        self.acts = params.activations
        self.w, self.b, self.gw, self.gb = [], [], [], []
        pos = 0
        for l in params.layers:
            for store, gstore, shape in ((self.w, self.gw, l.weight.shape), (self.b, self.gb, l.bias.shape)):
                size = int(np.prod(shape))
                store.append(self.flat[pos : pos + size].reshape(shape))
                gstore.append(self.grad[pos : pos + size].reshape(shape))
                pos += size

    def forward(self, x: np.ndarray) -> np.ndarray:
        for w, b, act in zip(self.w, self.b, self.acts):
            x = _activate(x @ w + b, act)
        return x

    def forward_cache(self, x: np.ndarray) -> ForwardCache:
        cache = ForwardCache()
        for w, b, act in zip(self.w, self.b, self.acts):
            cache.inputs.append(x)
            z = x @ w + b
            x = _activate(z, act)
            cache.preacts.append(z)
            cache.outputs.append(x)
        return cache

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> np.ndarray:
        """Write parameter gradients into ``self.grad``; return the input gradient."""
        g = grad_out
        for i in range(len(self.w) - 1, -1, -1):
            g = _activation_grad(cache.preacts[i], cache.outputs[i], self.acts[i], g)
            np.matmul(cache.inputs[i].T, g, out=self.gw[i])
            np.sum(g, axis=0, out=self.gb[i])
            g = g @ self.w[i].T
        return g

    def to_params(self) -> ParamSet:
        return self.template.unflatten(self.flat)


class FlatAdam:
    """In-place Adam over a FlatModel buffer; same update rule as :func:`adam_step`."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient; Adam step refused")
        b1, b2 = self.beta1, self.beta2
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * (grad * grad)
        flat -= lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)

    def state(self, template: ParamSet) -> AdamState:
        m = template.unflatten(self.m).arrays()
        v = template.unflatten(self.v).arrays()
        return AdamState(tuple(m), tuple(v), self.t, self.beta1, self.beta2, self.eps)

    @classmethod
    def from_state(cls, state: AdamState) -> "FlatAdam":
        opt = cls(sum(a.size for a in state.m), state.beta1, state.beta2, state.eps)
        opt.m = np.concatenate([a.ravel() for a in state.m])
        opt.v = np.concatenate([a.ravel() for a in state.v])
        opt.t = state.t
        return opt
