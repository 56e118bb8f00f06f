"""Layer specifications, network construction and the Adam optimizer."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

ACTIVATIONS = ("relu", None)


def _check_activation(act):
    if act not in ACTIVATIONS:
        raise ValueError(f"activation must be 'relu' or None, got {act!r}")


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str | None = None

    def __post_init__(self):
        if self.units <= 0:
            raise ValueError("Dense units must be positive")
        _check_activation(self.activation)


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple[int, int]
    strides: tuple[int, int] = (1, 1)
    activation: str | None = None

    def __post_init__(self):
        _check_conv(self)


@dataclass(frozen=True)
class Conv2DTranspose:
    filters: int
    kernel: tuple[int, int]
    strides: tuple[int, int] = (1, 1)
    activation: str | None = None

    def __post_init__(self):
        _check_conv(self)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"Dropout rate must lie in [0, 1), got {self.rate}")


LayerSpec = Union[Dense, Conv2D, Conv2DTranspose, Flatten, Dropout]
_KINDS = {cls.__name__: cls for cls in (Dense, Conv2D, Conv2DTranspose, Flatten, Dropout)}


def _check_conv(spec):
    object.__setattr__(spec, "kernel", tuple(int(v) for v in spec.kernel))
    object.__setattr__(spec, "strides", tuple(int(v) for v in spec.strides))
    if spec.filters <= 0:
        raise ValueError("filters must be positive")
    if min(spec.kernel) < 1 or min(spec.strides) < 1:
        raise ValueError("kernel extents and strides must be >= 1")
    _check_activation(spec.activation)


def spec_to_dict(spec: LayerSpec) -> dict:
    return {"kind": type(spec).__name__, **asdict(spec)}


def spec_from_dict(d: Mapping) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**d)


def layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape after ``spec`` for a per-sample input ``shape`` (batch axis excluded)."""
    if isinstance(spec, Dense):
        if len(shape) != 1:
            raise ShapeError(f"Dense expects a flat input, got {shape}")
        return (spec.units,)
    if isinstance(spec, Conv2D):
        if len(shape) != 3:
            raise ShapeError(f"Conv2D expects HxWxC input, got {shape}")
        (h, w, _), (kh, kw), (sh, sw) = shape, spec.kernel, spec.strides
        if kh > h or kw > w:
            raise ShapeError(f"Conv2D kernel {kh}x{kw} larger than input {h}x{w}")
        return (ad.conv_output_size(h, kh, sh), ad.conv_output_size(w, kw, sw), spec.filters)
    if isinstance(spec, Conv2DTranspose):
        if len(shape) != 3:
            raise ShapeError(f"Conv2DTranspose expects HxWxC input, got {shape}")
        return (shape[0] * spec.strides[0], shape[1] * spec.strides[1], spec.filters)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    return shape


def layer_param_shapes(spec: LayerSpec, shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if isinstance(spec, Dense):
        return {"kernel": (shape[0], spec.units), "bias": (spec.units,)}
    if isinstance(spec, Conv2D):
        return {"kernel": (*spec.kernel, shape[2], spec.filters), "bias": (spec.filters,)}
    if isinstance(spec, Conv2DTranspose):
        return {"kernel": (*spec.kernel, spec.filters, shape[2]), "bias": (spec.filters,)}
    return {}


def _fans(spec: LayerSpec, kshape: tuple[int, ...]) -> tuple[int, int]:
    if isinstance(spec, Dense):
        return kshape[0], kshape[1]
    field_size = kshape[0] * kshape[1]
    if isinstance(spec, Conv2D):
        return field_size * kshape[2], field_size * kshape[3]
    # transpose kernels are [kh, kw, Cout, Cin]
    return field_size * kshape[3], field_size * kshape[2]


def shape_chain(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Per-sample shapes: input first, then the output of every layer."""
    shapes = [tuple(int(v) for v in input_shape)]
    for i, spec in enumerate(specs):
        try:
            shapes.append(layer_output_shape(spec, shapes[-1]))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({type(spec).__name__}): {exc}") from None
    return shapes


def count_parameters(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> int:
    """Closed-form parameter count from the specs alone."""
    shapes = shape_chain(specs, input_shape)
    total = 0
    for spec, shape in zip(specs, shapes):
        if isinstance(spec, Dense):
            total += shape[0] * spec.units + spec.units
        elif isinstance(spec, (Conv2D, Conv2DTranspose)):
            total += spec.kernel[0] * spec.kernel[1] * shape[2] * spec.filters + spec.filters
    return total


@dataclass
class Network:
    """An ordered layer stack owning its parameter tensors.

    Parameters are named ``"{layer index}.kernel"`` / ``"{layer index}.bias"``
    and kept in definition order.
    """

    specs: list[LayerSpec]
    input_shape: tuple[int, ...]
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return shape_chain(self.specs, self.input_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, x, training=training, rng=rng)

    def to_config(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [spec_to_dict(s) for s in self.specs]}


def build_network(specs: Iterable[LayerSpec], input_shape: Sequence[int], seed: int) -> Network:
    """Validate the shape chain and draw Glorot-uniform weights, zero biases."""
    specs = list(specs)
    shapes = shape_chain(specs, input_shape)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, (spec, shape) in enumerate(zip(specs, shapes)):
        pshapes = layer_param_shapes(spec, shape)
        if not pshapes:
            continue
        kshape = pshapes["kernel"]
        fan_in, fan_out = _fans(spec, kshape)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        kernel = rng.uniform(-limit, limit, size=kshape)
        params[f"{i}.kernel"] = Tensor(kernel, requires_grad=True)
        params[f"{i}.bias"] = Tensor(np.zeros(pshapes["bias"]), requires_grad=True)
    return Network(specs=specs, input_shape=shapes[0], params=params)


def forward(net: Network, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Run ``x`` (leading batch axis) through every layer of ``net``."""
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"network expects per-sample shape {net.input_shape}, got {tuple(x.shape[1:])}")
    h = x
    for i, spec in enumerate(net.specs):
        if isinstance(spec, Dense):
            h = ad.matmul(h, net.params[f"{i}.kernel"]) + net.params[f"{i}.bias"]
        elif isinstance(spec, Conv2D):
            h = ad.conv2d(h, net.params[f"{i}.kernel"], net.params[f"{i}.bias"], stride=spec.strides)
        elif isinstance(spec, Conv2DTranspose):
            h = ad.conv2d_transpose(h, net.params[f"{i}.kernel"], net.params[f"{i}.bias"], stride=spec.strides)
        elif isinstance(spec, Flatten):
            h = ad.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        elif isinstance(spec, Dropout):
            h = ad.dropout(h, spec.rate, training, rng)
        if getattr(spec, "activation", None) == "relu":
            h = ad.relu(h)
    return h


def checksum(params: Mapping[str, Tensor]) -> str:
    """SHA-256 over parameter names and raw bytes, in order."""
    digest = hashlib.sha256()
    for name, p in params.items():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(f"missing gradient for parameters: {', '.join(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            v = state.v[name] = np.zeros(p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Convenience wrapper binding a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: (p.grad if p.grad is not None else np.zeros(p.shape)) for n, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr)
