"""Dense feed-forward networks in NumPy with hand-written backpropagation.

All arithmetic is float64. Matrix products go through ``numpy.matmul``; for
fixed parameters, inputs and BLAS build the results are reproducible run to
run.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ValidationError

from .models import Activation, LayerSpec

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Checkpoint layout:
#   8 bytes  magic ``HSMCFL\x00\x01``
#   8 bytes  little-endian uint64 header length H
#   H bytes  UTF-8 JSON ``CheckpointHeader``
#   payload  float64 little-endian; for each network in header order, for each
#            layer: weights (out_dim x in_dim, row-major) then bias (out_dim)
CHECKPOINT_MAGIC = b"HSMCFL\x00\x01"
CHECKPOINT_DTYPE = "<f8"


class ShapeError(ValueError):
    """Array shapes do not match a layer; ``layer`` is its index or None."""

    def __init__(self, message: str, layer: int | None = None) -> None:
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)
        self.layer = layer


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, layer: int, which: str) -> None:
        super().__init__(f"non-finite {which} gradient in layer {layer}")
        self.layer = layer


class CheckpointError(Exception):
    """Raised when a checkpoint file cannot be read or written."""


@dataclass(frozen=True, eq=False)
class Network:
    """Stack of dense layers; weights[i] is out_dim x in_dim."""

    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        if not len(self.layers) == len(self.weights) == len(self.biases):
            raise ShapeError("layers, weights and biases differ in length")
        for i, spec in enumerate(self.layers):
            if i and self.layers[i - 1].out_dim != spec.in_dim:
                raise ShapeError(
                    f"in_dim {spec.in_dim} does not chain with previous out_dim "
                    f"{self.layers[i - 1].out_dim}",
                    layer=i,
                )
            if self.weights[i].shape != (spec.out_dim, spec.in_dim):
                raise ShapeError(f"weights shaped {self.weights[i].shape}", layer=i)
            if self.biases[i].shape != (spec.out_dim,):
                raise ShapeError(f"bias shaped {self.biases[i].shape}", layer=i)
            if not (np.all(np.isfinite(self.weights[i])) and np.all(np.isfinite(self.biases[i]))):
                raise ShapeError("parameters must be finite", layer=i)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Per-layer inputs and pre-activations kept for ``backward``."""

    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]
    output: np.ndarray

    @property
    def activations(self) -> tuple[np.ndarray, ...]:
        return self.inputs[1:] + (self.output,)


@dataclass(frozen=True, eq=False)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    inputs: np.ndarray


@dataclass(eq=False)
class OptimizerState:
    """Learning rate, Adam moments and step counter for one network."""

    learning_rate: float
    kind: Literal["adam", "sgd"] = "adam"
    m_weights: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_network(
        cls, net: Network, learning_rate: float, kind: Literal["adam", "sgd"] = "adam",
    ) -> OptimizerState:
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        zeros_w = [np.zeros_like(w) for w in net.weights]
        zeros_b = [np.zeros_like(b) for b in net.biases]
        if kind == "sgd":
            return cls(learning_rate, kind)
        return cls(
            learning_rate, kind,
            m_weights=zeros_w, v_weights=[z.copy() for z in zeros_w],
            m_biases=zeros_b, v_biases=[z.copy() for z in zeros_b],
        )


class NormalizedRows(NamedTuple):
    rows: np.ndarray
    zero_rows: np.ndarray


def layer_stack(dims: list[int], activations: list[Activation]) -> list[LayerSpec]:
    """Chain ``dims`` into LayerSpecs; len(activations) == len(dims) - 1."""
    return [
        LayerSpec(in_dim=a, out_dim=b, activation=act)
        for a, b, act in zip(dims[:-1], dims[1:], activations)
    ]


def init_network(layers: list[LayerSpec], seed: int | np.random.Generator) -> Network:
    """Uniform fan-in initialization: every parameter ~ U(-1/sqrt(in), 1/sqrt(in))."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for spec in layers:
        bound = 1.0 / np.sqrt(spec.in_dim)
        weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
        biases.append(rng.uniform(-bound, bound, size=spec.out_dim))
    return Network(tuple(layers), tuple(weights), tuple(biases))


def identity_network(dim: int) -> Network:
    """Single identity layer that returns its input unchanged."""
    spec = LayerSpec(in_dim=dim, out_dim=dim, activation=Activation.IDENTITY)
    return Network((spec,), (np.eye(dim),), (np.zeros(dim),))


def forward(net: Network, x_batch: np.ndarray) -> ForwardCache:
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input with {net.in_dim} columns, got shape {x.shape}", layer=0)

    inputs, pre = [], []
    h = x
    for w, b, spec in zip(net.weights, net.biases, net.layers):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if spec.activation == Activation.RELU else z
    return ForwardCache(tuple(inputs), tuple(pre), h)


def backward(net: Network, cache: ForwardCache, grad_output: np.ndarray) -> Gradients:
    """Gradients of a scalar loss given dLoss/dOutput; batch terms are summed."""
    if len(cache.inputs) != len(net.layers):
        raise ShapeError(
            f"cache holds {len(cache.inputs)} layers, network has {len(net.layers)}"
        )
    for i, (inp, spec) in enumerate(zip(cache.inputs, net.layers)):
        if inp.shape[1] != spec.in_dim:
            raise ShapeError("cached input does not match layer in_dim", layer=i)
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(
            f"grad_output shaped {g.shape}, output was {cache.output.shape}",
            layer=len(net.layers) - 1,
        )

    grad_w: list[np.ndarray] = [np.empty(0)] * len(net.layers)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        if net.layers[i].activation == Activation.RELU:
            g = g * (cache.pre_activations[i] > 0.0)
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    return Gradients(tuple(grad_w), tuple(grad_b), g)


def optimizer_step(
    net: Network, grads: Gradients, state: OptimizerState,
) -> tuple[Network, OptimizerState]:
    """Apply one update; returns new network and state, inputs are untouched."""
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != net.weights[i].shape or gb.shape != net.biases[i].shape:
            raise ShapeError("gradient shape does not match parameters", layer=i)
        if not np.all(np.isfinite(gw)):
            raise NonFiniteGradientError(i, "weight")
        if not np.all(np.isfinite(gb)):
            raise NonFiniteGradientError(i, "bias")

    step = state.step + 1
    lr = state.learning_rate
    if state.kind == "sgd":
        weights = tuple(w - lr * g for w, g in zip(net.weights, grads.weights))
        biases = tuple(b - lr * g for b, g in zip(net.biases, grads.biases))
        new_state = OptimizerState(lr, "sgd", step=step)
    else:
        m_w, v_w, weights = _adam(net.weights, grads.weights, state.m_weights, state.v_weights, lr, step)
        m_b, v_b, biases = _adam(net.biases, grads.biases, state.m_biases, state.v_biases, lr, step)
        new_state = OptimizerState(lr, "adam", m_w, v_w, m_b, v_b, step)
    return Network(net.layers, weights, biases), new_state


def _adam(params, grads, ms, vs, lr: float, step: int):
    correction1 = 1.0 - ADAM_BETA1 ** step
    correction2 = 1.0 - ADAM_BETA2 ** step
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, ms, vs):
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return new_m, new_v, tuple(new_p)


def l2_normalize_rows(m: np.ndarray) -> NormalizedRows:
    """Scale each row to unit Euclidean norm; all-zero rows stay zero and are flagged."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    zero = norms == 0.0
    rows = m / np.where(zero, 1.0, norms)[:, None]
    return NormalizedRows(rows, zero)


def l2_normalize_rows_backward(m: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Chain dLoss/d(normalized rows) back to the raw rows ``m``."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    y = m / safe[:, None]
    dx = (grad - y * np.sum(y * grad, axis=1, keepdims=True)) / safe[:, None]
    dx[norms == 0.0] = 0.0
    return dx


# --- Checkpoints ---


class _NetworkHeader(BaseModel):
    name: str
    layers: list[LayerSpec]


class CheckpointHeader(BaseModel):
    format: str = "hsmcfl-checkpoint"
    version: int = 1
    dtype: str = CHECKPOINT_DTYPE
    networks: list[_NetworkHeader]
    metadata: dict[str, Any] = {}


def save_checkpoint(
    path: Path, networks: dict[str, Network], metadata: dict[str, Any] | None = None,
) -> Path:
    header = CheckpointHeader(
        networks=[_NetworkHeader(name=n, layers=list(net.layers)) for n, net in networks.items()],
        metadata=metadata or {},
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(header_bytes)), header_bytes]
    for net in networks.values():
        for w, b in zip(net.weights, net.biases):
            chunks.append(np.ascontiguousarray(w, dtype=CHECKPOINT_DTYPE).tobytes())
            chunks.append(np.ascontiguousarray(b, dtype=CHECKPOINT_DTYPE).tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise CheckpointError(f"Cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, Network], dict[str, Any]]:
    """Returns the named networks and the metadata stored with them."""
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an HSMCFL checkpoint")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = CheckpointHeader.model_validate(json.loads(blob[16:16 + header_len]))
    except (ValidationError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {exc}") from exc

    try:
        payload = np.frombuffer(blob, dtype=header.dtype, offset=16 + header_len)
    except ValueError as exc:
        raise CheckpointError(f"Payload of {path} is not a float64 array: {exc}") from exc
    offset = 0
    networks: dict[str, Network] = {}
    for entry in header.networks:
        weights, biases = [], []
        for spec in entry.layers:
            n_w, n_b = spec.out_dim * spec.in_dim, spec.out_dim
            if offset + n_w + n_b > payload.size:
                raise CheckpointError(f"Truncated payload in {path}")
            weights.append(payload[offset:offset + n_w].reshape(spec.out_dim, spec.in_dim).astype(np.float64))
            offset += n_w
            biases.append(payload[offset:offset + n_b].astype(np.float64))
            offset += n_b
        networks[entry.name] = Network(tuple(entry.layers), tuple(weights), tuple(biases))
    if offset != payload.size:
        raise CheckpointError(f"{payload.size - offset} trailing values in {path}")
    return networks, header.metadata
