"""Tiny numpy MLP with a flat parameter vector, reverse-mode gradients and Adam.

Only the handful of array primitives needed by the flow-matching and policy
losses are differentiable here. Everything runs in float64.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def slices(self) -> list[tuple[slice, slice]]:
        """(weight, bias) slices into the flat vector, layer by layer."""
        out, k = [], 0
        for i, o in self.layer_dims:
            w = slice(k, k + i * o)
            k += i * o
            b = slice(k, k + o)
            k += o
            out.append((w, b))
        return out


# ---------------------------------------------------------------------------
# reverse-mode autodiff over numpy arrays
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b whose rows do not depend on which other rows are in the batch.

    BLAS kernels change accumulation order with the batch size; the ratio at
    the behaviour policy must come out exactly 1 regardless of batching.
    """
    return np.einsum("ni,io->no", a, b, optimize=False)


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    return data


class Tensor:
    """Array node in a reverse-mode graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x, op="const")

    def _node(self, data, parents, backward, op):
        return Tensor(_check(data, op), parents, backward, op)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._node(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __neg__(self):
        return self._node(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return self._node(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def back(g):
            return g @ b.data.T, a.data.T @ g

        return self._node(rowwise_matmul(a.data, b.data), (a, b), back, "matmul")

    def __rmatmul__(self, other):
        return Tensor._lift(other) @ self

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return self._node(a.data[idx], (a,), back, "getitem")

    def reshape(self, *shape):
        a = self
        return self._node(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    # elementwise ------------------------------------------------------------
    def tanh(self):
        out = np.tanh(self.data)
        return self._node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self):
        mask = self.data > 0
        return self._node(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def exp(self):
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return self._node(out, (self,), lambda g: (g * out,), "exp")

    def square(self):
        a = self
        return self._node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")

    def clip(self, lo: float, hi: float):
        """Clip with zero derivative unless strictly inside (lo, hi)."""
        inside = (self.data > lo) & (self.data < hi)
        return self._node(np.clip(self.data, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # reductions -------------------------------------------------------------
    def sum(self, axis=None):
        a = self

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

        return self._node(a.data.sum(axis=axis), (a,), back, "sum")

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) / n

    # backward ---------------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                _check(pg, f"backward of {node.op}")
                grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    take_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return a._node(np.where(take_a, a.data, b.data), (a, b), back, "minimum")


def grad_scalar(params: np.ndarray, loss: Callable[[Tensor], Tensor]) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar loss built from Tensor ops on ``params``."""
    p = Tensor(np.array(params, dtype=np.float64, copy=True))
    out = loss(p)
    if not isinstance(out, Tensor):
        return float(out), np.zeros_like(p.data)
    out.backward()
    g = p.grad if p.grad is not None else np.zeros_like(p.data)
    return float(out.data), g


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def mlp_init(spec: MlpSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for (w, _), (fan_in, fan_out) in zip(spec.slices(), spec.layer_dims):
        params[w] = rng.standard_normal(fan_in * fan_out) / np.sqrt(fan_in)
    return params


def _check_params(params, spec: MlpSpec):
    n = params.data.size if isinstance(params, Tensor) else np.size(params)
    if n != spec.n_params:
        raise ShapeError(f"parameter vector has length {n}, spec needs {spec.n_params}")


def mlp_apply(params, spec: MlpSpec, inputs: np.ndarray):
    """Batched forward pass. ``params`` may be an ndarray or a Tensor."""
    _check_params(params, spec)
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, spec expects {spec.input_dim}")
    h = x
    n_layers = len(spec.layer_dims)
    for k, ((ws, bs), (i, o)) in enumerate(zip(spec.slices(), spec.layer_dims)):
        w = params[ws].reshape(i, o)
        h = (h @ w if isinstance(w, Tensor) else rowwise_matmul(h, w)) + params[bs]
        if k < n_layers - 1:
            if isinstance(h, Tensor):
                h = h.tanh() if spec.activation == "tanh" else h.relu()
            else:
                h = np.tanh(h) if spec.activation == "tanh" else np.maximum(h, 0.0)
    return h


def mlp_forward(params: np.ndarray, spec: MlpSpec, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise ShapeError(f"expected input of length {spec.input_dim}, got shape {x.shape}")
    return mlp_apply(np.asarray(params, dtype=np.float64), spec, x[None, :])[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(), self.step_count,
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step. Returns new params and a new state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError("params, grads and optimizer moments must have equal length")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"FLWMLP01"
_ACT_TAGS = {"tanh": 0, "relu": 1}


def save_params(path, params: np.ndarray, spec: MlpSpec) -> None:
    """Write a checkpoint; layout is documented in docs/checkpoint.md."""
    _check_params(params, spec)
    header = MAGIC + struct.pack(
        f"<III{len(spec.hidden_dims)}IBQ",
        spec.input_dim, spec.output_dim, len(spec.hidden_dims), *spec.hidden_dims,
        _ACT_TAGS[spec.activation], spec.n_params,
    )
    Path(path).write_bytes(header + np.asarray(params, dtype="<f8").tobytes())


def load_params(path) -> tuple[np.ndarray, MlpSpec]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: not a parameter checkpoint")
    try:
        input_dim, output_dim, n_hidden = struct.unpack_from("<III", raw, 8)
        off = 20
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
        act_tag, count = struct.unpack_from("<BQ", raw, off)
        off += struct.calcsize("<BQ")
        act = {v: k for k, v in _ACT_TAGS.items()}[act_tag]
    except (struct.error, KeyError):
        raise ConfigError(f"{path}: truncated or corrupt checkpoint header") from None
    spec = MlpSpec(input_dim, hidden, output_dim, act)
    if count != spec.n_params or len(raw) - off != 8 * count:
        raise ConfigError(f"{path}: parameter count does not match header")
    return np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64), spec
