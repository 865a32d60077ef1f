"""Minimal reverse-mode autodiff over dense float64 arrays.

Implements exactly the op set the stress nets need: affine layers,
elementwise activations, squared-error losses, and scalar add/scale for
combining loss terms. Forward calls build a small graph of `Tensor`
nodes; `backward` walks it in reverse topological order and accumulates
gradients into the leaves. Everything is float64 and deterministic:
same inputs, same outputs, bit for bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ValidationError


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` (parameters) own a
    pre-allocated gradient slot of the same shape. Intermediate nodes
    get their gradient lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Row-batched x @ weights + bias."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ConfigError(
            f"affine expects 2-d input and weights, got {x.shape} and {weights.shape}"
        )
    if x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ConfigError(
            "affine shape mismatch: input "
            f"{x.shape} x weights {weights.shape} + bias {bias.shape}"
        )
    out_data = x.data @ weights.data + bias.data

    def backward_fn(grad):
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += grad @ weights.data.T
        if weights.requires_grad:
            weights.grad += x.data.T @ grad
        if bias.requires_grad:
            bias.grad += grad.sum(axis=0)

    return _node(out_data, (x, weights, bias), backward_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = ("relu", "sigmoid", "identity")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation. relu derivative at exactly 0 is 0."""
    if kind == "identity":
        return x
    if kind == "relu":
        out_data = np.maximum(x.data, 0.0)
        mask = x.data > 0.0

        def backward_relu(grad):
            x._ensure_grad()
            x.grad += grad * mask

        return _node(out_data, (x,), backward_relu)
    if kind == "sigmoid":
        out_data = _sigmoid(x.data)

        def backward_sigmoid(grad):
            x._ensure_grad()
            x.grad += grad * (out_data * (1.0 - out_data))

        return _node(out_data, (x,), backward_sigmoid)
    raise ConfigError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


def sq_err_loss(pred: Tensor, target: Tensor) -> Tensor:
    """0.5 * sum((pred - target)^2) over all elements."""
    if pred.shape != target.shape:
        raise ConfigError(
            f"sq_err_loss shape mismatch: pred {pred.shape} vs target {target.shape}"
        )
    diff = pred.data - target.data
    out_data = np.asarray(0.5 * np.sum(diff * diff))

    def backward_fn(grad):
        g = float(grad.reshape(()))
        if pred.requires_grad or pred._parents:
            pred._ensure_grad()
            pred.grad += g * diff
        if target.requires_grad or target._parents:
            target._ensure_grad()
            target.grad -= g * diff

    return _node(out_data, (pred, target), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward_fn(grad):
        for t in (a, b):
            if t.requires_grad or t._parents:
                t._ensure_grad()
                t.grad += grad

    return _node(out_data, (a, b), backward_fn)


def scale(t: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = t.data * s

    def backward_fn(grad):
        if t.requires_grad or t._parents:
            t._ensure_grad()
            t.grad += grad * s

    return _node(out_data, (t,), backward_fn)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad slot."""
    if loss.data.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Iterative DFS topological sort; graphs are small but recursion-free is safer.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss._ensure_grad()
    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class ParamStore:
    """Named parameter tensors, each with a matching gradient slot."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad.fill(0.0)

    def select(self, mask) -> list[str]:
        """Names matching the mask: exact names or dotted prefixes.

        mask=None selects everything.
        """
        if mask is None:
            return self.names()
        prefixes = tuple(mask)
        selected = [
            n
            for n in self._params
            if any(n == p or n.startswith(p + ".") for p in prefixes)
        ]
        return selected

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


class AdamState:
    """Adaptive-moment optimizer state, one slot pair per parameter."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(store: ParamStore, state: AdamState, mask=None) -> None:
    """One optimizer step over the masked parameters; zeroes all gradients.

    Unmasked parameters and their moment accumulators are untouched
    (bit-identical), which is what the per-variant gradient routing
    relies on.
    """
    names = store.select(mask)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in names:
        p = store[name]
        if p.grad is None:
            raise ValidationError(f"parameter {name!r} has no gradient slot")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    store.zero_grads()


def grad_check(forward, store: ParamStore, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward`` rebuilds the scalar loss from the store's current values.
    The relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    detail = grad_check_detailed(forward, store, epsilon)
    return max(detail.values(), default=0.0)


def grad_check_detailed(forward, store: ParamStore, epsilon: float = 1e-5
                        ) -> dict[str, float]:
    """Per-parameter max relative error; see grad_check."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    loss = forward()
    value = loss.item()
    if not np.isfinite(value):
        raise ValidationError(f"non-finite loss in grad_check: {value}")
    store.zero_grads()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in store.items()}
    result: dict[str, float] = {}
    for name, p in store.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = forward().item()
            flat[i] = orig - epsilon
            f_minus = forward().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValidationError("non-finite loss during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
        result[name] = worst
    store.zero_grads()
    return result
