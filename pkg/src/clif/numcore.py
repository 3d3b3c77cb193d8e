"""Dense float64 tensors with reverse-mode autodiff, Adam, and a
finite-difference gradient oracle.

The graph is built dynamically: each op returns a Tensor holding its value,
its parents, and a closure that routes the incoming gradient to them.
Tensors are immutable once created (op outputs are marked read-only); only
leaf parameters are updated in place, and only between steps.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "ParamStore",
    "Adam",
    "constant",
    "parameter",
    "set_debug_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "relu",
    "mean_pool",
    "concat",
    "dot",
    "tensor_sum",
    "add_n",
    "slice_1d",
    "reshape",
    "squared_distance",
    "softmax_cross_entropy",
    "grad_check",
    "GradCheckReport",
    "stable_seed",
    "rng_for",
]

_DEBUG_CHECKS = os.environ.get("CLIF_DEBUG_CHECKS", "") == "1"


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion applied to every op output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A node in the computation DAG.

    data is always a C-contiguous float64 ndarray. Leaf tensors created with
    requires_grad=True own a same-shape gradient buffer that backward()
    accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d stays 0-d; ascontiguousarray would not
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if (requires_grad and _backward is None) else None
        self._parents = _parents
        self._backward = _backward
        self.name = name
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name or '<op>'}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse pass from a scalar; accumulates into leaf .grad buffers."""
        if self.data.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent.grad is not None:  # leaf: accumulate in place
                        parent.grad += pg
                    else:
                        acc = grads.get(id(parent))
                        grads[id(parent)] = pg if acc is None else acc + pg
            elif node.grad is not None:
                node.grad += g
        if _DEBUG_CHECKS:
            for node in order:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise FloatingPointError(f"non-finite gradient for {node.name}")

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recursion depth would be fragile on long loss chains.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            child = node._parents[idx]
            if id(child) not in seen:
                stack.append((child, 0))
        else:
            order.append(node)
    return order


def constant(data) -> Tensor:
    """Wrap an array as a non-trainable graph input."""
    return Tensor(data)


def parameter(data, name=None) -> Tensor:
    """A trainable leaf with an allocated gradient slot."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _op(data, parents, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(
        data,
        requires_grad=requires,
        _parents=tuple(p for p in parents if p.requires_grad),
        _backward=backward if requires else None,
    )
    out.data.flags.writeable = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to shape after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(M,K)@(K,N)->(M,N) or (M,K)@(K,)->(M,)."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    if bd.ndim == 2:

        def backward(g):
            return ((a, g @ bd.T), (b, ad.T @ g))

    else:

        def backward(g):
            return ((a, g[:, None] * bd[None, :]), (b, ad.T @ g))

    return _op(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; broadcasting follows numpy (bias rows, etc.)."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from None

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}") from None

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _op(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)

    def backward(g):
        return ((a, g * f),)

    return _op(a.data * f, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return ((a, _kernels.tanh_grad(out, g)),)

    return _op(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return ((a, _kernels.relu_grad(ad, g)),)

    return _op(np.maximum(ad, 0.0), (a,), backward)


def mean_pool(a: Tensor) -> Tensor:
    """Mean over rows: (N,d) -> (d,)."""
    if a.data.ndim != 2:
        raise ValueError(f"mean_pool expects a matrix, got shape {a.shape}")
    n = a.data.shape[0]

    def backward(g):
        return ((a, np.broadcast_to(g / n, a.data.shape).copy()),)

    return _op(a.data.mean(axis=0), (a,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    if not parts:
        raise ValueError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise ValueError(f"concat expects vectors, got shape {p.shape}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple((p, g[offsets[i] : offsets[i + 1]]) for i, p in enumerate(parts))

    return _op(np.concatenate([p.data for p in parts]), tuple(parts), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-length vectors -> scalar."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot shape mismatch: {a.shape} . {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return ((a, g * bd), (b, g * ad))

    return _op(np.dot(ad, bd), (a, b), backward)


def tensor_sum(a: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    shape = a.data.shape

    def backward(g):
        return ((a, np.broadcast_to(g, shape).copy()),)

    return _op(a.data.sum(), (a,), backward)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors in one node (keeps loss graphs shallow)."""
    if not parts:
        raise ValueError("add_n of zero tensors")
    out = parts[0].data.copy()
    for p in parts[1:]:
        if p.data.shape != out.shape:
            raise ValueError(f"add_n shape mismatch: {p.shape} vs {out.shape}")
        out += p.data

    def backward(g):
        return tuple((p, g) for p in parts)

    return _op(out, tuple(parts), backward)


def slice_1d(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 1:
        raise ValueError(f"slice_1d expects a vector, got shape {a.shape}")
    n = a.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"slice [{start}:{stop}] out of range for length {n}")

    def backward(g):
        full = np.zeros(n, dtype=np.float64)
        full[start:stop] = g
        return ((a, full),)

    return _op(a.data[start:stop], (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def backward(g):
        return ((a, g.reshape(old)),)

    return _op(a.data.reshape(shape), (a,), backward)


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """||a - b||^2 over flattened tensors, as a single fused node."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"squared_distance shape mismatch: {a.shape} vs {b.shape}")
    ar, br = a.data.ravel(), b.data.ravel()
    out = _kernels.squared_distance(ar, br)

    def backward(g):
        ga = _kernels.squared_distance_grad(ar, br, float(g)).reshape(a.data.shape)
        return ((a, ga), (b, -ga))

    return _op(np.float64(out), (a, b), backward)


def softmax_cross_entropy(scores: Tensor, target_index) -> Tensor:
    """-log softmax(scores)[target], max-stabilized, target log-prob clamped
    at -50.

    Accepts a score vector with an int target, or a (B, C) score matrix with
    a length-B index array; the matrix form returns the mean loss over rows.
    """
    sd = scores.data
    if sd.ndim == 1:
        mat = sd[None, :]
        targets = np.asarray([int(target_index)], dtype=np.int64)
    elif sd.ndim == 2:
        mat = sd
        targets = np.asarray(target_index, dtype=np.int64)
        if targets.shape != (sd.shape[0],):
            raise ValueError(f"expected {sd.shape[0]} target indices, got {targets.shape}")
    else:
        raise ValueError(f"softmax_cross_entropy expects vector or matrix, got {sd.shape}")
    n_classes = mat.shape[1]
    if n_classes == 0:
        raise ValueError("softmax_cross_entropy on empty score vector")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise ValueError(f"target index out of range for {n_classes} classes")

    mat = np.ascontiguousarray(mat)
    loss, probs, clamped_rows = _kernels.softmax_xent(mat, targets)
    batch = mat.shape[0]

    def backward(g):
        grad = probs.copy()
        grad[np.arange(batch), targets] -= 1.0
        if clamped_rows.any():
            grad[clamped_rows] = 0.0
        grad *= float(g) / batch
        return ((scores, grad if sd.ndim == 2 else grad[0]),)

    return _op(np.float64(loss), (scores,), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named trainable parameters plus a step counter.

    Names are dotted paths and must be unique; each parameter keeps a
    same-shape gradient buffer for the whole life of the store.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = parameter(data, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            p = self._params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"shape mismatch restoring {name}")
            p.data[...] = value

    def assert_finite(self) -> None:
        for name, p in self._params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter {name}")


class Adam:
    """Adam with bias correction over a ParamStore.

    step() consumes the accumulated gradients and zeroes them. Parameters
    whose gradient is entirely zero keep their values (moments still decay),
    so untouched parameters are never dragged by stale momentum.
    """

    def __init__(self, store: ParamStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.store.items():
            _kernels.adam_update(
                p.data, p.grad, self._m[name], self._v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
            )
            p.grad.fill(0.0)
        self.store.step_count += 1
        if _DEBUG_CHECKS:
            self.store.assert_finite()


# ---------------------------------------------------------------------------
# finite-difference oracle


class GradCheckReport:
    def __init__(self, max_rel_err: float, worst_param: str, checked: int):
        self.max_rel_err = max_rel_err
        self.worst_param = worst_param
        self.checked = checked

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance

    def __repr__(self) -> str:
        return (
            f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
            f"worst={self.worst_param!r}, checked={self.checked})"
        )


def grad_check(
    build_loss: Callable[[], Tensor],
    store: ParamStore,
    step: float = 1e-5,
    max_entries_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    build_loss must rebuild the scalar loss from the store's current values.
    With max_entries_per_param set, a seeded random subset of coordinates is
    probed per parameter (large hypernetwork graphs would otherwise need
    hundreds of thousands of forward passes).

    The relative-error denominator is floored at 1e-6: below that combined
    magnitude the central difference itself is dominated by truncation and
    roundoff (~1e-10 for step 1e-5 on an O(1) loss), so such coordinates are
    effectively compared on that absolute scale.
    """
    store.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in store.items()}
    store.zero_grad()

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ""
    checked = 0
    for name, p in store.items():
        flat = p.data.ravel()
        n = flat.shape[0]
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        a_flat = analytic[name].ravel()
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = build_loss().item()
            flat[i] = orig - step
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            rel = abs(a_flat[i] - numeric) / max(1e-6, abs(a_flat[i]) + abs(numeric))
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
    return GradCheckReport(max_rel, worst, checked)


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from structured parts, stable across platforms.

    Every stochastic stream in the engine (init, shuffling, sampling, replay)
    draws from its own derived seed, so adding or removing one consumer never
    shifts another stream.
    """
    import hashlib

    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
