"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Node
ids come from a global monotone counter, so sorting the reachable nodes by id
in descending order is a valid reverse topological order. The graph lives only
as long as the tensors that reference it; a fresh tape is built every step.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "as_array",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "ew",
    "matmul",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "dropout",
    "mse_loss",
    "cross_entropy_loss",
    "backward",
    "grad_check",
    "BACKWARD_FAULTS",
]

_node_ids = itertools.count()

# Working precision for new tensors; grad_check pushes np.longdouble while it
# evaluates finite differences.
_precision: list[type] = [np.float64]

# Test hook: op name -> multiplier applied to that op's input gradients.
# Used only to prove that the gradient checker catches a broken backward.
BACKWARD_FAULTS: dict[str, float] = {}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_precision[-1])
        if arr.base is not None or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw, "scale")


def relu(a) -> Tensor:
    a = _lift(a)
    on = a.data > 0

    def bw(g):
        return (g * on,)

    return _make(np.where(on, a.data, 0.0), (a,), bw, "relu")


def ew(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name: add, sub, mul, relu, scale."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    # [..., k] @ [k, n] is one 2-D product over the flattened leading axes
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size

    def bw(g):
        return (np.full(shape, float(g) / n),)

    return _make(np.asarray(a.data.mean()), (a,), bw, "mean")


# ---------------------------------------------------------------------------
# normalisation and stochastic ops


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries;
    excluded entries get probability exactly zero and no gradient.
    """
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({n},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = _lift(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# losses


def _loss_mask(mask, lead_shape: tuple[int, ...], full_shape: tuple[int, ...]) -> np.ndarray:
    if mask is None:
        return np.ones(full_shape)
    m = as_array(mask)
    if m.shape == lead_shape and lead_shape != full_shape:
        m = np.broadcast_to(m[..., None], full_shape)
    if m.shape != full_shape:
        raise ValueError(f"mask shape {m.shape} does not fit {full_shape}")
    return m


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean of squared differences over unmasked elements.

    ``mask`` may cover every element or only the leading (per-frame) axes.
    """
    pred = _lift(pred)
    t = as_array(target)
    if t.shape != pred.shape:
        raise ValueError(f"mse_loss: pred {pred.shape} vs target {t.shape}")
    m = _loss_mask(mask, pred.shape[:-1], pred.shape)
    n = m.sum()
    if n <= 0:
        raise ValueError("mse_loss: mask selects no elements")
    diff = (pred.data - t) * m

    def bw(g):
        return (float(g) * 2.0 * diff / n,)

    return _make(np.asarray((diff * diff).sum() / n), (pred,), bw, "mse_loss")


def cross_entropy_loss(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood of the true class over unmasked frames."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy_loss: labels {labels.shape} vs logits {logits.shape}")
    bad = np.argwhere((labels < 0) | (labels >= k))
    if bad.size:
        raise ValueError(
            f"cross_entropy_loss: label {labels[tuple(bad[0])]} out of range [0, {k}) at frame {tuple(int(i) for i in bad[0])}"
        )
    m = np.ones(labels.shape) if mask is None else as_array(mask)
    if m.shape != labels.shape:
        raise ValueError(f"cross_entropy_loss: mask {m.shape} vs labels {labels.shape}")
    n = m.sum()
    if n <= 0:
        raise ValueError("cross_entropy_loss: mask selects no frames")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    idx = labels.astype(np.int64)[..., None]
    nll = logsumexp - np.take_along_axis(z, idx, axis=-1)[..., 0]

    def bw(g):
        probs = np.exp(z - logsumexp[..., None])
        np.put_along_axis(probs, idx, np.take_along_axis(probs, idx, axis=-1) - 1.0, axis=-1)
        return (probs * (m * (float(g) / n))[..., None],)

    return _make(np.asarray((nll * m).sum() / n), (logits,), bw, "cross_entropy_loss")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad and p.node_id not in seen)
    order.sort(key=lambda t: t.node_id, reverse=True)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        fault = BACKWARD_FAULTS.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if fault is not None:
                pg = pg * fault
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


@contextmanager
def _extended_precision(params: Sequence[Tensor]):
    saved = [p.data for p in params]
    _precision.append(np.longdouble)
    for p in params:
        p.data = p.data.astype(np.longdouble)
    try:
        yield
    finally:
        _precision.pop()
        for p, data in zip(params, saved):
            p.data = data


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    numeric_f: Callable[[], Tensor] | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Per coordinate the error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``f`` takes no arguments and must be deterministic; the checker perturbs
    ``params`` in place and restores them afterwards. The analytic pass runs
    in float64; the differences are evaluated in extended precision so that
    roundoff in ``f`` does not swamp small gradient entries. ``numeric_f``,
    when given, is differenced instead of ``f``; straight-through graphs need
    a surrogate whose substitution offset is frozen at the base point.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    numeric_f = numeric_f or f
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with _extended_precision(params):
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = numeric_f().data.reshape(())
                flat[i] = orig - eps
                down = numeric_f().data.reshape(())
                flat[i] = orig
                numeric = float((up - down) / (2 * np.longdouble(eps)))
                a = float(grad.reshape(-1)[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst
