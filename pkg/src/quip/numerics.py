"""Float64 tensors with reverse-mode differentiation, plus probability primitives.

The :class:`Tensor` type records the operations applied to it on a tape and
:meth:`Tensor.backward` replays that tape in reverse.  Only the operations the
encoder, heads and losses need are implemented; all of them broadcast like
numpy and accumulate gradients deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

LOG_FLOOR = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class DegenerateInputError(ValueError):
    """Input makes a quantity undefined (zero norm, zero variance, ...)."""


class EvaluationError(RuntimeError):
    """A function under evaluation produced a non-finite value."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- elementwise arithmetic -------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))
        a_shape, b_shape = self.shape, other.shape
        out._backward = lambda g: ((self, _unbroadcast(g, a_shape)), (other, _unbroadcast(g, b_shape)))
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _parents=(self,))
        out._backward = lambda g: ((self, -g),)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))
        a, b = self, other
        out._backward = lambda g: (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))
        a, b = self, other
        out._backward = lambda g: (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        out = Tensor(self.data**exponent, _parents=(self,))
        out._backward = lambda g: ((self, g * exponent * self.data ** (exponent - 1)),)
        return out

    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(np.matmul(self.data, other.data), _parents=(self, other))
        a, b = self, other

        def backward(g):
            ad, bd = a.data, b.data
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
                gb = np.tensordot(g, ad, axes=(list(range(g.ndim)), list(range(ad.ndim - 1)))) if ad.ndim > 1 else g * ad
                return ((a, ga), (b, gb))
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

        out._backward = backward
        return out

    # -- shape manipulation -----------------------------------------------------

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out = Tensor(np.transpose(self.data, axes), _parents=(self,))
        out._backward = lambda g: ((self, np.transpose(g, inverse)),)
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        out = Tensor(self.data.reshape(shape), _parents=(self,))
        out._backward = lambda g: ((self, g.reshape(original)),)
        return out

    def __getitem__(self, index) -> "Tensor":
        out = Tensor(self.data[index], _parents=(self,))
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return ((self, full),)

        out._backward = backward
        return out

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((self, np.broadcast_to(g, shape).copy()),)

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1) -> "Tensor":
        """Max along one axis; the gradient goes to the first maximizing entry."""
        idx = np.argmax(self.data, axis=axis)
        values = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        out = Tensor(np.squeeze(values, axis=axis), _parents=(self,))
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            return ((self, full),)

        out._backward = backward
        return out

    # -- elementwise functions ----------------------------------------------------

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = Tensor(value, _parents=(self,))
        out._backward = lambda g: ((self, g * value),)
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _parents=(self,))
        out._backward = lambda g: ((self, g / self.data),)
        return out

    def sqrt(self) -> "Tensor":
        value = np.sqrt(self.data)
        out = Tensor(value, _parents=(self,))
        out._backward = lambda g: ((self, g * 0.5 / value),)
        return out

    def tanh(self) -> "Tensor":
        value = np.tanh(self.data)
        out = Tensor(value, _parents=(self,))
        out._backward = lambda g: ((self, g * (1.0 - value * value)),)
        return out

    def sigmoid(self) -> "Tensor":
        value = sigmoid(self.data)
        out = Tensor(value, _parents=(self,))
        out._backward = lambda g: ((self, g * value * (1.0 - value)),)
        return out

    def gelu(self) -> "Tensor":
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = Tensor(x * cdf, _parents=(self,))
        out._backward = lambda g: ((self, g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x))),)
        return out

    def log_softmax(self, axis: int = -1) -> "Tensor":
        value = log_softmax(self.data, axis=axis)
        out = Tensor(value, _parents=(self,))

        def backward(g):
            p = np.exp(value)
            return ((self, g - p * g.sum(axis=axis, keepdims=True)),)

        out._backward = backward
        return out

    def softmax(self, axis: int = -1) -> "Tensor":
        value = np.exp(log_softmax(self.data, axis=axis))
        out = Tensor(value, _parents=(self,))

        def backward(g):
            return ((self, value * (g - (g * value).sum(axis=axis, keepdims=True))),)

        out._backward = backward
        return out

    def normalize(self, eps: float = 1e-9, hook: Callable[[np.ndarray], None] | None = None) -> "Tensor":
        """Zero-mean, unit-variance over the last axis (layer norm without affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        y = centered * inv_std
        if hook is not None:
            hook(y)
        out = Tensor(y, _parents=(self,))

        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return ((self, inv_std * (g - gm - y * gy)),)

        out._backward = backward
        return out


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        pieces = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(sl)]))
        return pieces

    out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([_as_tensor(t).reshape(_expand(t.shape, axis)) for t in tensors], axis=axis)


def _expand(shape: tuple, axis: int) -> tuple:
    shape = list(shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return tuple(shape)


# -- probability primitives ------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidArgumentError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("softmax input must be finite")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def cross_entropy_to_target(target, log_probs):
    """``-sum_i target_i * log_probs_i``; zero targets contribute exactly zero.

    ``log_probs`` may be an ndarray or a :class:`Tensor`; in the latter case the
    result is a differentiable scalar tensor.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != tuple(log_probs.shape):
        raise InvalidArgumentError(f"length mismatch: {target.shape} vs {tuple(log_probs.shape)}")
    nz = np.flatnonzero(target)
    if isinstance(log_probs, Tensor):
        return -(log_probs[nz] * target[nz]).sum()
    return float(-(target[nz] * np.asarray(log_probs, dtype=np.float64)[nz]).sum())


def floored_log(p) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), LOG_FLOOR))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class SpanDistributionPair:
    """Start/end distributions over passage positions (index 0 = unanswerable slot)."""

    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        if self.start.shape != self.end.shape or self.start.ndim != 1:
            raise InvalidArgumentError("start and end must be equal-length vectors")

    def __len__(self) -> int:
        return self.start.shape[0]


# -- optimization ------------------------------------------------------------------


class Adam:
    """Adam with named parameter groups, each with its own learning rate."""

    def __init__(self, groups: Mapping[str, Sequence[Tensor]], lrs: Mapping[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                 clip_norm: float | None = 1.0):
        self.groups = {name: list(params) for name, params in groups.items()}
        self.lrs = dict(lrs)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for ps in self.groups.values() for p in ps}
        self._v = {id(p): np.zeros_like(p.data) for ps in self.groups.values() for p in ps}

    def params(self) -> Iterable[Tensor]:
        for ps in self.groups.values():
            yield from ps

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params() if p.grad is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for name, ps in self.groups.items():
            lr = self.lrs[name] * lr_scale
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad * scale
                m = self._m[id(p)] = b1 * self._m[id(p)] + (1 - b1) * g
                v = self._v[id(p)] = b2 * self._v[id(p)] + (1 - b2) * g * g
                m_hat = m / (1 - b1**self.t)
                v_hat = v / (1 - b2**self.t)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data = p.data - lr * update


# -- gradient verification -----------------------------------------------------------


@dataclass
class GradientReport:
    max_relative_error: float
    worst_parameter: str
    checked_entries: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], epsilon: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradientReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` takes no arguments and must read the tensors in ``params``.
    Relative error per entry uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    With ``max_entries`` set, at most that many entries per parameter are
    sampled (seeded) instead of checking all of them.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise InvalidArgumentError("epsilon must lie in (0, 1e-3]")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().data)
            flat[i] = orig - epsilon
            down = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise EvaluationError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    for p in params.values():
        p.grad = None
    return GradientReport(max_relative_error=worst, worst_parameter=worst_name, checked_entries=checked)
