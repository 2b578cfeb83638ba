"""Dense numeric core: tensors, reverse-mode gradients, losses, optimizers.

Everything downstream (attention layers, tuning modules, output heads) is
built from the operations defined here. Data lives in plain numpy arrays
(float32 for training runs, float64 for verification); gradients come from a
tape of backward closures recorded while the forward pass executes. The tape
is only recorded when an operand requires gradients, so inference and
statistics passes are tape-free.

Gradient correctness is enforced against central finite differences via
`finite_diff_check`; see the test suite for per-operation sweeps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense float array with optional gradient tracking.

    Invariants: `grad`, when present, has the same shape as `data`; dtype is
    float32 or float64 and is preserved through every operation.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name="", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def copy(self, requires_grad=None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _out(data, parents, backward_fn):
    """Build an op result, recording the tape only when gradients can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = ""
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _out(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        return _sum_to_shape(g, a.data.shape), -_sum_to_shape(g, b.data.shape)

    return _out(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)

    def bw(g):
        return (
            _sum_to_shape(g * b.data, a.data.shape),
            _sum_to_shape(g * a.data, b.data.shape),
        )

    return _out(a.data * b.data, (a, b), bw)


def scale(a, c: float):
    c = float(c)

    def bw(g):
        return (g * c,)

    return _out(a.data * c, (a,), bw)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else b.data
        at = np.swapaxes(a.data, -1, -2) if a.data.ndim > 1 else a.data
        ga = np.matmul(g, bt) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.matmul(at, g)
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return _out(out_data, (a, b), bw)


def swap_axes(a, i: int, j: int):
    def bw(g):
        return (np.swapaxes(g, i, j),)

    return _out(np.swapaxes(a.data, i, j), (a,), bw)


def reshape(a, shape):
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return _out(a.data.reshape(shape), (a,), bw)


def concat(parts, axis: int):
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _out(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice along one axis; gradient zero-pads the complement."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _out(a.data[idx], (a,), bw)


def sum_all(a):
    def bw(g):
        return (np.full_like(a.data, float(g)),)

    return _out(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


def mean_all(a):
    n = a.data.size

    def bw(g):
        return (np.full_like(a.data, float(g) / n),)

    return _out(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a):
    """tanh-form GELU (the transformer convention)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return (g * dy,)

    return _out(out_data, (a,), bw)


def layer_norm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _out(y.astype(x.dtype, copy=False), (a,), bw)


def _softmax_data(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_last(a):
    """Softmax over the last axis, stabilized by max subtraction."""
    s = _softmax_data(a.data)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _out(s, (a,), bw)


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor. Rejects NaN input."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.data.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    return softmax_last(x)


def cross_entropy(logits, targets):
    """Mean negative log-softmax probability of the target class per row.

    `logits` is (n, C); `targets` is a length-n sequence of class indices.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    idx = np.asarray(targets, dtype=np.int64)
    n, n_classes = logits.data.shape
    if idx.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise IndexError(f"target index out of range for {n_classes} classes")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(n)
    nll = logz - shifted[rows, idx]
    out_data = np.asarray(nll.mean(), dtype=x.dtype)

    def bw(g):
        p = _softmax_data(x)
        p[rows, idx] -= 1.0
        return (p * (float(g) / n),)

    return _out(out_data, (logits,), bw)


def affine(x, w, b=None):
    """x @ w (+ row-broadcast bias). The building block for projections."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("affine expects 2-D x and w")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"affine inner dimensions differ: {x.data.shape} @ {w.data.shape}"
        )
    out = matmul(x, w)
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"bias shape {b.data.shape} != ({w.data.shape[1]},)")
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    The loss must be scalar. Repeated calls accumulate into .grad until
    zero_grad is invoked (optimizers clear explicitly before each step).
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar loss tensor")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params, lr):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - np.asarray(self.lr * p.grad, dtype=p.dtype)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999 by default)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - upd.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradReport:
    """Max discrepancy between analytic and finite-difference gradients."""

    param_name: str
    max_rel_err: float
    max_abs_err: float

    def __post_init__(self):
        if self.max_rel_err < 0 or self.max_abs_err < 0:
            raise ContractError("gradient errors must be non-negative")


def finite_diff_check(f, params, eps: float = 1e-5) -> list[GradReport]:
    """Compare analytic gradients of `f` against central differences.

    `f` is a zero-argument callable returning a scalar loss Tensor built from
    the given parameter tensors; it must be deterministic (two baseline
    evaluations are required to agree bit-for-bit). `params` maps names to
    tensors. Every coordinate of every parameter is perturbed by +-eps.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    params = dict(params)
    base1 = float(f().data)
    base2 = float(f().data)
    if base1 != base2:
        raise ContractError("f is not deterministic: baseline evaluations differ")

    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)

    reports = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(f().data)
            flat[k] = orig - eps
            lo = float(f().data)
            flat[k] = orig
            fd[k] = (hi - lo) / (2.0 * eps)
        fd = fd.reshape(p.data.shape)
        diff = np.abs(analytic - fd)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        reports.append(
            GradReport(
                param_name=name,
                max_rel_err=float((diff / denom).max()) if diff.size else 0.0,
                max_abs_err=float(diff.max()) if diff.size else 0.0,
            )
        )
    return reports


def check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} contains NaN/Inf")
