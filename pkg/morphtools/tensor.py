"""
Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new `Tensor` that remembers its parents and a
backward rule. `backward(loss)` walks the graph once in reverse topological
order. Gradients accumulate into `.grad` until `zero_grad()` is called.
Broadcasting is limited to one operand being a 0-d scalar.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from morphtools.errors import TensorShapeError


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), op="leaf", backward_fn=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = parents
        self.op = op
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __float__(self):
        return self.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, backward_fn):
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, op=op, backward_fn=backward_fn)


def _check_pair(a, b, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise TensorShapeError(f"shape mismatch in {op}: {a.shape} vs {b.shape}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    # the other operand was a scalar
    return np.array(grad.sum())


# --- elementwise ---

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), "div", backward)


def power(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "pow")
    out = np.power(a.data, b.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            local = b.data * np.power(a.data, b.data - 1.0)
        # subgradient 0 where a fractional power hits a zero base
        local = np.where(np.isfinite(local), local, 0.0)
        ga = _unbroadcast(g * local, a.shape)
        gb = None
        if b.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                log_a = np.where(a.data > 0, np.log(np.where(a.data > 0, a.data, 1.0)), 0.0)
            gb = _unbroadcast(g * out * log_a, b.shape)
        return ga, gb

    return _node(out, (a, b), "pow", backward)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def absolute(a):
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _node(out, (a,), "sqrt", backward)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor):
    a = as_tensor(a)
    keep = a.data > floor
    return _node(np.where(keep, a.data, floor), (a,), "clamp_min", lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "pow": power,
}
_UNARY = {
    "abs": absolute,
    "sqrt": sqrt,
}


def elementwise(op, a, b=None):
    """Dispatch a named elementwise op: add, sub, mul, div, pow, abs, sqrt."""
    if op in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# --- reductions ---

def _require_nonempty(a, op):
    if a.size == 0:
        raise ValueError(f"{op} of an empty tensor")


def sum_(a):
    a = as_tensor(a)
    _require_nonempty(a, "sum")
    return _node(np.array(a.data.sum()), (a,), "sum", lambda g: (np.full(a.shape, float(g)),))


def mean(a):
    a = as_tensor(a)
    _require_nonempty(a, "mean")
    n = a.size
    return _node(np.array(a.data.sum() / n), (a,), "mean", lambda g: (np.full(a.shape, float(g) / n),))


def max_(a):
    a = as_tensor(a)
    _require_nonempty(a, "max")
    flat_index = int(np.argmax(a.data))

    def backward(g):
        grad = np.zeros(a.size)
        grad[flat_index] = float(g)
        return (grad.reshape(a.shape),)

    return _node(np.array(a.data.flat[flat_index]), (a,), "max", backward)


_REDUCTIONS = {"sum": sum_, "mean": mean, "max": max_}


def reduce(op, a):
    if op not in _REDUCTIONS:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCTIONS[op](a)


# --- structural ---

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise TensorShapeError(f"cannot reshape {a.shape} into {shape}")
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        grad = np.zeros(a.shape)
        grad[index] += g
        return (grad,)

    return _node(out, (a,), "getitem", backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorShapeError(f"matmul dimension mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x, kernel, stride=1):
    """Valid cross-correlation of x[c×h×w] with kernel[c×kh×kw] or [o×c×kh×kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3:
        raise TensorShapeError(f"conv2d input must be c×h×w, got {x.shape}")
    k = kernel.data[None] if kernel.ndim == 3 else kernel.data
    if k.ndim != 4 or k.shape[1] != x.shape[0]:
        raise TensorShapeError(f"conv2d kernel {kernel.shape} does not match input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _, c, kh, kw = k.shape
    _, h, w = x.shape
    if kh > h or kw > w:
        raise TensorShapeError(f"conv2d kernel {kernel.shape} larger than input {x.shape}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    windows = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(k, windows, axes=([1, 2, 3], [0, 3, 4]))

    def backward(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([1, 2], [1, 2])).reshape(kernel.shape)
        if x.requires_grad:
            gx = np.zeros(x.shape)
            row_end = stride * (oh - 1) + 1
            col_end = stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + row_end:stride, j:j + col_end:stride] += np.tensordot(
                        k[:, :, i, j], g, axes=([0], [0]))
        return gx, gk

    return _node(out, (x, kernel), "conv2d", backward)


def downsample2x(x):
    """2×2 average pooling, stride 2, odd trailing row/column dropped."""
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise TensorShapeError(f"downsample2x expects h×w or c×h×w, got {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise TensorShapeError(f"downsample2x needs at least 2×2, got {x.shape}")
    h2, w2 = h // 2, w // 2
    lead = x.shape[:-2]
    blocks = x.data[..., :2 * h2, :2 * w2].reshape(*lead, h2, 2, w2, 2)
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        grad = np.zeros(x.shape)
        grad[..., :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0
        return (grad,)

    return _node(out, (x,), "downsample2x", backward)


# --- differentiation ---

def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` of every requires_grad tensor reachable from a scalar loss.

    Repeated calls without `zero_grad()` accumulate.
    """
    loss = as_tensor(loss)
    if loss.ndim != 0:
        raise TensorShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        for parent, contribution in zip(node.parents, node.backward_fn(g)):
            if contribution is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = contribution if key not in pending else pending[key] + contribution


def grad_check(f, x, eps=1e-5):
    """Max relative error between the autodiff gradient and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    point = Tensor(x0, requires_grad=True)
    backward(as_tensor(f(point)))
    analytic = np.zeros_like(x0) if point.grad is None else point.grad

    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        shifted = x0.copy()
        shifted.flat[i] = x0.flat[i] + eps
        f_plus = as_tensor(f(Tensor(shifted))).item()
        shifted.flat[i] = x0.flat[i] - eps
        f_minus = as_tensor(f(Tensor(shifted))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"f is not finite around coordinate {i}")
        numeric.flat[i] = (f_plus - f_minus) / (2.0 * eps)

    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
