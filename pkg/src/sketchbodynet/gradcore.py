"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass. Calling
``SomeFunction.apply(*inputs)`` runs the forward on raw arrays, checks the
result is finite and, when any input requires a gradient, appends a record to
the thread's current :class:`Tape`. :func:`backward` replays that tape in
reverse exactly once.
"""

import contextlib
import threading

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class TapeError(RuntimeError):
    """The tape was already consumed, or the loss is not a scalar."""


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def consume(self):
        self.consumed = True
        for fn in self.records:
            fn.release()
        self.records = []


_state = threading.local()


def _current_tape():
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def current_tape():
    return _current_tape()


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


class Tensor:
    """A float64 array with an optional gradient and a link to its producing op."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._tape = None

    @classmethod
    def _from_op(cls, data, node, tape, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = node
        t._tape = tape
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(*arrays, **kwargs) -> array`` and
    ``backward(grad) -> tuple`` with one entry (array or None) per input.
    """

    name = None

    def __init__(self):
        self.inputs = ()
        self.out_id = None

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = np.asarray(fn.forward(*(t.data for t in tensors), **kwargs), dtype=np.float64)
        _check_finite(out, cls.name or cls.__name__)
        needs = _grad_enabled() and any(t.requires_grad for t in tensors)
        if not needs:
            return Tensor._from_op(out, None, None, False)
        tape = _current_tape()
        fn.inputs = tensors
        result = Tensor._from_op(out, fn, tape, True)
        fn.out_id = id(result)
        tape.records.append(fn)
        return result

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def release(self):
        self.__dict__.clear()


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, what):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{what}: shapes {a} and {b} do not broadcast") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "div")
        self.a, self.b = a, b
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, a, c):
        self.c = c
        return a * c

    def backward(self, g):
        return (g * self.c,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Abs(Function):
    name = "abs"

    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return (g * self.sign,)


class Square(Function):
    name = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g):
        return (2.0 * self.a * g,)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, b=None, stride=1, pad=0):
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects (N,)C,H,W input and 4-D kernels, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        co, ci, k, k2 = w.shape
        if ci != c or k != k2:
            raise ShapeError(f"conv2d kernel {w.shape} does not fit input with {c} channels")
        if k > h + 2 * pad or k > wd + 2 * pad:
            raise ShapeError(f"conv2d kernel {k}x{k} larger than padded input {h}x{wd} (pad {pad})")
        ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
        cols = kernels.im2col(x, k, stride, pad)
        wmat = w.reshape(co, -1)
        out = (wmat @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
        if b is not None:
            out = out + b.reshape(1, co, 1, 1)
        self.cols, self.wmat, self.wshape = cols, wmat, w.shape
        self.xshape, self.squeeze, self.has_bias = x.shape, squeeze, b is not None
        self.k, self.stride, self.pad = k, stride, pad
        out = np.ascontiguousarray(out)
        return out[0] if squeeze else out

    def backward(self, g):
        if self.squeeze:
            g = g[None]
        co = self.wshape[0]
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ self.cols.T).reshape(self.wshape)
        gx = kernels.col2im(self.wmat.T @ g2, self.xshape, self.k, self.stride, self.pad)
        if self.squeeze:
            gx = gx[0]
        if self.has_bias:
            return gx, gw, g2.sum(axis=1)
        return gx, gw


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        y = z / z.sum(axis=axis, keepdims=True)
        self.y, self.axis = y, axis
        return y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim < 3:
            raise ShapeError(f"global_avg_pool expects (N,)C,H,W, got {x.shape}")
        self.shape = x.shape
        return x.mean(axis=(-2, -1))

    def backward(self, g):
        h, w = self.shape[-2:]
        return (np.broadcast_to(g[..., None, None] / (h * w), self.shape).copy(),)


class Concat(Function):
    name = "concat"

    def forward(self, *parts, axis=0):
        ref = parts[0]
        ax = axis % ref.ndim
        for p in parts[1:]:
            if p.ndim != ref.ndim or any(
                p.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
            ):
                raise ShapeError(f"concat: extents differ off-axis: {ref.shape} vs {p.shape}")
        self.ax = ax
        self.bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
        return np.concatenate(parts, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.bounds, axis=self.ax))


class Stack(Function):
    name = "stack"

    def forward(self, *parts, axis=0):
        if any(p.shape != parts[0].shape for p in parts):
            raise ShapeError("stack: all parts need the same shape")
        self.axis, self.n = axis, len(parts)
        return np.stack(parts, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=None):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, g):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class GetItem(Function):
    name = "getitem"

    def forward(self, x, index=None):
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, g):
        out = np.zeros(self.shape)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Sum):
    name = "mean"

    def forward(self, x, axis=None, keepdims=False):
        out = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(out.size, 1)
        return out / self.count

    def backward(self, g):
        return (super().backward(g)[0] / self.count,)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def scale(a, c):
    return Scale.apply(a, c=float(c))


def relu(a):
    return Relu.apply(a)


def tabs(a):
    return Abs.apply(a)


def square(a):
    return Square.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def conv2d(x, kernels_, stride=1, pad=0, bias=None):
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with (Co,Ci,k,k) kernels."""
    if bias is None:
        return Conv2d.apply(x, kernels_, stride=stride, pad=pad)
    return Conv2d.apply(x, kernels_, bias, stride=stride, pad=pad)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)


def concat(parts, axis=0):
    if len(parts) == 0:
        raise ShapeError("concat needs at least one part")
    return Concat.apply(*parts, axis=axis)


def stack(parts, axis=0):
    return Stack.apply(*parts, axis=axis)


def split(x, sizes, axis=0):
    """Inverse of :func:`concat`: slice ``x`` into consecutive pieces."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {x.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        index = (slice(None),) * ax + (slice(start, start + n),)
        out.append(getitem(x, index))
        start += n
    return out


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


def getitem(x, index):
    return GetItem.apply(x, index=index)


def tsum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return Mean.apply(x, axis=axis, keepdims=keepdims)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": lambda a, b=None: relu(a),
    "scale": lambda a, b: scale(a, b),
}


def elementwise(op, a, b=None):
    """Dispatch one of add/sub/mul/relu/scale by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def backward(loss):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated. The tape that recorded
    ``loss`` is consumed; a second call raises :class:`TapeError`.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward needs a Tensor loss")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss._tape is not None:
            raise TapeError("tape already consumed")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    tape = loss._tape
    if tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass before calling backward again")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for fn in reversed(tape.records):
        g = grads.pop(fn.out_id, None)
        if g is None:
            continue
        for t, gi in zip(fn.inputs, fn.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                key = id(t)
                if key in leaves:
                    leaves[key][1] += gi
                else:
                    leaves[key] = [t, np.array(gi, dtype=np.float64)]
            elif t._tape is tape:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.consume()
    for t, g in leaves.values():
        t.grad = _check_finite(g.reshape(t.shape), "backward")
    loss._node = None


def finite_diff_check(f, params, eps=1e-4, max_coords=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the list ``params`` (requires-grad Tensors) to a scalar Tensor.
    At most ``max_coords`` coordinates per parameter are probed (all when None).
    """
    for p in params:
        p.grad = None
    loss = f(params)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(params).item()
                flat[i] = orig - eps
                fm = f(params).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("finite difference evaluation is not finite")
                num = (fp - fm) / (2.0 * eps)
                err = abs(ga.reshape(-1)[i] - num) / max(1e-8, abs(num))
                worst = max(worst, err)
    return worst
