"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every op whose inputs require gradients, in order.
:func:`backward` replays the tape in reverse, accumulates into the
``grad`` slot of each leaf, then clears the tape. Each thread has its own
active tape, so independent tapes never share state.

Values are float32 unless the inputs are float64 (used by the gradient
checker). Matmul and reductions accumulate in float64 and round once.
Broadcasting is limited to scalar-vs-tensor and equal shapes; ``bias_add``
is the single row-broadcast op the linear layers need.
"""

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "NonFiniteError",
    "active_tape",
    "no_grad",
    "custom_op",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "leaky_relu",
    "sigmoid",
    "matmul",
    "bias_add",
    "tsum",
    "mean",
    "mse",
    "stop_gradient",
    "gather_rows",
    "normalize_rows",
    "reshape",
    "transpose",
    "backward",
    "gradient_check",
]


class AutodiffError(RuntimeError):
    """Misuse of the tape: non-scalar loss, detached tensor, bad shapes."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_local = threading.local()


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager to make it the active tape for the current
    thread; otherwise a per-thread default tape is used.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def active_tape():
    return _stack()[-1]


def _recording():
    return not getattr(_local, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return tensors that do not require grad."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


def _result_dtype(*arrays):
    for a in arrays:
        if a.dtype == np.float64:
            return np.float64
    return np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_gen", "_produced")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # only an explicit float64 array opts in; Python floats stay float32
            wide = isinstance(data, (np.ndarray, np.generic)) and arr.dtype == np.float64
            dtype = np.float64 if wide else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._gen = None
        self._produced = False

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise AutodiffError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def custom_op(name, out_data, inputs, backward_fn):
    """Wrap ``out_data`` as the result of an op over ``inputs``.

    ``backward_fn(grad_out)`` returns one gradient (or ``None``) per input.
    The output is checked for NaN/Inf and recorded on the active tape when
    any input requires grad.
    """
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{name}: forward produced non-finite values")
    out = Tensor(out_data, dtype=out_data.dtype)
    if _recording() and any(t.requires_grad for t in inputs):
        tape = active_tape()
        out.requires_grad = True
        out._tape = tape
        out._gen = tape.generation
        out._produced = True
        tape.record(out, inputs, backward_fn)
    return out


def _is_scalar(t):
    return t.ndim == 0 or t.shape == (1,)


def _binary_shapes(name, a, b):
    if a.shape == b.shape:
        return
    if _is_scalar(a) or _is_scalar(b):
        return
    raise AutodiffError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, t):
    """Fold a broadcast gradient back onto a scalar operand."""
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float64), dtype=t.dtype).reshape(t.shape)


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("add", a, b)
    dt = _result_dtype(a.data, b.data)
    out = (a.data + b.data).astype(dt, copy=False)
    return custom_op("add", out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("sub", a, b)
    dt = _result_dtype(a.data, b.data)
    out = (a.data - b.data).astype(dt, copy=False)
    return custom_op("sub", out, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("mul", a, b)
    dt = _result_dtype(a.data, b.data)
    out = (a.data * b.data).astype(dt, copy=False)

    def back(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return custom_op("mul", out, (a, b), back)


def scale(x, c):
    c = float(c)
    out = (x.data * c).astype(x.dtype, copy=False)
    return custom_op("scale", out, (x,), lambda g: ((g * c).astype(x.dtype, copy=False),))


def neg(x):
    return custom_op("neg", -x.data, (x,), lambda g: (-g,))


def leaky_relu(x, slope=0.2):
    slope = float(slope)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope).astype(x.dtype, copy=False)
    return custom_op(
        "leaky_relu", out, (x,),
        lambda g: (np.where(pos, g, g * slope).astype(x.dtype, copy=False),),
    )


def sigmoid(x):
    out = (1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))).astype(x.dtype)
    return custom_op(
        "sigmoid", out, (x,),
        lambda g: ((g * out * (1.0 - out)).astype(x.dtype, copy=False),),
    )


def _mm(a, b, dtype):
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    dt = _result_dtype(a.data, b.data)
    out = _mm(a.data, b.data, dt)

    def back(g):
        ga = _mm(g, b.data.T, a.dtype) if a.requires_grad else None
        gb = _mm(a.data.T, g, b.dtype) if b.requires_grad else None
        return ga, gb

    return custom_op("matmul", out, (a, b), back)


def bias_add(x, bias):
    """Add a length-n vector to every row of an m x n matrix."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise AutodiffError(f"bias_add: shapes {x.shape} and {bias.shape}")
    dt = _result_dtype(x.data, bias.data)
    out = (x.data + bias.data).astype(dt, copy=False)

    def back(g):
        gb = g.sum(axis=0, dtype=np.float64).astype(bias.dtype) if bias.requires_grad else None
        return g, gb

    return custom_op("bias_add", out, (x, bias), back)


def tsum(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return custom_op("sum", out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x):
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)
    return custom_op("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse(a, b):
    """Mean of squared differences over all elements."""
    if a.shape != b.shape:
        raise AutodiffError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    dt = _result_dtype(a.data, b.data)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()) / n, dtype=dt)

    def back(g):
        ga = (2.0 * g / n * diff).astype(a.dtype) if a.requires_grad else None
        gb = (-2.0 * g / n * diff).astype(b.dtype) if b.requires_grad else None
        return ga, gb

    return custom_op("mse", out, (a, b), back)


def stop_gradient(x):
    """Identity forward; contributes nothing to ``x`` on the way back."""
    return custom_op("stop_gradient", x.data, (x,), lambda g: (None,))


def gather_rows(x, index):
    """Rows ``x[index]``; gradients scatter-add back onto the source rows."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise AutodiffError("gather_rows: source must be 2-D")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise AutodiffError("gather_rows: index out of range")
    out = x.data[index]

    def back(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, index, g)
        return (full.astype(x.dtype),)

    return custom_op("gather_rows", out, (x,), back)


def normalize_rows(x, eps=1e-12):
    """Scale each row of a matrix to unit L2 norm."""
    x64 = x.data.astype(np.float64)
    norms = np.maximum(np.sqrt(np.einsum("ij,ij->i", x64, x64)), eps)[:, None]
    y = x64 / norms

    def back(g):
        g = g.astype(np.float64)
        dot = np.einsum("ij,ij->i", y, g)[:, None]
        return (((g - y * dot) / norms).astype(x.dtype),)

    return custom_op("normalize_rows", y.astype(x.dtype), (x,), back)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return custom_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return custom_op("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf, then clear the tape."""
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not loss._produced:
        raise AutodiffError("backward on a detached tensor")
    tape = loss._tape
    if loss._gen != tape.generation:
        raise AutodiffError("loss was recorded on a tape that has since been cleared")

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if not t.requires_grad:
                continue
            if not t._produced:
                leaves[id(t)] = t
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=t.dtype, copy=True).reshape(t.shape)
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.clear()


class NonDeterministicError(AutodiffError):
    pass


def gradient_check(f, x, eps=1e-3, coords=None):
    """Largest deviation between reverse-mode and central-difference gradients.

    Returns ``max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)``
    over the checked coordinates (all of them unless ``coords`` lists flat
    indices). ``f`` maps ``x`` to a scalar tensor and must be deterministic;
    two evaluations that disagree raise :class:`NonDeterministicError`.

    Paths through :func:`stop_gradient` are invisible to reverse mode but not
    to finite differences, so functions containing it will report a large
    error; that mismatch is the expected behaviour, not a bug in either side.
    Run checks on float64 tensors: float32 central differences at
    ``eps=1e-3`` carry roundoff near the tolerances being tested.
    """
    with no_grad():
        v1 = f(x).item()
        v2 = f(x).item()
    if v1 != v2:
        raise NonDeterministicError(f"f(x) evaluated to {v1!r} then {v2!r}")

    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad = None
    x.requires_grad = True
    with Tape():
        loss = f(x)
        backward(loss)
    grad = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = grad.reshape(-1).astype(np.float64)
    x.grad, x.requires_grad = saved_grad, saved_flag

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    coords = list(coords)
    numeric = np.empty(len(coords))
    with no_grad():
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
    a = analytic[coords]
    denom = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(a - numeric).max(initial=0.0) / denom)
