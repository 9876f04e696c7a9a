"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are recorded on an explicit, single-use :class:`Tape`; there is no
global graph. Every operation checks its output for NaN/Inf and raises
:class:`NumericFault` on violation, and shape errors name the primitive and
the offending shapes.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericFault, ShapeError, TapeError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array, immutable by convention after construction.

    ``requires_grad`` marks leaves whose gradient should be populated by
    :func:`backward`; the flag propagates through operations.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericFault("Tensor: non-finite values in construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic --------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    # elementwise / structural shorthands -------------------------------

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; operations executed inside record nodes when
    any operand requires a gradient. A tape is consumed by :func:`backward`
    and cannot be reused.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise TapeError("Tape: mismatched tape nesting")

    def __len__(self) -> int:
        return len(self._nodes)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, validate finiteness, and record on the active tape."""
    if not np.isfinite(out_data).all():
        raise NumericFault(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        if tape._consumed:
            raise TapeError(f"{op}: recording on a consumed tape")
        tape._nodes.append((out, inputs, vjp))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every recorded tensor
    that requires a gradient. Consumes the tape."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if tape._consumed:
        raise TapeError("backward: tape already consumed")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, inputs, vjp in reversed(tape._nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        for tensor, contribution in zip(inputs, vjp(g)):
            if contribution is None or not tensor.requires_grad:
                continue
            prev = grads.get(id(tensor))
            grads[id(tensor)] = contribution if prev is None else prev + contribution

    seen: set[int] = set()
    for out, inputs, _ in tape._nodes:
        for t in inputs + (out,):
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.requires_grad and id(t) in grads:
                t.grad = np.asarray(grads[id(t)], dtype=np.float64)
    if root.requires_grad and root.grad is None and id(root) in grads:
        root.grad = grads[id(root)]
    tape._nodes.clear()


# broadcasting helpers ---------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fwd, vjp_builder) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    return _make(op, out, (a, b), vjp_builder(a, b))


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    return _binary(
        "add", a, b, np.add,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    return _binary(
        "sub", a, b, np.subtract,
        lambda a, b: lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply,
        lambda a, b: lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide,
        lambda a, b: lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


# elementwise unary --------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make("relu", out, (x,), lambda g: (g * (x.data > 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make("softplus", out, (x,), lambda g: (g * _sigmoid(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    # Exact sqrt: the derivative is singular at 0. Callers needing a guarded
    # variant add an epsilon under the root themselves (see finid.loss).
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))


# linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", out, (a, b), vjp)


# convolution / pooling ----------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) over x[N,C,H,W] with w[O,C,kh,kw].

    Lowered to one GEMM via im2col; the column matrix is kept for the two
    backward GEMMs (dW and d-columns).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x[N,C,H,W] and w[O,C,kh,kw], got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch between x {x.shape} and w {w.shape}")
    sh = sw = int(stride)
    ph = pw = int(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    xpt = xp.transpose(1, 0, 2, 3)  # [C, N, Hp, Wp] view
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    cols_mat = cols.reshape(c * kh * kw, n * ho * wo)
    w_mat = w.data.reshape(o, c * kh * kw)
    out = (w_mat @ cols_mat).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def vjp(g):
        g_mat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (g_mat @ cols_mat.T).reshape(w.shape)
        dcols = (w_mat.T @ g_mat).reshape(c, kh, kw, n, ho, wo)
        dxpt = np.zeros((c, n) + xp.shape[2:], dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxpt[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, i, j]
        dxp = dxpt.transpose(1, 0, 2, 3)
        dx = dxp[:, :, ph : ph + h, pw : pw + wd] if (ph or pw) else dxp
        if b is None:
            return dx, gw
        return dx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, vjp)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping size x size max pooling; ties go to the first window slot."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected x[N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    k = int(size)
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: input {x.shape} not divisible by pool size {k}")
    ho, wo = h // k, w // k
    windows = (
        x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        buf = np.zeros((n, c, ho, wo, k * k), dtype=np.float64)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        return (buf.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make("maxpool2d", out, (x,), vjp)


# reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, axes, shape, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axes is None:
            g = g.reshape((1,) * len(shape))
        else:
            for a in axes:
                g = np.expand_dims(g, a)
    return g


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        g = _expand_reduced(g, axes, x.shape, keepdims)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))

    def vjp(g):
        g = _expand_reduced(g, axes, x.shape, keepdims)
        return (np.broadcast_to(g / count, x.shape),)

    return _make("mean", out, (x,), vjp)


def _reduce_extreme(op: str, pick, x, axis, keepdims: bool) -> Tensor:
    x = as_tensor(x)
    if axis is not None and not isinstance(axis, int):
        raise ShapeError(f"{op}: axis must be None or a single int, got {axis!r}")
    if axis is None:
        flat_idx = int(pick(x.data))
        out = x.data.reshape(-1)[flat_idx]
        out = np.asarray(out).reshape((1,) * x.ndim) if keepdims else np.asarray(out)

        def vjp(g):
            z = np.zeros_like(x.data)
            z.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return (z,)

        return _make(op, out, (x,), vjp)

    a = axis % x.ndim
    idx = pick(x.data, axis=a)
    out_kd = np.take_along_axis(x.data, np.expand_dims(idx, a), axis=a)
    out = out_kd if keepdims else np.squeeze(out_kd, axis=a)

    def vjp(g):
        z = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, a)
        np.put_along_axis(z, np.expand_dims(idx, a), gk, axis=a)
        return (z,)

    return _make(op, out, (x,), vjp)


def reduce_max(x, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme("max", np.argmax, x, axis, keepdims)


def reduce_min(x, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme("min", np.argmin, x, axis, keepdims)


# structural ---------------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes [{shapes}] along axis {axis}") from None
    a = axis % out.ndim
    splits = np.cumsum([t.shape[a] for t in tensors[:-1]])

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=a))

    return _make("concat", out, tensors, vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


# gradient checking ----------------------------------------------------------


def grad_check(f, x: Tensor, step: float = 1e-4) -> float:
    """Max relative error between the taped gradient of scalar-valued ``f``
    and central finite differences at ``x``.

    Error metric per coordinate: |analytic - fd| / max(1, |fd|).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    x0 = np.array(x.data, dtype=np.float64)

    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        out = f(xt)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ShapeError("grad_check: f must return a scalar Tensor")
        backward(tape, out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x0.shape))).item()
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
