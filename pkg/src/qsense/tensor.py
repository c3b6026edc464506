"""Dense f64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation takes the recording ``Tape`` as
its first argument and appends one node per call.  Passing ``tape=None`` runs
the same computation without recording, which is how backward rules are
evaluated when no higher-order gradients are requested.  Because every
backward rule is itself written in terms of these primitives, calling
``Tape.backward(..., create_graph=True)`` records the gradient computation on
the same tape and makes gradients-of-gradients (Hessian-vector products)
available through a second ``backward`` call.

Conventions, fixed and deterministic:

* relu subgradient at 0 is 0; clamp passes gradient only strictly inside
  [lo, hi]; max-pool ties route to the first window position.
* sqrt'(0) is taken as 0 so that losses built on norms of identically-zero
  differences backpropagate zeros instead of NaNs.
* all data is float64, row-major.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "mul_scalar",
    "add_scalar",
    "neg",
    "relu",
    "clamp",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "conv2d",
    "pool2d",
    "sum_all",
    "row_sum",
    "broadcast_cols",
    "sum_to_channel",
    "channel_broadcast",
    "softmax",
    "log_softmax",
    "softmax_crossentropy",
    "euclidean_loss",
]


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense multi-dimensional float64 array; the universal value type.

    Instances are treated as immutable: no public operation writes to
    ``data`` in place.  Identity (not value) is what the tape tracks, so
    tensors are hashable by object id and usable as dict keys.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_f64(data)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _as_f64(arr)
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Node:
    """One recorded primitive: inputs, output, and a local gradient rule.

    ``grad_fn(emitter, upstream)`` returns one gradient per input (or None
    for non-differentiable inputs).  ``emitter`` is the tape when the
    backward pass itself is being recorded, else None.
    """

    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Append-only record of primitive operations, in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, inputs: tuple, out_data: np.ndarray, grad_fn) -> Tensor:
        out = Tensor._wrap(out_data)
        self.nodes.append(Node(op, tuple(inputs), out, grad_fn))
        return out

    def _recorded_tensors(self, nodes) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in nodes:
            for t in node.inputs:
                seen.setdefault(id(t), t)
            seen.setdefault(id(node.output), node.output)
        return list(seen.values())

    def backward(self, loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
        """Reverse accumulation from a recorded scalar.

        Returns a map holding the gradient of ``loss`` with respect to every
        tensor recorded on the tape at call time; tensors the loss does not
        reach get zeros.  With ``create_graph=True`` the returned gradients
        are themselves recorded, so they support further ``backward`` calls.
        """
        if loss.shape != ():
            raise ValidationError(f"backward target must be scalar, got shape {loss.shape}")
        snapshot = list(self.nodes)
        if not any(node.output is loss for node in snapshot):
            raise ValidationError("backward target is not recorded on this tape")
        emitter = self if create_graph else None
        grads: dict[int, Tensor] = {id(loss): Tensor._wrap(np.ones(()))}
        for node in reversed(snapshot):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.grad_fn(emitter, upstream)):
                if g is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else add(emitter, prev, g)
        result: dict[Tensor, Tensor] = {}
        for t in self._recorded_tensors(snapshot):
            got = grads.get(id(t))
            result[t] = got if got is not None else Tensor._wrap(np.zeros(t.shape))
        return result


def backward(tape: Tape, loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(loss, create_graph=create_graph)


def _emit(tape, op, inputs, out_data, grad_fn) -> Tensor:
    if tape is None:
        return Tensor._wrap(out_data)
    return tape.record(op, inputs, out_data, grad_fn)


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def grad(t, up):
        return up, up

    return _emit(tape, "add", (a, b), a.data + b.data, grad)


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def grad(t, up):
        return up, neg(t, up)

    return _emit(tape, "sub", (a, b), a.data - b.data, grad)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)

    def grad(t, up):
        return mul(t, up, b), mul(t, up, a)

    return _emit(tape, "mul", (a, b), a.data * b.data, grad)


def div(tape, a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("div", a, b)

    def grad(t, up):
        ga = div(t, up, b)
        gb = neg(t, div(t, mul(t, up, a), mul(t, b, b)))
        return ga, gb

    return _emit(tape, "div", (a, b), a.data / b.data, grad)


def mul_scalar(tape, a: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad(t, up):
        return (mul_scalar(t, up, s),)

    return _emit(tape, "mul_scalar", (a,), a.data * s, grad)


def add_scalar(tape, a: Tensor, s: float) -> Tensor:
    def grad(t, up):
        return (up,)

    return _emit(tape, "add_scalar", (a,), a.data + float(s), grad)


def neg(tape, a: Tensor) -> Tensor:
    return mul_scalar(tape, a, -1.0)


def relu(tape, a: Tensor) -> Tensor:
    mask = Tensor._wrap((a.data > 0).astype(np.float64))

    def grad(t, up):
        return (mul(t, up, mask),)

    return _emit(tape, "relu", (a,), np.maximum(a.data, 0.0), grad)


def clamp(tape, a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValidationError(f"clamp: lo {lo} must be < hi {hi}")
    mask = Tensor._wrap(((a.data > lo) & (a.data < hi)).astype(np.float64))

    def grad(t, up):
        return (mul(t, up, mask),)

    return _emit(tape, "clamp", (a,), np.clip(a.data, lo, hi), grad)


def exp(tape, a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def grad(t, up):
        return (mul(t, up, out),)

    out = _emit(tape, "exp", (a,), out_data, grad)
    return out


def log(tape, a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValidationError("log: requires strictly positive input")

    def grad(t, up):
        return (div(t, up, a),)

    return _emit(tape, "log", (a,), np.log(a.data), grad)


def sqrt(tape, a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValidationError("sqrt: requires non-negative input")
    out_data = np.sqrt(a.data)
    # Derivative factor is captured as a constant; sqrt'(0) := 0 keeps
    # zero-distance losses NaN-free.  Second-order through sqrt is unsupported.
    factor = Tensor._wrap(np.where(out_data > 0, 0.5 / np.where(out_data > 0, out_data, 1.0), 0.0))

    def grad(t, up):
        return (mul(t, up, factor),)

    return _emit(tape, "sqrt", (a,), out_data, grad)


# ---------------------------------------------------------------------------
# linear algebra / shape


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")

    def grad(t, up):
        ga = matmul(t, up, transpose(t, b))
        gb = matmul(t, transpose(t, a), up)
        return ga, gb

    return _emit(tape, "matmul", (a, b), a.data @ b.data, grad)


def transpose(tape, a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: expects 2-D operand, got {a.shape}")

    def grad(t, up):
        return (transpose(t, up),)

    return _emit(tape, "transpose", (a,), np.ascontiguousarray(a.data.T), grad)


def reshape(tape, a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape

    def grad(t, up):
        return (reshape(t, up, orig),)

    return _emit(tape, "reshape", (a,), a.data.reshape(shape), grad)


# ---------------------------------------------------------------------------
# reductions / broadcasts


def sum_all(tape, a: Tensor) -> Tensor:
    shape = a.shape

    def grad(t, up):
        return (broadcast_full(t, up, shape),)

    return _emit(tape, "sum_all", (a,), np.sum(a.data), grad)


def broadcast_full(tape, s: Tensor, shape) -> Tensor:
    if s.shape != ():
        raise DimensionError(f"broadcast_full: expects scalar, got {s.shape}")

    def grad(t, up):
        return (sum_all(t, up),)

    return _emit(tape, "broadcast_full", (s,), np.broadcast_to(s.data, shape).copy(), grad)


def row_sum(tape, a: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor, keeping a [n, 1] column."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_sum: expects 2-D operand, got {a.shape}")
    cols = a.shape[1]

    def grad(t, up):
        return (broadcast_cols(t, up, cols),)

    return _emit(tape, "row_sum", (a,), a.data.sum(axis=1, keepdims=True), grad)


def broadcast_cols(tape, v: Tensor, cols: int) -> Tensor:
    if v.data.ndim != 2 or v.shape[1] != 1:
        raise DimensionError(f"broadcast_cols: expects [n, 1] operand, got {v.shape}")

    def grad(t, up):
        return (row_sum(t, up),)

    out = np.broadcast_to(v.data, (v.shape[0], int(cols))).copy()
    return _emit(tape, "broadcast_cols", (v,), out, grad)


def _channel_axes(shape):
    if len(shape) < 2:
        raise DimensionError(f"channel ops expect [n, c, ...] layout, got {shape}")
    return (0,) + tuple(range(2, len(shape)))


def sum_to_channel(tape, a: Tensor) -> Tensor:
    """Reduce [n, c, ...] over every axis except the channel axis."""
    axes = _channel_axes(a.shape)
    shape = a.shape

    def grad(t, up):
        return (channel_broadcast(t, up, shape),)

    return _emit(tape, "sum_to_channel", (a,), a.data.sum(axis=axes), grad)


def channel_broadcast(tape, v: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _channel_axes(shape)
    if v.data.ndim != 1 or v.shape[0] != shape[1]:
        raise DimensionError(f"channel_broadcast: vector {v.shape} does not match channels of {shape}")

    def grad(t, up):
        return (sum_to_channel(t, up),)

    view = v.data.reshape((1, shape[1]) + (1,) * (len(shape) - 2))
    return _emit(tape, "channel_broadcast", (v,), np.broadcast_to(view, shape).copy(), grad)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_hw(h, w, kh, kw, stride, pad):
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x: np.ndarray, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow)

def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def _check_conv_args(x: Tensor, kern: Tensor, stride: int, pad: int):
    if x.data.ndim != 4 or kern.data.ndim != 4:
        raise DimensionError(f"conv2d: expects 4-D input/kernel, got {x.shape} and {kern.shape}")
    if x.shape[1] != kern.shape[1]:
        raise DimensionError(f"conv2d: input channels {x.shape[1]} != kernel channels {kern.shape[1]}")
    if stride < 1:
        raise ValidationError(f"conv2d: stride must be positive, got {stride}")
    if pad < 0:
        raise ValidationError(f"conv2d: pad must be non-negative, got {pad}")


def conv2d(tape, x: Tensor, kern: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [n, cin, h, w] with [cout, cin, kh, kw]."""
    _check_conv_args(x, kern, stride, pad)
    n = x.shape[0]
    cout, cin, kh, kw = kern.shape
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, pad)
    kmat = kern.data.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, cout, oh, ow)

    def grad(t, up):
        gx = _conv2d_input_grad(t, up, kern, stride, pad, x.shape)
        gk = _conv2d_kernel_grad(t, x, up, stride, pad, kern.shape)
        return gx, gk

    return _emit(tape, "conv2d", (x, kern), out, grad)


def _conv2d_input_grad(tape, u: Tensor, kern: Tensor, stride, pad, x_shape) -> Tensor:
    cout, cin, kh, kw = kern.shape
    n = u.shape[0]
    kmat = kern.data.reshape(cout, cin * kh * kw)
    cols = np.matmul(kmat.T, u.data.reshape(n, cout, -1))
    out = _col2im(cols, x_shape, kh, kw, stride, pad)

    def grad(t, up):
        gu = conv2d(t, up, kern, stride, pad)
        gk = _conv2d_kernel_grad(t, up, u, stride, pad, kern.shape)
        return gu, gk

    return _emit(tape, "conv2d_input_grad", (u, kern), out, grad)


def _conv2d_kernel_grad(tape, x: Tensor, u: Tensor, stride, pad, k_shape) -> Tensor:
    cout, cin, kh, kw = k_shape
    n = x.shape[0]
    cols, (oh, ow) = _im2col(x.data, kh, kw, stride, pad)
    uflat = u.data.reshape(n, cout, oh * ow)
    out = np.einsum("noq,npq->op", uflat, cols).reshape(k_shape)

    def grad(t, up):
        gx = _conv2d_input_grad(t, u, up, stride, pad, x.shape)
        gu = conv2d(t, x, up, stride, pad)
        return gx, gu

    return _emit(tape, "conv2d_kernel_grad", (x, u), out, grad)


# ---------------------------------------------------------------------------
# pooling


def pool2d(tape, x: Tensor, kind: str, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling over square windows of [n, c, h, w]."""
    if kind not in ("max", "avg"):
        raise ValidationError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise DimensionError(f"pool2d: expects 4-D input, got {x.shape}")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool2d: window {window} exceeds input {h}x{w}")
    flat = x.data.reshape(n * c, 1, h, w)
    cols, (oh, ow) = _im2col(flat, window, window, stride, 0)
    geometry = ((n, c, h, w), window, stride, oh, ow)
    if kind == "max":
        routing = np.argmax(cols, axis=1)  # first occurrence wins on ties
        out = np.take_along_axis(cols, routing[:, None, :], axis=1)[:, 0, :]

        def grad(t, up):
            return (_max_unpool(t, up, routing, geometry),)

        return _emit(tape, "maxpool", (x,), out.reshape(n, c, oh, ow), grad)

    out = cols.mean(axis=1)

    def grad(t, up):
        return (_avg_unpool(t, up, geometry),)

    return _emit(tape, "avgpool", (x,), out.reshape(n, c, oh, ow), grad)


def _max_unpool(tape, up: Tensor, routing, geometry) -> Tensor:
    (n, c, h, w), window, stride, oh, ow = geometry
    cols = np.zeros((n * c, window * window, oh * ow), dtype=np.float64)
    np.put_along_axis(cols, routing[:, None, :], up.data.reshape(n * c, 1, oh * ow), axis=1)
    out = _col2im(cols, (n * c, 1, h, w), window, window, stride, 0).reshape(n, c, h, w)

    def grad(t, up2):
        return (_max_gather(t, up2, routing, geometry),)

    return _emit(tape, "max_unpool", (up,), out, grad)


def _max_gather(tape, v: Tensor, routing, geometry) -> Tensor:
    (n, c, h, w), window, stride, oh, ow = geometry
    cols, _ = _im2col(v.data.reshape(n * c, 1, h, w), window, window, stride, 0)
    out = np.take_along_axis(cols, routing[:, None, :], axis=1)[:, 0, :].reshape(n, c, oh, ow)

    def grad(t, up):
        return (_max_unpool(t, up, routing, geometry),)

    return _emit(tape, "max_gather", (v,), out, grad)


def _avg_unpool(tape, up: Tensor, geometry) -> Tensor:
    (n, c, h, w), window, stride, oh, ow = geometry
    m = float(window * window)
    cols = np.broadcast_to(up.data.reshape(n * c, 1, oh * ow) / m, (n * c, window * window, oh * ow))
    out = _col2im(np.ascontiguousarray(cols), (n * c, 1, h, w), window, window, stride, 0)

    def grad(t, up2):
        return (pool2d(t, up2, "avg", window, stride),)

    return _emit(tape, "avg_unpool", (up,), out.reshape(n, c, h, w), grad)


# ---------------------------------------------------------------------------
# losses


def log_softmax(tape, logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise DimensionError(f"log_softmax: expects [n, C] logits, got {logits.shape}")
    n, c = logits.shape
    # Row-max subtraction is a constant shift: softmax is shift-invariant, so
    # values and derivatives of every order are unchanged.
    shift = Tensor._wrap(np.broadcast_to(logits.data.max(axis=1, keepdims=True), (n, c)).copy())
    zs = sub(tape, logits, shift)
    total = row_sum(tape, exp(tape, zs))
    return sub(tape, zs, broadcast_cols(tape, log(tape, total), c))


def softmax(tape, logits: Tensor) -> Tensor:
    return exp(tape, log_softmax(tape, logits))


def softmax_crossentropy(tape, logits: Tensor, targets: Tensor) -> Tensor:
    """Mean over the batch of -sum(targets * log softmax(logits))."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_crossentropy: expects [n, C] logits, got {logits.shape}")
    _require_same_shape("softmax_crossentropy", logits, targets)
    if np.any(targets.data < 0):
        raise ValidationError("softmax_crossentropy: target rows must be non-negative")
    sums = targets.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(
            f"softmax_crossentropy: target row {bad} sums to {sums[bad]!r}, expected 1"
        )
    n = logits.shape[0]
    picked = mul(tape, log_softmax(tape, logits), targets)
    return mul_scalar(tape, sum_all(tape, picked), -1.0 / n)


def euclidean_loss(tape, a: Tensor, b: Tensor) -> Tensor:
    """L2 norm of (a - b) flattened per batch row, averaged over rows."""
    _require_same_shape("euclidean_loss", a, b)
    n = a.shape[0] if a.data.ndim >= 2 else 1
    d = sub(tape, a, b)
    flat = reshape(tape, d, (n, a.size // n))
    norms = sqrt(tape, row_sum(tape, mul(tape, flat, flat)))
    return mul_scalar(tape, sum_all(tape, norms), 1.0 / n)
