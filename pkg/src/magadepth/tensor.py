"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in this library runs on a single value type: an immutable
``Tensor`` holding a contiguous float64 numpy array in image layout
``(height, width, channels)`` (plus plain 2-D matrices and scalars).
Operations on gradient-tracked tensors record a backward closure at
execution time; :func:`backward` replays the recorded operations in exact
reverse creation order and accumulates gradients onto the leaf tensors.

Design constraints kept deliberately tight so every backward rule stays
auditable:

* float64 only,
* broadcasting limited to scalar-with-tensor and equal shapes,
* a graph is confined to the thread that built it.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "absolute",
    "reduce_sum",
    "mean_all",
    "matmul",
    "linear",
    "transpose2",
    "reshape",
    "slice_channels",
    "concat_channels",
    "replicate_channels",
    "conv2d",
    "conv_transpose2d",
    "min_pool2d",
]

_COUNTER = itertools.count()
_STATE = threading.local()


def _recording():
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable gradient recording inside the block (evaluation fast path)."""
    previous = _recording()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


class _Record:
    """One recorded operation: parents plus the pull-back rule.

    ``pull(output_grad)`` returns one gradient array (or None) per parent.
    """

    __slots__ = ("parents", "pull")

    def __init__(self, parents, pull):
        self.parents = parents
        self.pull = pull


class Tensor:
    """A dense float64 array that can participate in gradient tracking.

    The payload is immutable by convention once the tensor is used in an
    operation; only the optimizer mutates leaf ``data`` between passes, and
    only ``grad`` accumulates during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record", "_seq")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None
        self._seq = next(_COUNTER)

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A gradient-free view of the same payload."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all semantics live in the module-level functions.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data, parents, pull):
    if _recording() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._record = _Record(tuple(parents), pull)
        return out
    return Tensor(data)


class GradTape:
    """The ordered record of operations behind one output tensor.

    Operations appear in creation (execution) order, so iterating the list
    in reverse is a valid and deterministic reverse-mode schedule.
    """

    def __init__(self, operations):
        self.operations = operations

    @classmethod
    def trace(cls, root):
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if node._record is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._record.parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss):
    """Populate ``grad`` on every gradient-tracked leaf reachable from ``loss``.

    ``loss`` must be scalar. Repeated calls without zeroing accumulate, so a
    sum of gradients over several scalars can be built incrementally.
    """
    loss = _lift(loss)
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any gradient-tracked tensor")

    seed = np.ones((), dtype=np.float64)
    if loss._record is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape = GradTape.trace(loss)
    adjoint = {id(loss): seed}
    for node in reversed(tape.operations):
        out_grad = adjoint.pop(id(node), None)
        if out_grad is None:
            continue
        parent_grads = node._record.pull(out_grad)
        for parent, grad in zip(node._record.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if parent._record is None:
                parent.grad = np.array(grad) if parent.grad is None else parent.grad + grad
            else:
                key = id(parent)
                held = adjoint.get(key)
                adjoint[key] = grad if held is None else held + grad


# ---------------------------------------------------------------------------
# elementwise operations


def _check_binary(a, b, name):
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar-with-tensor")


def _shrink(grad, shape):
    # Undo scalar-with-tensor broadcasting.
    if shape == () and grad.shape != ():
        return grad.sum()
    return grad


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    return _from_op(a.data + b.data, (a, b), lambda g: (_shrink(g, a.shape), _shrink(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    return _from_op(a.data - b.data, (a, b), lambda g: (_shrink(g, a.shape), _shrink(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")

    def pull(g):
        return _shrink(g * b.data, a.shape), _shrink(g * a.data, b.shape)

    return _from_op(a.data * b.data, (a, b), pull)


def neg(x):
    x = _lift(x)
    return _from_op(-x.data, (x,), lambda g: (-g,))


def scale(x, factor):
    """Multiply by a plain (non-trainable) python scalar."""
    x = _lift(x)
    factor = float(factor)
    return _from_op(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x):
    x = _lift(x)
    active = x.data > 0
    return _from_op(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def _sigmoid_values(x):
    positive = x >= 0
    z = np.exp(np.where(positive, -x, x))  # argument is always <= 0
    return np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    x = _lift(x)
    out = _sigmoid_values(x.data)
    return _from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x):
    x = _lift(x)
    out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NumericError("exp overflowed to a non-finite value")
    return _from_op(out, (x,), lambda g: (g * out,))


def absolute(x):
    """Elementwise |x|; subgradient 0 at the origin."""
    x = _lift(x)
    sign = np.sign(x.data)
    return _from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def reduce_sum(x, axis=None, keepdims=False):
    x = _lift(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, x.shape),)

    return _from_op(out, (x,), pull)


def mean_all(x):
    x = _lift(x)
    return scale(reduce_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# matrix operations


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return _from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias):
    """Affine map ``x @ weight + bias`` with the bias broadcast over rows."""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match width {weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def pull(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _from_op(out, (x, weight, bias), pull)


def transpose2(x):
    x = _lift(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose2 expects a matrix, got shape {x.shape}")
    return _from_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# data movement


def reshape(x, shape):
    x = _lift(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape cannot map {x.shape} onto {shape}")
    return _from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def slice_channels(x, start, stop):
    x = _lift(x)
    channels = x.shape[-1]
    if not (0 <= start < stop <= channels):
        raise DimensionError(f"slice_channels [{start}:{stop}] outside channel extent {channels}")

    def pull(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[..., start:stop] = g
        return (full,)

    return _from_op(np.ascontiguousarray(x.data[..., start:stop]), (x,), pull)


def concat_channels(parts):
    parts = [_lift(p) for p in parts]
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError("concat_channels: leading extents differ")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def pull(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _from_op(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), pull)


def replicate_channels(x, count):
    """Broadcast a single-channel tensor to ``count`` identical channels."""
    x = _lift(x)
    if x.shape[-1] != 1:
        raise DimensionError(f"replicate_channels expects one channel, got {x.shape}")
    if count < 1:
        raise DimensionError("replicate_channels: count must be positive")
    return _from_op(
        np.repeat(x.data, count, axis=-1),
        (x,),
        lambda g: (g.sum(axis=-1, keepdims=True),),
    )


# ---------------------------------------------------------------------------
# convolution family
#
# 'same' padding follows ceil(extent / stride) output sizing; the border fill
# is a caller-chosen constant (0 for features, 1 when convolving validity
# masks, where out-of-image counts as missing).


def _same_pads(extent, k, stride):
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    low = total // 2
    return out, low, total - low


def _im2col(padded, k, stride):
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    oh, ow = windows.shape[:2]
    # patch layout is (c, k, k): channels outermost, matching the kernel matrix below
    return np.ascontiguousarray(windows).reshape(oh * ow, -1), oh, ow


def _kernel_matrix(kernel_data):
    k = kernel_data.shape[0]
    c_in, c_out = kernel_data.shape[2], kernel_data.shape[3]
    return kernel_data.transpose(2, 0, 1, 3).reshape(c_in * k * k, c_out)


def _matrix_kernel(mat, k, c_in, c_out):
    return mat.reshape(c_in, k, k, c_out).transpose(1, 2, 0, 3)


def _col2im(smat, oh, ow, k, c_in, padded_h, padded_w, stride, pads):
    spread = smat.reshape(oh, ow, c_in, k, k)
    acc = np.zeros((padded_h, padded_w, c_in), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            acc[di:di + stride * oh:stride, dj:dj + stride * ow:stride, :] += spread[:, :, :, di, dj]
    top, bottom, left, right = pads
    return acc[top:padded_h - bottom, left:padded_w - right, :]


def _check_conv_operands(x, kernel, op_name, odd_only=True):
    if x.ndim != 3:
        raise DimensionError(f"{op_name} expects (h, w, c) input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"{op_name} expects a square (k, k, c_in, c_out) kernel, got {kernel.shape}")
    if odd_only and kernel.shape[0] % 2 == 0:
        raise ContractError(f"{op_name} requires an odd kernel extent, got {kernel.shape[0]}")


def conv2d(x, kernel, bias=None, stride=1, padding="same", pad_value=0.0):
    """Strided 2-D cross-correlation.

    ``padding='same'`` yields ``ceil(extent / stride)`` outputs with the
    border filled by ``pad_value``; ``'valid'`` requires the input to be at
    least as large as the kernel. Gradients flow to ``x``, ``kernel`` and
    ``bias``.
    """
    x, kernel = _lift(x), _lift(kernel)
    _check_conv_operands(x, kernel, "conv2d")
    if stride < 1:
        raise ContractError("conv2d: stride must be positive")
    h, w, c_in = x.shape
    k = kernel.shape[0]
    c_out = kernel.shape[3]
    if kernel.shape[2] != c_in:
        raise DimensionError(f"conv2d: kernel expects {kernel.shape[2]} input channels, got {c_in}")
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {c_out} outputs")

    if padding == "same":
        oh, top, bottom = _same_pads(h, k, stride)
        ow, left, right = _same_pads(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise DimensionError(f"conv2d: valid padding needs extents >= {k}, got {h}x{w}")
        oh, top, bottom = (h - k) // stride + 1, 0, 0
        ow, left, right = (w - k) // stride + 1, 0, 0
    else:
        raise ContractError(f"conv2d: unknown padding {padding!r}")

    pads = (top, bottom, left, right)
    if any(pads):
        padded = np.pad(x.data, ((top, bottom), (left, right), (0, 0)), constant_values=float(pad_value))
    else:
        padded = x.data
    cols, got_h, got_w = _im2col(padded, k, stride)
    assert (got_h, got_w) == (oh, ow)
    wmat = _kernel_matrix(kernel.data)
    flat = cols @ wmat
    if bias is not None:
        flat = flat + bias.data[None, :]
    out = flat.reshape(oh, ow, c_out)
    padded_h, padded_w = padded.shape[0], padded.shape[1]

    def pull(g):
        g2 = g.reshape(oh * ow, c_out)
        grad_x = grad_k = grad_b = None
        if x.requires_grad:
            grad_x = _col2im(g2 @ wmat.T, oh, ow, k, c_in, padded_h, padded_w, stride, pads)
        if kernel.requires_grad:
            grad_k = _matrix_kernel(cols.T @ g2, k, c_in, c_out)
        if bias is not None and bias.requires_grad:
            grad_b = g2.sum(axis=0)
        return (grad_x, grad_k) if bias is None else (grad_x, grad_k, grad_b)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _from_op(out, parents, pull)


def conv_transpose2d(x, kernel, stride=1):
    """Adjoint of :func:`conv2d` with 'same' zero padding and the same kernel.

    Maps ``(h, w, c_out)`` to ``(stride*h, stride*w, c_in)``, so the kernel's
    output-channel axis must match the input. Satisfies the dot-product
    identity ``<conv2d(a, K), b> == <a, conv_transpose2d(b, K)>``.
    """
    x, kernel = _lift(x), _lift(kernel)
    _check_conv_operands(x, kernel, "conv_transpose2d", odd_only=False)
    if stride not in (1, 2):
        raise ContractError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    h, w, c = x.shape
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[2], kernel.shape[3]
    if c != c_out:
        raise DimensionError(f"conv_transpose2d: kernel produces {c_out} channels downstream, input has {c}")

    big_h, big_w = h * stride, w * stride
    oh, top, bottom = _same_pads(big_h, k, stride)
    ow, left, right = _same_pads(big_w, k, stride)
    assert (oh, ow) == (h, w)
    pads = (top, bottom, left, right)
    wmat = _kernel_matrix(kernel.data)
    xmat = x.data.reshape(h * w, c_out)
    out = _col2im(xmat @ wmat.T, h, w, k, c_in, big_h + top + bottom, big_w + left + right, stride, pads)

    def pull(g):
        padded = np.pad(g, ((top, bottom), (left, right), (0, 0)))
        cols, _, _ = _im2col(padded, k, stride)
        grad_x = (cols @ wmat).reshape(h, w, c_out) if x.requires_grad else None
        grad_k = _matrix_kernel(cols.T @ xmat, k, c_in, c_out) if kernel.requires_grad else None
        return grad_x, grad_k

    return _from_op(out, (x, kernel), pull)


def min_pool2d(x, window, stride):
    """Windowed minimum with 'same' geometry and pad value 1.

    Built for binary validity grids (the pad means out-of-image counts as
    missing), so the input must not be gradient-tracked.
    """
    x = _lift(x)
    if x.requires_grad:
        raise ContractError("min_pool2d is not differentiable; detach the input first")
    if x.ndim != 3:
        raise DimensionError(f"min_pool2d expects (h, w, c) input, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ContractError("min_pool2d: window and stride must be positive")
    h, w, _ = x.shape
    oh, top, bottom = _same_pads(h, window, stride)
    ow, left, right = _same_pads(w, window, stride)
    padded = np.pad(x.data, ((top, bottom), (left, right), (0, 0)), constant_values=1.0)
    windows = sliding_window_view(padded, (window, window), axis=(0, 1))[::stride, ::stride]
    assert windows.shape[:2] == (oh, ow)
    return Tensor(windows.min(axis=(3, 4)))
