"""Dense tensors with taped reverse-mode differentiation.

The engine is deliberately small: just enough operations to express a couple
of convolutional encoders, a linear head, and a binary cross-entropy loss.
Values live in numpy arrays (float32 by default, float64 supported
throughout for numerically strict tests); gradients are plain arrays stored
on the tensors themselves.

Differentiable operations record onto an explicit :class:`Tape`:

    with Tape() as tape:
        y = dense(x, w, b)
        loss = activation(y, "sigmoid").mean()
    backward(loss, tape)   # populates .grad on x, w, b

A tape is single-use; running :func:`backward` twice on the same tape is an
error. Operations executed with no tape active simply compute their result,
which is how inference runs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_SUPPORTED_DTYPES = (np.float32, np.float64)


class TapeConsumedError(RuntimeError):
    """Raised when backward() is called on an already-consumed tape."""


class Tensor:
    """A dense multi-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def copy(self):
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar; scalars are folded in at the tensor's own dtype.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def log(self):
        return log(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    """One recorded operation: its output and a vector-Jacobian product."""

    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output, inputs, vjp):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK = []


class Tape:
    """Ordered record of differentiable operations, consumed by backward().

    Execution order is topological order by construction: an operation can
    only run after its inputs exist.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self):
        return self._consumed


def _record(output, inputs, vjp):
    """Attach a node to the active tape, if recording and grads are wanted."""
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE_STACK[-1]._nodes.append(_Node(output, inputs, vjp))
    return output


def _accumulate(tensor, grad):
    if grad is None:
        return
    if tensor.grad is None:
        tensor.grad = grad.astype(tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


def backward(loss, tape):
    """Propagate d(loss)/d(tensor) into .grad for every tensor on the tape.

    The seed gradient of the scalar loss is 1. Gradients accumulate
    additively, so callers must zero .grad between steps. The tape is
    consumed: a second backward() on it raises TapeConsumedError.
    """
    if loss.size != 1:
        raise ValueError(
            f"backward() needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    if tape._consumed:
        raise TapeConsumedError(
            "this tape was already consumed by backward(); re-record the "
            "forward pass to differentiate again"
        )
    tape._consumed = True
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape._nodes):
        grad_out = node.output.grad
        if grad_out is None:
            continue
        grads = node.vjp(grad_out)
        for tensor, grad in zip(node.inputs, grads):
            if tensor.requires_grad:
                _accumulate(tensor, grad)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(
            f"{op}: operand shapes {tuple(a.shape)} and {tuple(b.shape)} differ"
        )


def add(a, b):
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Element-wise (Hadamard) product of same-shape tensors."""
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    c = a.data.dtype.type(c)
    out = Tensor(a.data + c)
    return _record(out, (a,), lambda g: (g,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask.astype(g.dtype),)

    return _record(out, (a,), vjp)


def reduce_sum(a):
    out = Tensor(a.data.sum())

    def vjp(g):
        return (np.full_like(a.data, g),)

    return _record(out, (a,), vjp)


def reduce_mean(a):
    out = Tensor(a.data.mean())
    inv_n = 1.0 / a.size

    def vjp(g):
        return (np.full_like(a.data, g * inv_n),)

    return _record(out, (a,), vjp)


def reshape(a, shape):
    out_data = a.data.reshape(shape)
    out = Tensor(out_data)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, (a,), vjp)


def concat(a, b, axis=1):
    """Concatenate two tensors along `axis` (used for embedding fusion)."""
    if a.ndim != b.ndim:
        raise ValueError(
            f"concat: ranks differ ({a.ndim} vs {b.ndim})"
        )
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ValueError(
                f"concat: shapes {tuple(a.shape)} and {tuple(b.shape)} "
                f"disagree on dimension {d}"
            )
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def vjp(g):
        ga, gb = np.split(g, [split], axis=axis)
        return (ga, gb)

    return _record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# neural-network operations


def activation(a, kind):
    """Element-wise nonlinearity, kind in {"relu", "sigmoid"}.

    Sigmoid uses the sign-split form so exp() never overflows.
    """
    x = a.data
    if kind == "relu":
        out = Tensor(np.maximum(x, 0))
        mask = x > 0

        def vjp(g):
            return (g * mask.astype(g.dtype),)

    elif kind == "sigmoid":
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        out = Tensor(s)

        def vjp(g):
            return (g * s * (1.0 - s),)

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _record(out, (a,), vjp)


def dense(inp, weight, bias):
    """Affine map [N,D] @ [D,M] + [M]."""
    if inp.ndim != 2 or weight.ndim != 2:
        raise ValueError(
            f"dense: expected 2-d input and weight, got {tuple(inp.shape)} "
            f"and {tuple(weight.shape)}"
        )
    if inp.shape[1] != weight.shape[0]:
        raise ValueError(
            f"dense: input feature dim {inp.shape[1]} != weight input dim "
            f"{weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ValueError(
            f"dense: bias shape {tuple(bias.shape)} != ({weight.shape[1]},)"
        )
    out = Tensor(inp.data @ weight.data + bias.data)

    def vjp(g):
        return (g @ weight.data.T, inp.data.T @ g, g.sum(axis=0))

    return _record(out, (inp, weight, bias), vjp)


def _conv_windows(padded, n, c, out_h, out_w, kh, kw, stride):
    """Strided [N,C,H',W',kh,kw] view over a padded input. Read-only."""
    sn, sc, sh, sw = padded.strides
    shape = (n, c, out_h, out_w, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(
        padded, shape=shape, strides=strides, writeable=False
    )


def conv2d(inp, kernel, bias, stride=1, padding=0):
    """Cross-correlation of [N,C,H,W] with [K,C,kh,kw] kernels plus bias[K].

    Zero padding, no kernel flip. Output spatial size is
    floor((H + 2*padding - kh) / stride) + 1 per axis.
    """
    if inp.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d, got {tuple(inp.shape)}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got {tuple(kernel.shape)}")
    n, c, h, w = inp.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(
            f"conv2d: kernel channel dim {kc} != input channel dim {c}"
        )
    if bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} != ({k},)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    ph, pw = h + 2 * padding, w + 2 * padding
    if kh > ph:
        raise ValueError(
            f"conv2d: kernel height {kh} exceeds padded input height {ph}"
        )
    if kw > pw:
        raise ValueError(
            f"conv2d: kernel width {kw} exceeds padded input width {pw}"
        )
    out_h = (ph - kh) // stride + 1
    out_w = (pw - kw) // stride + 1

    if padding:
        padded = np.pad(
            inp.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
        )
    else:
        padded = inp.data
    windows = _conv_windows(padded, n, c, out_h, out_w, kh, kw, stride)
    # One contiguous im2col copy; forward and both weight-side gradients are
    # then plain BLAS matmuls.
    cols = np.ascontiguousarray(
        windows.transpose(0, 2, 3, 1, 4, 5)
    ).reshape(n * out_h * out_w, c * kh * kw)
    kmat = kernel.data.reshape(k, c * kh * kw)
    out_data = (cols @ kmat.T).reshape(n, out_h, out_w, k).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    out_data += bias.data[None, :, None, None]
    out = Tensor(out_data)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            n * out_h * out_w, k
        )
        grad_bias = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        grad_kernel = None
        if kernel.requires_grad:
            grad_kernel = (gmat.T @ cols).reshape(k, c, kh, kw)
        grad_inp = None
        if inp.requires_grad:
            gcols = (gmat @ kmat).reshape(n, out_h, out_w, c, kh, kw)
            gpad = np.zeros_like(padded)
            # Scatter each kernel tap back over its strided footprint.
            for i in range(kh):
                for j in range(kw):
                    gpad[
                        :, :,
                        i : i + out_h * stride : stride,
                        j : j + out_w * stride : stride,
                    ] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                grad_inp = gpad[:, :, padding:-padding, padding:-padding]
            else:
                grad_inp = gpad
        return (grad_inp, grad_kernel, grad_bias)

    return _record(out, (inp, kernel, bias), vjp)


def pool(inp, mode, window=2):
    """Spatial pooling over [N,C,H,W].

    "max" requires H and W divisible by `window`; gradient goes to the
    first maximal element of each block in row-major order. "global_avg"
    reduces to [N,C].
    """
    if inp.ndim != 4:
        raise ValueError(f"pool: input must be 4-d, got {tuple(inp.shape)}")
    if window < 1:
        raise ValueError(f"pool: window must be positive, got {window}")
    n, c, h, w = inp.shape
    if mode == "max":
        if h % window or w % window:
            raise ValueError(
                f"pool: spatial dims ({h}, {w}) not divisible by window {window}"
            )
        oh, ow = h // window, w // window
        blocks = (
            inp.data.reshape(n, c, oh, window, ow, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh, ow, window * window)
        )
        # argmax returns the first maximum, i.e. row-major tie-breaking.
        idx = blocks.argmax(axis=-1)
        out_data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        out = Tensor(out_data)

        def vjp(g):
            gb = np.zeros((n, c, oh, ow, window * window), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            grad = (
                gb.reshape(n, c, oh, ow, window, window)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            return (grad,)

    elif mode == "global_avg":
        out = Tensor(inp.data.mean(axis=(2, 3)))
        inv = 1.0 / (h * w)

        def vjp(g):
            return (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)).copy(),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _record(out, (inp,), vjp)
