"""Dense float tensors and a recording tape for reverse-mode differentiation.

Values are contiguous NumPy arrays — float32 by default, float64 on request
for high-precision gradient checking. Differentiable operations run eagerly
and, while a ComputationTape is active and some input requires gradients,
append a backward closure to the tape. ``tape.backward(loss)`` then replays
the record in exact reverse execution order and accumulates gradients into
the ``grad`` buffers of the trainable leaf tensors. Repeated backward calls
accumulate (two identical calls double every gradient) until ``zero_grad``.

Non-finite values are treated as errors, not data: every operation checks its
forward output and ``backward`` checks the gradients it deposits, raising
``FloatingPointError`` naming the operation that produced the bad values.

Elementwise arithmetic lives here (and backs the Tensor operators); image and
attention operations live in :mod:`stlth.ops`.
"""

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def check_finite(arr, what):
    # min/max instead of isfinite().all(): NaN poisons both reductions and
    # the infinities land at an end, so two alloc-free passes cover all cases
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise FloatingPointError(f"{what} produced non-finite values")


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._leaf = True
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flags})"

    # Arithmetic operators delegate to the module-level elementwise ops so
    # that tape recording happens in exactly one place per operation.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not provided; use reciprocal()")
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


_TAPE_STACK = []


def active_tape():
    """The innermost open ComputationTape, or None when not recording."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class ComputationTape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around the forward pass; ``backward(loss)``
    replays the recorded operations last-to-first. Gradients flow through a
    scratch table during the replay and are deposited into ``tensor.grad``
    only for trainable leaves, so intermediate tensors stay grad-free.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "ComputationTape contexts must nest"
        return False

    def record(self, outs, inputs, backward_fn):
        """Append one operation: ``backward_fn(*grads_of_outs) -> grads_of_inputs``.

        ``outs`` and ``inputs`` are tuples of Tensors; the closure receives
        one gradient array (or None) per output and must return one gradient
        array (or None) per input.
        """
        self._nodes.append((outs, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every trainable leaf's ``grad``."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        check_finite(loss.data, "loss")

        flows = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for outs, inputs, backward_fn in reversed(self._nodes):
            gouts = tuple(flows.get(id(o)) for o in outs)
            if all(g is None for g in gouts):
                continue
            gins = backward_fn(*gouts)
            for tensor, g in zip(inputs, gins):
                if g is None:
                    continue
                key = id(tensor)
                if key in flows:
                    flows[key] = flows[key] + g
                else:
                    flows[key] = g
                if tensor._leaf and tensor.requires_grad:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = flows[key]
            check_finite(g, "backward")
            if tensor.grad is None:
                tensor.grad = np.array(g, copy=True)
            else:
                tensor.grad = tensor.grad + g


def finish_op(name, data, inputs, backward_fn):
    """Wrap an op's forward result, recording it on the active tape.

    ``backward_fn(gout) -> tuple of input gradients`` is recorded only when a
    tape is open and some input requires gradients; otherwise the result is a
    plain constant tensor.
    """
    check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._leaf = not track
    if track:
        tape.record((out,), inputs, backward_fn)
    return out


def finish_op2(name, data_a, data_b, inputs, backward_fn):
    """Two-output variant of finish_op (``backward_fn(ga, gb)``)."""
    check_finite(data_a, name)
    check_finite(data_b, name)
    out_a = Tensor.__new__(Tensor)
    out_b = Tensor.__new__(Tensor)
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    for out, data in ((out_a, data_a), (out_b, data_b)):
        out.data = data
        out.grad = None
        out.requires_grad = track
        out._leaf = not track
    if track:
        tape.record((out_a, out_b), inputs, backward_fn)
    return out_a, out_b


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ "
                         "(no broadcasting)")


def add(a, b):
    _require_same_shape("add", a, b)

    def backward(g):
        return g, g

    return finish_op("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    _require_same_shape("sub", a, b)

    def backward(g):
        return g, -g

    return finish_op("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return finish_op("mul", ad * bd, (a, b), backward)


def add_scalar(a, c):
    c = a.data.dtype.type(c)

    def backward(g):
        return (g,)

    return finish_op("add_scalar", a.data + c, (a,), backward)


def mul_scalar(a, c):
    c = a.data.dtype.type(c)

    def backward(g):
        return (g * c,)

    return finish_op("mul_scalar", a.data * c, (a,), backward)


def neg(a):
    return mul_scalar(a, -1.0)


def reciprocal(a):
    y = 1.0 / a.data

    def backward(g):
        return (-g * y * y,)

    return finish_op("reciprocal", y, (a,), backward)


def sum_all(a):
    d = a.data

    def backward(g):
        return (np.broadcast_to(g, d.shape),)

    return finish_op("sum_all", np.asarray(d.sum(dtype=d.dtype)), (a,), backward)


def mean_all(a):
    d = a.data
    inv = d.dtype.type(1.0 / d.size)

    def backward(g):
        return (np.broadcast_to(g * inv, d.shape),)

    return finish_op("mean_all", np.asarray(d.mean(dtype=d.dtype)), (a,), backward)


def reshape(a, shape):
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return finish_op("reshape", a.data.reshape(shape), (a,), backward)
