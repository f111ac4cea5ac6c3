"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray of values plus an optional gradient buffer.  Ops
executed while a Tape is active record themselves on that tape; backward()
replays the tape in exact reverse order and accumulates gradients into the
participating tensors.  Everything is float64 and single threaded, so a
given graph produces bit-identical values and gradients on every run.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Operation inputs have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation saw or produced a NaN or infinity."""


class NonScalarRootError(ValueError):
    """backward() was called on a tensor with more than one element."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class Tensor:
    """A float64 array with an optional gradient buffer.

    ``data`` is the value array (at least rank 1; scalars are stored as
    shape ``(1,)``).  ``grad`` is lazily allocated by backward() and has
    the same shape as ``data``.  Tensors are treated as immutable once
    created; ops always allocate fresh outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ShapeMismatchError("tensors are rank 1 or 2, got rank %d" % arr.ndim)
        if arr.size == 0:
            raise ShapeMismatchError("empty tensors are not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None  # tape that recorded this tensor's producing op

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarRootError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking, never recorded."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


# Innermost entry wins.  None marks a no_grad region.
_TAPE_STACK: list = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Records ops executed inside its ``with`` block, in order."""

    def __init__(self):
        self._nodes: list[_Node] = []
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

    def _record(self, inputs, output, backward_fn):
        self._nodes.append(_Node(tuple(inputs), output, backward_fn))


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def backward(tape: Tape, root: Tensor):
    """Accumulate d(root)/d(leaf) into every tensor the tape touched.

    The root must hold exactly one element.  Gradients add onto whatever
    is already in ``grad``, so calling backward for several roots (on
    separate tapes) accumulates, which is what batched training wants.
    A tape can only be walked once.
    """
    if tape._consumed:
        raise TapeConsumedError("this tape has already been walked")
    if root.data.size != 1:
        raise NonScalarRootError(
            "backward needs a scalar root, got shape %s" % (root.shape,)
        )
    tape._consumed = True
    if root.grad is None:
        root.grad = np.zeros_like(root.data)
    root.grad = root.grad + np.ones_like(root.data)
    for node in reversed(tape._nodes):
        g = node.output.grad
        if g is None:
            continue
        for tensor, piece in zip(node.inputs, node.backward_fn(g)):
            if piece is None or not tensor.requires_grad:
                continue
            if piece.shape != tensor.data.shape:
                raise ShapeMismatchError(
                    "gradient shape %s does not match tensor shape %s"
                    % (piece.shape, tensor.data.shape)
                )
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += piece


# ----- numeric kernels -----
#
# Matrix products go through einsum rather than BLAS: einsum accumulates
# each output element with one sequential loop over k, so a row's bits do
# not depend on which other rows or columns are present in the call.  That
# property is what makes decoder prefix extension and exp-flushed-to-zero
# attention padding bit-exact.  The N == 1 case falls into einsum's dot
# kernel, which re-associates, so it is padded to two columns and sliced.


def _mm_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape[1] == 1:
        wide = np.concatenate([b, np.zeros_like(b)], axis=1)
        return np.einsum("ik,kj->ij", a, wide)[:, 0:1]
    return np.einsum("ik,kj->ij", a, b)


def _rowsum_keepdims(a: np.ndarray) -> np.ndarray:
    # Row sums via an einsum product against a two-column ones matrix:
    # same sequential accumulation guarantee as _mm_raw, unlike np.sum,
    # whose pairwise splits shift when trailing columns are appended.
    ones = np.ones((a.shape[1], 2))
    return np.einsum("ik,kj->ij", a, ones)[:, 0:1]


def _as2d(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a.reshape(1, -1)


def _check_finite_input(op: str, *tensors: Tensor):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError("%s received non-finite input" % op)


def _check_finite_output(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NonFiniteError("%s produced non-finite output" % op)


def _finish(inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._record(inputs, out, backward_fn)
        out.tape = tape
    return out


# ----- ops -----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-d ``a`` [m,k] and ``b`` [k,n]."""
    _check_finite_input("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeMismatchError(
            "matmul needs [m,k] x [k,n], got %s x %s" % (ad.shape, bd.shape)
        )
    out = _mm_raw(ad, bd)
    _check_finite_output("matmul", out)

    def bw(g):
        ga = _mm_raw(g, bd.T.copy()) if a.requires_grad else None
        gb = _mm_raw(ad.T.copy(), g) if b.requires_grad else None
        return ga, gb

    return _finish((a, b), out, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  The one allowed broadcast: a rank-1 ``b`` of
    length m added to every row of a rank-2 ``a`` with m columns (bias)."""
    _check_finite_input("add", a, b)
    ad, bd = a.data, b.data
    bias = ad.ndim == 2 and bd.ndim == 1
    if bias:
        if bd.shape[0] != ad.shape[1]:
            raise ShapeMismatchError(
                "bias add needs %d columns, got %s" % (ad.shape[1], bd.shape)
            )
        out = ad + bd
    elif ad.shape == bd.shape:
        out = ad + bd
    else:
        raise ShapeMismatchError("add shapes differ: %s vs %s" % (ad.shape, bd.shape))

    def bw(g):
        ga = g if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bias:
            gb = g.sum(axis=0)
        else:
            gb = g
        return ga, gb

    return _finish((a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _check_finite_input("mul", a, b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            "mul shapes differ: %s vs %s" % (a.data.shape, b.data.shape)
        )
    out = a.data * b.data

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _finish((a, b), out, bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, max-shifted for stability."""
    _check_finite_input("softmax_rows", a)
    ad = _as2d(a.data)
    shifted = ad - ad.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / _rowsum_keepdims(e)
    _check_finite_output("softmax_rows", out)
    if a.data.ndim == 1:
        out = out.reshape(-1)

    def bw(g):
        g2, s2 = _as2d(g), _as2d(out)
        inner = (g2 * s2).sum(axis=1, keepdims=True)
        ga = (g2 - inner) * s2
        return (ga.reshape(a.data.shape),)

    return _finish((a,), out, bw)


def log(a: Tensor) -> Tensor:
    """Natural log.  Non-positive inputs surface as a non-finite error."""
    _check_finite_input("log", a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite_output("log", out)

    def bw(g):
        return (g / a.data,)

    return _finish((a,), out, bw)


def exp(a: Tensor) -> Tensor:
    _check_finite_input("exp", a)
    out = np.exp(a.data)
    _check_finite_output("exp", out)

    def bw(g):
        return (g * out,)

    return _finish((a,), out, bw)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    _check_finite_input("relu", a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return _finish((a,), out, bw)


LAYER_NORM_EPS = 1e-5


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    _check_finite_input("layer_norm_rows", x, gain, bias)
    xd = x.data
    if xd.ndim != 2:
        raise ShapeMismatchError("layer_norm_rows needs a rank-2 input")
    d = xd.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatchError(
            "layer_norm_rows gain/bias must have shape (%d,)" % d
        )
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data
    _check_finite_output("layer_norm_rows", out)

    def bw(g):
        gxhat = g * gain.data
        if x.requires_grad:
            m1 = gxhat.mean(axis=1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv * (gxhat - m1 - xhat * m2)
        else:
            gx = None
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _finish((x, gain, bias), out, bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; repeated ids share gradient."""
    _check_finite_input("embedding_lookup", table)
    if table.data.ndim != 2:
        raise ShapeMismatchError("embedding table must be rank 2")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeMismatchError("embedding_lookup needs a non-empty id list")
    if idx.min() < 0 or idx.max() >= table.data.shape[0]:
        raise ShapeMismatchError(
            "embedding id out of range for table with %d rows" % table.data.shape[0]
        )
    out = table.data[idx].copy()

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish((table,), out, bw)


def concat(*parts: Tensor, axis: int = 0) -> Tensor:
    """Concatenate rank-2 tensors along rows (axis 0) or columns (axis 1)."""
    if not parts:
        raise ShapeMismatchError("concat needs at least one input")
    _check_finite_input("concat", *parts)
    if axis not in (0, 1):
        raise ShapeMismatchError("concat axis must be 0 or 1")
    datas = [_as2d(p.data) for p in parts]
    other = 1 - axis
    width = datas[0].shape[other]
    for d in datas[1:]:
        if d.shape[other] != width:
            raise ShapeMismatchError("concat inputs disagree on axis %d" % other)
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bw(g):
        pieces = []
        offset = 0
        for p, size in zip(parts, sizes):
            sl = (
                g[offset : offset + size]
                if axis == 0
                else g[:, offset : offset + size]
            )
            pieces.append(sl.reshape(p.data.shape) if p.requires_grad else None)
            offset += size
        return tuple(pieces)

    return _finish(parts, out, bw)


def slice_(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back as zeros
    outside the window."""
    _check_finite_input("slice", a)
    ad = a.data
    if axis not in (0, 1) or (axis == 1 and ad.ndim != 2):
        raise ShapeMismatchError("slice axis %d invalid for shape %s" % (axis, ad.shape))
    limit = ad.shape[axis]
    if not (0 <= start < stop <= limit):
        raise ShapeMismatchError(
            "slice [%d:%d) out of bounds for axis of length %d" % (start, stop, limit)
        )
    out = (ad[start:stop] if axis == 0 else ad[:, start:stop]).copy()

    def bw(g):
        ga = np.zeros_like(ad)
        if axis == 0:
            ga[start:stop] = g
        else:
            ga[:, start:stop] = g
        return (ga,)

    return _finish((a,), out, bw)


def transpose(a: Tensor) -> Tensor:
    _check_finite_input("transpose", a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose needs a rank-2 tensor")
    out = a.data.T.copy()

    def bw(g):
        return (g.T.copy(),)

    return _finish((a,), out, bw)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply every element by a python float constant."""
    factor = float(factor)
    if not np.isfinite(factor):
        raise NonFiniteError("scale factor must be finite")
    _check_finite_input("scale", a)
    out = a.data * factor

    def bw(g):
        return (g * factor,)

    return _finish((a,), out, bw)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a shape-(1,) tensor."""
    _check_finite_input("sum", a)
    out = np.array([a.data.sum()])
    _check_finite_output("sum", out)

    def bw(g):
        return (np.full_like(a.data, g.reshape(-1)[0]),)

    return _finish((a,), out, bw)


def mean_all(a: Tensor) -> Tensor:
    """Mean of every element, as a shape-(1,) tensor."""
    _check_finite_input("mean", a)
    out = np.array([a.data.mean()])

    def bw(g):
        return (np.full_like(a.data, g.reshape(-1)[0] / a.data.size),)

    return _finish((a,), out, bw)


def dropout_mask_apply(a: Tensor, mask: Tensor) -> Tensor:
    """Elementwise product with a fixed 0/1 keep mask.  The mask carries
    no gradient; scaling by 1/keep_prob is the caller's job."""
    _check_finite_input("dropout_mask_apply", a, mask)
    md = mask.data
    if md.shape != a.data.shape:
        raise ShapeMismatchError(
            "mask shape %s does not match input %s" % (md.shape, a.data.shape)
        )
    if not np.all((md == 0.0) | (md == 1.0)):
        raise ShapeMismatchError("dropout mask entries must be 0 or 1")
    out = a.data * md

    def bw(g):
        return (g * md, None)

    return _finish((a, mask), out, bw)


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax_rows": softmax_rows,
    "log": log,
    "exp": exp,
    "relu": relu,
    "layer_norm_rows": layer_norm_rows,
    "embedding_lookup": embedding_lookup,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "scale": scale,
    "sum": sum_all,
    "mean": mean_all,
    "dropout_mask_apply": dropout_mask_apply,
}


def forward_op(op_kind: str, inputs, **params) -> Tensor:
    """Dispatch by op name.  ``inputs`` is a list of tensors; anything
    else (ids, slice bounds, scale factor) goes through ``params``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError("unknown op_kind %r" % op_kind) from None
    return fn(*inputs, **params)


def finite_difference_grad(loss_fn, params, h: float = 1e-5):
    """Central-difference gradient oracle.

    ``loss_fn`` takes no arguments and returns the scalar loss computed
    from the current contents of each tensor in ``params``.  Entries are
    perturbed in place one coordinate at a time and restored afterwards.
    The loss must be deterministic; that is checked with a repeat call.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    first = float(loss_fn())
    if float(loss_fn()) != first:
        raise ValueError("loss_fn is not deterministic; cannot difference it")
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads
