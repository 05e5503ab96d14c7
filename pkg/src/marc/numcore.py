"""2-D float64 tensors with tape-based reverse-mode autodiff and Adam.

The primitive set is the closure needed by the compression, matching and
probe networks: dense matmul, broadcasted elementwise arithmetic,
activations, reductions, concat/slice/gather, pairwise squared distances
and row softmax. A single dynamic :class:`Tape` records one training step
and :func:`backward` replays it in exact reverse order. Any non-finite
forward or backward value aborts the step with the offending operation
named. The tape stack is thread-local, so independent training runs can
record concurrently.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericError",
    "backward",
    "Adam",
    "adam_step",
    "finite_diff_check",
    "kink_distance_trace",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "absolute",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "take_rows",
    "row_sum",
    "sum_all",
    "mean_all",
    "trace",
    "pairwise_sqdist",
    "sqdist_matrix",
    "softmax_rows",
]

_tls = threading.local()


class NumericError(RuntimeError):
    """Raised when a non-finite value shows up in a forward/backward pass."""


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost Tape on this thread, or None outside any `with Tape()`."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitive ops of one forward pass."""

    def __init__(self):
        self._entries = []  # (out Tensor, op name, backward fn)
        self._produced = set()  # id() of tensors created on this tape

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._entries)


class Tensor:
    """Dense real matrix with an optional accumulated gradient.

    Values are always float64 and 2-D; scalars are 1x1, vectors 1xN.
    ``grad`` is only defined for tensors with ``requires_grad=True`` and
    reads as zeros until :func:`backward` has accumulated into it.
    """

    __slots__ = ("values", "_grad", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, arr.shape[0])
        elif arr.ndim != 2:
            raise ValueError(f"tensor must be 2-D, got shape {arr.shape}")
        self.values = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def grad(self):
        if not self.requires_grad:
            raise ValueError(
                f"grad of tensor {self._label()} with requires_grad=False is never populated"
            )
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        if self.values.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def _label(self):
        return self.name if self.name is not None else f"<{self.shape[0]}x{self.shape[1]}>"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    # operator sugar; scalars promote to 1x1 constants
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(vals, op):
    # A full isfinite pass is only paid when the cheap sum guard trips.
    s = vals.sum()
    if not np.isfinite(s) and not np.isfinite(vals).all():
        raise NumericError(f"non-finite values produced by {op}")


class kink_distance_trace:
    """Records how close any relu/absolute/clamp input came to its kink.

    Central differences are only a valid gradient oracle when the
    evaluation point is bounded away from the piecewise-linear kinks, so
    finite-difference tests use this to verify the test point before
    trusting the comparison.
    """

    def __enter__(self):
        _tls.kink_min = np.inf
        _tls.kink_on = True
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.kink_on = False
        return False

    @property
    def min_distance(self):
        return _tls.kink_min


def _note_kink(dist):
    if getattr(_tls, "kink_on", False):
        _tls.kink_min = min(_tls.kink_min, dist)


def _record(op, out_vals, inputs, backward_fn):
    _check_finite(out_vals, op)
    tape = active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_vals, requires_grad=req)
    if req:
        tape._entries.append((out, op, backward_fn))
        tape._produced.add(id(out))
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    ``loss`` must be a 1x1 tensor produced on the active tape. Repeated
    calls keep accumulating until grads are zeroed.
    """
    tape = active_tape()
    if tape is None:
        raise RuntimeError("backward: no active tape")
    if loss.shape != (1, 1):
        raise ValueError(f"backward: loss must be 1x1, got {loss.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("backward: loss was not produced on the active tape")

    flows = {id(loss): (loss, np.ones((1, 1)))}

    def flow(t, g):
        if not t.requires_grad:
            return
        key = id(t)
        cur = flows.get(key)
        flows[key] = (t, g) if cur is None else (t, cur[1] + g)

    for out, op, fn in reversed(tape._entries):
        got = flows.pop(id(out), None)
        if got is None:
            continue
        g = got[1]
        _check_finite(g, f"backward of {op}")
        fn(g, flow)
        out._grad = g if out._grad is None else out._grad + g
    for t, g in flows.values():
        t._grad = g if t._grad is None else t._grad + g


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_op(op, a, b, fwd, da, db):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    out_vals = fwd(a.values, b.values)

    def backward_fn(g, flow):
        if a.requires_grad:
            flow(a, _unbroadcast(da(g, a.values, b.values), a.shape))
        if b.requires_grad:
            flow(b, _unbroadcast(db(g, a.values, b.values), b.shape))

    return _record(op, out_vals, (a, b), backward_fn)


def add(a, b):
    return _broadcast_op("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _broadcast_op("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _broadcast_op(
        "mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _broadcast_op(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out_vals = a.values @ b.values

    def backward_fn(g, flow):
        if a.requires_grad:
            flow(a, g @ b.values.T)
        if b.requires_grad:
            flow(b, a.values.T @ g)

    return _record("matmul", out_vals, (a, b), backward_fn)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)

    def backward_fn(g, flow):
        flow(a, g * c)

    return _record("scale", a.values * c, (a,), backward_fn)


def absolute(a):
    a = _as_tensor(a)
    out_vals = np.abs(a.values)
    if a.values.size:
        _note_kink(float(out_vals.min()))

    def backward_fn(g, flow):
        flow(a, g * np.sign(a.values))

    return _record("absolute", out_vals, (a,), backward_fn)


def relu(a):
    a = _as_tensor(a)
    if a.values.size:
        _note_kink(float(np.abs(a.values).min()))

    def backward_fn(g, flow):
        flow(a, g * (a.values > 0.0))

    return _record("relu", np.maximum(a.values, 0.0), (a,), backward_fn)


def sigmoid(a):
    a = _as_tensor(a)
    # split by sign to avoid exp overflow on large negative inputs
    v = a.values
    out_vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def backward_fn(g, flow):
        flow(a, g * out_vals * (1.0 - out_vals))

    return _record("sigmoid", out_vals, (a,), backward_fn)


def exp(a):
    a = _as_tensor(a)
    out_vals = np.exp(a.values)

    def backward_fn(g, flow):
        flow(a, g * out_vals)

    return _record("exp", out_vals, (a,), backward_fn)


def log(a):
    a = _as_tensor(a)

    def backward_fn(g, flow):
        flow(a, g / a.values)

    return _record("log", np.log(a.values), (a,), backward_fn)


def sqrt(a):
    a = _as_tensor(a)
    out_vals = np.sqrt(a.values)

    def backward_fn(g, flow):
        flow(a, g * 0.5 / out_vals)

    return _record("sqrt", out_vals, (a,), backward_fn)


def clamp(a, lo, hi):
    a = _as_tensor(a)
    mask = (a.values >= lo) & (a.values <= hi)
    if a.values.size:
        _note_kink(float(np.abs(a.values - lo).min()))
        _note_kink(float(np.abs(a.values - hi).min()))

    def backward_fn(g, flow):
        flow(a, g * mask)

    return _record("clamp", np.clip(a.values, lo, hi), (a,), backward_fn)


def transpose(a):
    a = _as_tensor(a)

    def backward_fn(g, flow):
        flow(a, g.T)

    return _record("transpose", a.values.T.copy(), (a,), backward_fn)


def concat_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ValueError(
                f"concat_rows: column counts differ, {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[0] for p in parts]

    def backward_fn(g, flow):
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                flow(p, g[off : off + s, :])
            off += s

    return _record("concat_rows", np.concatenate([p.values for p in parts], axis=0), tuple(parts), backward_fn)


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ValueError(f"concat_cols: row counts differ, {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]

    def backward_fn(g, flow):
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                flow(p, g[:, off : off + s])
            off += s

    return _record("concat_cols", np.concatenate([p.values for p in parts], axis=1), tuple(parts), backward_fn)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")

    def backward_fn(g, flow):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            flow(a, full)

    return _record("slice_cols", a.values[:, start:stop].copy(), (a,), backward_fn)


def take_rows(a, indices):
    """Gather rows by integer index; backward scatter-adds (embedding lookup)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"take_rows: index out of range for shape {a.shape}")

    def backward_fn(g, flow):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            np.add.at(full, idx, g)
            flow(a, full)

    return _record("take_rows", a.values[idx, :], (a,), backward_fn)


def row_sum(a):
    a = _as_tensor(a)

    def backward_fn(g, flow):
        flow(a, np.broadcast_to(g, a.shape).copy())

    return _record("row_sum", a.values.sum(axis=1, keepdims=True), (a,), backward_fn)


def sum_all(a):
    a = _as_tensor(a)

    def backward_fn(g, flow):
        flow(a, np.full(a.shape, g[0, 0]))

    return _record("sum", np.array([[a.values.sum()]]), (a,), backward_fn)


def mean_all(a):
    a = _as_tensor(a)
    size = a.values.size

    def backward_fn(g, flow):
        flow(a, np.full(a.shape, g[0, 0] / size))

    return _record("mean", np.array([[a.values.mean()]]), (a,), backward_fn)


def trace(a):
    a = _as_tensor(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"trace: needs a square matrix, got {a.shape}")

    def backward_fn(g, flow):
        flow(a, g[0, 0] * np.eye(a.shape[0]))

    return _record("trace", np.array([[np.trace(a.values)]]), (a,), backward_fn)


def sqdist_matrix(x):
    """Plain ndarray helper behind :func:`pairwise_sqdist`.

    Exactly symmetric, exactly zero diagonal; distances below the roundoff
    floor of the Gram-matrix formula snap to zero so coincident rows come
    out exactly coincident.
    """
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1, keepdims=True)
    d = sq + sq.T - 2.0 * (x @ x.T)
    d = 0.5 * (d + d.T)
    d[d <= 1e-12 * max(1.0, float(sq.max(initial=0.0)))] = 0.0
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_sqdist(a):
    """n x n matrix of squared euclidean distances between the rows of ``a``."""
    a = _as_tensor(a)
    x = a.values
    d = sqdist_matrix(x)

    def backward_fn(g, flow):
        if a.requires_grad:
            s = g + g.T
            flow(a, 2.0 * (s.sum(axis=1, keepdims=True) * x - s @ x))

    return _record("pairwise_sqdist", d, (a,), backward_fn)


def softmax_rows(a):
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g, flow):
        if a.requires_grad:
            flow(a, out_vals * (g - (g * out_vals).sum(axis=1, keepdims=True)))

    return _record("softmax_rows", out_vals, (a,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list.

    ``step()`` applies one update and zeroes the gradients afterwards; a
    non-finite gradient aborts with the parameter named. ``lr_scales``
    optionally rescales the learning rate per parameter.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError(f"Adam: parameter {p._label()} does not require grad")
        self.lr = float(lr)
        if lr_scales is None:
            lr_scales = [1.0] * len(self.params)
        if len(lr_scales) != len(self.params):
            raise ValueError("Adam: lr_scales must match the parameter list")
        self.lr_scales = [float(s) for s in lr_scales]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p._grad
            if g is None:
                g = 0.0
            elif not np.isfinite(g.sum()) and not np.isfinite(g).all():
                raise NumericError(
                    f"non-finite gradient for parameter {p.name or i}; aborting step"
                )
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.values -= (
                self.lr * self.lr_scales[i] * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            )
            p._grad = None

    def zero_grad(self):
        for p in self.params:
            p._grad = None


def adam_step(optimizer):
    """One optimizer update; alias for :meth:`Adam.step`."""
    optimizer.step()


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a 1x1
    tensor built from ``params``. Relative error is measured against
    ``max(1, |analytic|, |numeric|)`` entrywise. Returns a report dict with
    per-parameter worst errors and an overall pass flag.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        if loss.shape != (1, 1):
            raise ValueError(f"finite_diff_check: f() must be scalar, got {loss.shape}")
        backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    per_param = []
    for i, p in enumerate(params):
        worst = 0.0
        flat = p.values.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f().item()
            flat[j] = orig - step
            fm = f().item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"finite_diff_check: non-finite value while perturbing parameter {i}"
                )
            num = (fp - fm) / (2.0 * step)
            ana = analytic[i].ravel()[j]
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if rel > worst:
                worst = rel
        per_param.append(worst)
    max_rel = max(per_param) if per_param else 0.0
    return {
        "per_param": per_param,
        "max_rel_err": max_rel,
        "tol": tol,
        "passed": max_rel < tol,
    }
