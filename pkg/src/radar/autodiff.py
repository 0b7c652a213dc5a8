"""Dense reverse-mode automatic differentiation on numpy arrays.

Supplies exactly the operations the tagging model needs: matmul and
broadcast-aware elementwise arithmetic, sigmoid / tanh / exact-erf GELU,
segment softmax and segment sum for per-destination attention, gradient
reversal, inverted-scaling dropout, binary cross-entropy, an AdamW
optimizer, and a central-finite-difference gradient checker.

Training runs in float32; gradient checks run on float64-built models.
A ``Tape`` records executed ops in order; ``Tape.backward`` replays the
record in reverse. Ops executed with no active tape do not record and
propagate ``requires_grad=False`` (eval mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_ACTIVE_TAPE = None


class Tensor:
    """An nd-array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays lift to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops; backward traverses it in reverse."""

    def __init__(self):
        self._entries = []  # (output tensor, backward fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out, backward):
        self._entries.append((out, backward))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Seed d(loss)/d(loss) = 1 and accumulate gradients onto leaves."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if loss.grad is None:
            raise ValueError("loss does not require grad (was it recorded on this tape?)")
        loss.grad[...] = 1
        for out, backward in reversed(self._entries):
            backward(out.grad)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _lift2(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def _make_out(data, *inputs):
    """Create the op output; register grad buffer iff recording applies."""
    recording = _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=recording), recording


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _lift2(a, b)
    out, rec = _make_out(a.data + b.data, a, b)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.data.shape)

        _ACTIVE_TAPE._record(out, backward)
    return out


def sub(a, b):
    a, b = _lift2(a, b)
    out, rec = _make_out(a.data - b.data, a, b)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g, b.data.shape)

        _ACTIVE_TAPE._record(out, backward)
    return out


def mul(a, b):
    a, b = _lift2(a, b)
    out, rec = _make_out(a.data * b.data, a, b)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.data.shape)

        _ACTIVE_TAPE._record(out, backward)
    return out


def div(a, b):
    a, b = _lift2(a, b)
    out, rec = _make_out(a.data / b.data, a, b)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.data.shape)

        _ACTIVE_TAPE._record(out, backward)
    return out


def matmul(a, b):
    out, rec = _make_out(a.data @ b.data, a, b)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ g

        _ACTIVE_TAPE._record(out, backward)
    return out


def transpose(a):
    out, rec = _make_out(a.data.T.copy(), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g.T

        _ACTIVE_TAPE._record(out, backward)
    return out


def reshape(a, shape):
    out, rec = _make_out(a.data.reshape(shape), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g.reshape(a.data.shape)

        _ACTIVE_TAPE._record(out, backward)
    return out


def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out, rec = _make_out(s, a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g * s * (1.0 - s)

        _ACTIVE_TAPE._record(out, backward)
    return out


def tanh(a):
    t = np.tanh(a.data)
    out, rec = _make_out(t, a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g * (1.0 - t * t)

        _ACTIVE_TAPE._record(out, backward)
    return out


def gelu(a):
    """Exact GELU: x * Phi(x) with the erf-based Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out, rec = _make_out(x * cdf, a)
    if rec:

        def backward(g):
            if a.requires_grad:
                pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
                a.grad += g * (cdf + x * pdf)

        _ACTIVE_TAPE._record(out, backward)
    return out


def exp(a):
    e = np.exp(a.data)
    out, rec = _make_out(e, a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g * e

        _ACTIVE_TAPE._record(out, backward)
    return out


def log(a):
    out, rec = _make_out(np.log(a.data), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g / a.data

        _ACTIVE_TAPE._record(out, backward)
    return out


def clip(a, lo, hi):
    """Clamp values into [lo, hi]; gradient flows only inside the bounds."""
    out, rec = _make_out(np.clip(a.data, lo, hi), a)
    if rec:
        mask = (a.data > lo) & (a.data < hi)

        def backward(g):
            if a.requires_grad:
                a.grad += g * mask

        _ACTIVE_TAPE._record(out, backward)
    return out


def tensor_sum(a, axis=None):
    out, rec = _make_out(a.data.sum(axis=axis), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                if axis is None:
                    a.grad += g
                else:
                    a.grad += np.expand_dims(g, axis)

        _ACTIVE_TAPE._record(out, backward)
    return out


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis), 1.0 / n)


def concat(tensors, axis=0):
    out, rec = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if rec:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t.grad += g[tuple(idx)]

        _ACTIVE_TAPE._record(out, backward)
    return out


def slice_cols(a, start, stop):
    out, rec = _make_out(a.data[:, start:stop].copy(), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad[:, start:stop] += g

        _ACTIVE_TAPE._record(out, backward)
    return out


def gather_rows(a, index):
    """Select rows by integer index; duplicates accumulate on backward."""
    index = np.asarray(index, dtype=np.int64)
    out, rec = _make_out(a.data[index], a)
    if rec:

        def backward(g):
            if a.requires_grad:
                np.add.at(a.grad, index, g)

        _ACTIVE_TAPE._record(out, backward)
    return out


def segment_sum(values, segments, num_segments):
    """Sum value rows into their destination segment."""
    segments = np.asarray(segments, dtype=np.int64)
    data = np.zeros((num_segments,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(data, segments, values.data)
    out, rec = _make_out(data, values)
    if rec:

        def backward(g):
            if values.requires_grad:
                values.grad += g[segments]

        _ACTIVE_TAPE._record(out, backward)
    return out


def segment_softmax(logits, segments, num_segments):
    """Softmax over 1-d logits, normalized independently per segment.

    Stable via per-segment max subtraction. Empty segments are never
    queried (no edge maps to them), so they contribute nothing.
    """
    segments = np.asarray(segments, dtype=np.int64)
    x = logits.data
    seg_max = np.full(num_segments, -np.inf, dtype=x.dtype)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    denom = np.zeros(num_segments, dtype=x.dtype)
    np.add.at(denom, segments, e)
    w = e / denom[segments]
    out, rec = _make_out(w, logits)
    if rec:

        def backward(g):
            if logits.requires_grad:
                dot = np.zeros(num_segments, dtype=x.dtype)
                np.add.at(dot, segments, w * g)
                logits.grad += w * (g - dot[segments])

        _ACTIVE_TAPE._record(out, backward)
    return out


def grad_reverse(a, lam):
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    out, rec = _make_out(a.data.copy(), a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += -lam * g

        _ACTIVE_TAPE._record(out, backward)
    return out


def dropout(a, rate, rng):
    """Inverted-scaling dropout: scale kept entries by 1/(1-rate).

    Callers invoke this in training mode only; eval paths skip the call,
    which makes eval an exact identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = keep / (1.0 - rate)
    out, rec = _make_out(a.data * scale, a)
    if rec:

        def backward(g):
            if a.requires_grad:
                a.grad += g * scale

        _ACTIVE_TAPE._record(out, backward)
    return out


def maximum(a, b):
    """Elementwise max of a pair; gradient splits 50/50 on exact ties."""
    out, rec = _make_out(np.maximum(a.data, b.data), a, b)
    if rec:
        wa = (a.data > b.data) + 0.5 * (a.data == b.data)

        def backward(g):
            if a.requires_grad:
                a.grad += g * wa
            if b.requires_grad:
                b.grad += g * (1.0 - wa)

        _ACTIVE_TAPE._record(out, backward)
    return out


def pair_mean(a, b):
    """Elementwise mean of a pair of same-shape tensors."""
    return mul(add(a, b), 0.5)


def bce_loss(pred, target, weight=None, eps=1e-7):
    """Mean binary cross-entropy; predictions clamped eps from {0, 1}.

    With `weight`, entries are weighted and the mean runs over the total
    weight (used for negative-sampling masks).
    """
    target = _lift(target, pred)
    p = clip(pred, eps, 1.0 - eps)
    ce = -(target * log(p) + (1.0 - target) * log(1.0 - p))
    if weight is None:
        return mean(ce)
    w = np.asarray(weight, dtype=pred.data.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("bce_loss weight mask is empty")
    return mul(tensor_sum(mul(ce, Tensor(w))), 1.0 / total)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay over named parameter tensors."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params.items()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "m": {name: m.copy() for name, m in self.m.items()},
            "v": {name: v.copy() for name, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        for name, _ in self.params:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int

    def passed(self, tolerance):
        return self.max_rel_err <= tolerance


def finite_diff_check(fn, params, step=1e-5, max_entries_per_tensor=None, rng=None):
    """Compare tape gradients of `fn` against central finite differences.

    `fn` must be a deterministic scalar-valued closure over the given
    named parameter tensors (dropout disabled), built in float64.
    Optionally probes only `max_entries_per_tensor` coordinates per
    tensor (uniformly chosen) to bound runtime on large models.
    """
    params = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params}

    worst = FiniteDiffReport(0.0, "", -1, 0)
    n_checked = 0
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_tensor, replace=False)
        else:
            idxs = range(n)
        ana_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = float(ana_flat[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            n_checked += 1
            if rel > worst.max_rel_err:
                worst = FiniteDiffReport(rel, name, int(i), n_checked)
    return FiniteDiffReport(worst.max_rel_err, worst.worst_param, worst.worst_index, n_checked)
