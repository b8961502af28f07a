"""Dense float64 tensors with reverse-mode automatic differentiation.

Differentiable operations record onto a per-thread tape while gradients
are enabled.  ``backward`` replays that tape once, in reverse execution
order, accumulating gradients additively into every contributing tensor,
then discards the tape.  One tape per forward pass; no higher-order
derivatives.  All storage is double precision so numerical contracts
(finite-difference agreement, bit-exact masked forwards) hold tightly.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "matmul",
    "reshape",
    "transpose",
    "sum_all",
    "l2_norm",
    "softmax_cross_entropy",
    "batch_norm",
    "mean_pool",
    "depthwise_time_conv",
    "add_bias",
    "select",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A dense double-precision array plus an optional gradient slot.

    Treated as immutable once it has entered a forward pass, except for
    ``grad`` (written during backward) and ``data`` reassignment by an
    optimizer between passes.  A tensor with ``requires_grad=False``
    never receives a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    __slots__ = ("_records",)

    def __init__(self):
        # (output tensor, backward closure), in execution order
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._records)


_LOCAL = threading.local()


def _state() -> threading.local:
    if not hasattr(_LOCAL, "tape"):
        _LOCAL.tape = None
        _LOCAL.grad_enabled = True
    return _LOCAL


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def _wants_grad(*tensors: Tensor) -> bool:
    st = _state()
    return st.grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    st = _state()
    if st.tape is None:
        st.tape = Tape()
    st.tape._records.append((out, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # own, contiguous copy: g may be a view or a borrowed buffer
        t.grad = np.array(g, dtype=float)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray) -> None:
    """Like _accumulate, for an array the caller allocated and won't reuse."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    """Elementwise a + b; b may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out_data = a.data + float(b)
        if not _wants_grad(a):
            return Tensor(out_data)
        out = Tensor(out_data, requires_grad=True)

        def backward_fn(g):
            _accumulate(a, g)

        _record(out, backward_fn)
        return out
    b = _as_tensor(b)
    _check_same_shape("add", a, b)
    out_data = a.data + b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    _record(out, backward_fn)
    return out


def sub(a, b) -> Tensor:
    """Elementwise a - b; b may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = _as_tensor(b)
    _check_same_shape("sub", a, b)
    out_data = a.data - b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate_owned(b, -g)

    _record(out, backward_fn)
    return out


def mul(a, b) -> Tensor:
    """Elementwise a * b; b may be a python scalar (see also ``scale``)."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    _check_same_shape("mul", a, b)
    out_data = a.data * b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate_owned(a, g * b.data)
        if b.requires_grad:
            _accumulate_owned(b, g * a.data)

    _record(out, backward_fn)
    return out


def scale(a, s: float) -> Tensor:
    """Multiply every element of a by the scalar s."""
    a = _as_tensor(a)
    s = float(s)
    out_data = a.data * s
    if not _wants_grad(a):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate_owned(a, g * s)

    _record(out, backward_fn)
    return out


def relu(a) -> Tensor:
    """max(a, 0); the gradient passes only where the input is > 0."""
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    if not _wants_grad(a):
        return Tensor(out_data)
    positive = a.data > 0.0
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate_owned(a, g * positive)

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a, b) -> Tensor:
    """Matrix product of a (m x k) and b (k x n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data
    if not _wants_grad(a, b):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate_owned(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate_owned(b, a.data.T @ g)

    _record(out, backward_fn)
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    if not _wants_grad(a):
        return Tensor(out_data)
    in_shape = a.shape
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate(a, g.reshape(in_shape))

    _record(out, backward_fn)
    return out


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if not _wants_grad(a):
        return Tensor(out_data)
    inverse = tuple(np.argsort(axes))
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    _record(out, backward_fn)
    return out


def add_bias(x, b) -> Tensor:
    """Add a length-n bias vector to every row of x (m x n)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")
    out_data = x.data + b.data
    if not _wants_grad(x, b):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate_owned(b, g.sum(axis=0))

    _record(out, backward_fn)
    return out


def select(a, keep: np.ndarray) -> Tensor:
    """Keep entries of a where ``keep`` is true, zero elsewhere.

    Built with ``np.where`` so kept entries and zeros are produced
    bit-exactly (no sign-of-zero artifacts from multiplying by 0).  The
    gradient flows only to kept entries.
    """
    a = _as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeError(f"select: mask shape {keep.shape} does not match {a.shape}")
    out_data = np.where(keep, a.data, 0.0)
    if not _wants_grad(a):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate_owned(a, np.where(keep, g, 0.0))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum())
    if not _wants_grad(a):
        return Tensor(out_data)
    in_shape = a.shape
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g, in_shape))

    _record(out, backward_fn)
    return out


def l2_norm(a) -> Tensor:
    """Euclidean norm of all elements of a, as a scalar tensor.

    Subgradient convention at the origin: gradient is exactly zero.
    """
    a = _as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data * a.data)))
    out_data = np.asarray(norm)
    if not _wants_grad(a):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if norm > 0.0:
            _accumulate_owned(a, (float(g) / norm) * a.data)

    _record(out, backward_fn)
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    logits is (batch x classes); labels is an integer vector with values
    in [0, classes).  The backward rule is (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {batch}"
        )
    if batch == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("softmax_cross_entropy: labels must be integers")
    if labels.min() < 0 or labels.max() >= classes:
        raise IndexError(
            f"softmax_cross_entropy: label out of range for {classes} classes"
        )
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = float(-logp[np.arange(batch), labels].mean())
    out_data = np.asarray(loss)
    if not _wants_grad(logits):
        return Tensor(out_data)
    probs = ez / sez
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(batch), labels] -= 1.0
        _accumulate_owned(logits, (float(g) / batch) * d)

    _record(out, backward_fn)
    return out


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a (batch x C x T x N) tensor.

    Train mode normalizes with batch statistics over (batch, T, N) and
    updates the running buffers in place with the given momentum.  Eval
    mode normalizes with the running buffers.  gamma and beta are
    length-C tensors.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-d (B,C,T,N), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match "
            f"{channels} channels"
        )
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training and count == 0:
        raise ValueError("batch_norm: zero-size batch in train mode")
    gam = gamma.data[None, :, None, None]
    bet = beta.data[None, :, None, None]
    if training:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        # contracting centered with itself sums squares per channel
        # without materializing the squared array
        var = np.einsum("bctn,bctn->c", centered, centered) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        invstd = 1.0 / np.sqrt(var + eps)
        centered *= invstd[None, :, None, None]
        xhat = centered
    else:
        mean = running_mean
        var = running_var
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out_data = xhat * gam
    out_data += bet
    if not _wants_grad(x, gamma, beta):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if gamma.requires_grad:
            _accumulate_owned(gamma, np.einsum("bctn,bctn->c", g, xhat))
        if beta.requires_grad:
            _accumulate_owned(beta, g.sum(axis=axes))
        if x.requires_grad:
            istd = invstd[None, :, None, None]
            dxhat = g * gam
            if training:
                m1 = dxhat.mean(axis=axes, keepdims=True)
                m2 = np.einsum("bctn,bctn->c", dxhat, xhat)[None, :, None, None]
                m2 /= count
                dxhat -= m1
                dxhat -= xhat * m2
            dxhat *= istd
            _accumulate_owned(x, dxhat)

    _record(out, backward_fn)
    return out


def mean_pool(x) -> Tensor:
    """Mean over the time and joint axes: (B x C x T x N) -> (B x C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"mean_pool: input must be 4-d (B,C,T,N), got {x.shape}")
    out_data = x.data.mean(axis=(2, 3))
    if not _wants_grad(x):
        return Tensor(out_data)
    _, _, t, n = x.shape
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (t * n), x.shape))

    _record(out, backward_fn)
    return out


def depthwise_time_conv(x, w) -> Tensor:
    """Per-channel temporal correlation with zero padding.

    x is (B x C x T x N); w is (C x K) with K odd.  Channel c of the
    output at frame t is sum_j w[c, j] * x[c, t + j - (K-1)/2], frames
    outside [0, T) contributing zero.  Channels never mix.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"depthwise_time_conv: input must be 4-d, got {x.shape}")
    b, c, t, n = x.shape
    if w.ndim != 2 or w.shape[0] != c:
        raise ShapeError(
            f"depthwise_time_conv: kernel {w.shape} does not match {c} channels"
        )
    k = w.shape[1]
    if k % 2 != 1:
        raise ShapeError(f"depthwise_time_conv: kernel length {k} must be odd")
    pad = (k - 1) // 2
    xp = np.zeros((b, c, t + 2 * pad, n))
    xp[:, :, pad : pad + t, :] = x.data
    # windows[..., t, n, j] = xp[..., t + j, n]; contracting j against w
    # computes all taps in one stacked matmul
    windows = sliding_window_view(xp, k, axis=2)
    out_data = np.matmul(windows, w.data[None, :, None, :, None]).squeeze(-1)
    if not _wants_grad(x, w):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        if w.requires_grad:
            _accumulate_owned(w, np.einsum("bctn,bctnk->ck", g, windows))
        if x.requires_grad:
            # adjoint of zero-padded correlation: correlate the padded
            # upstream gradient with the time-reversed kernel
            gp = np.zeros((b, c, t + 2 * pad, n))
            gp[:, :, pad : pad + t, :] = g
            gwin = sliding_window_view(gp, k, axis=2)
            flipped = w.data[:, ::-1]
            dx = np.matmul(gwin, flipped[None, :, None, :, None]).squeeze(-1)
            _accumulate_owned(x, dx)

    _record(out, backward_fn)
    return out


def spatial_graph_conv(x, adj_t, w) -> Tensor:
    """Joint propagation followed by channel mixing, as one node.

    x is (B x C x T x N); adj_t is a constant (N x N) propagation matrix
    applied on the joint axis; w is (C x D) and mixes channels:
    out[b, d, t, m] = sum over c, n of x[b, c, t, n] * adj_t[n, m] * w[c, d].
    Fusing both products keeps the output contiguous and avoids taping
    the intermediate reshapes.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"spatial_graph_conv: input must be 4-d, got {x.shape}")
    b, c, t, n = x.shape
    adj_t = np.asarray(adj_t, dtype=float)
    if adj_t.shape != (n, n):
        raise ShapeError(
            f"spatial_graph_conv: propagation matrix {adj_t.shape} does not "
            f"match {n} joints"
        )
    if w.ndim != 2 or w.shape[0] != c:
        raise ShapeError(
            f"spatial_graph_conv: mixing matrix {w.shape} does not match "
            f"{c} channels"
        )
    d = w.shape[1]
    propagated = np.matmul(x.data, adj_t)  # (b, c, t, n)
    joints_last = np.ascontiguousarray(np.moveaxis(propagated, 1, 3))
    joints_last = joints_last.reshape(b * t * n, c)
    mixed = joints_last @ w.data  # (b*t*n, d)
    out_data = np.ascontiguousarray(np.moveaxis(mixed.reshape(b, t, n, d), 3, 1))
    if not _wants_grad(x, w):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)

    def backward_fn(g):
        g_last = np.ascontiguousarray(np.moveaxis(g, 1, 3)).reshape(b * t * n, d)
        if w.requires_grad:
            _accumulate_owned(w, joints_last.T @ g_last)
        if x.requires_grad:
            g_prop = np.ascontiguousarray(
                np.moveaxis((g_last @ w.data.T).reshape(b, t, n, c), 3, 1)
            )
            _accumulate_owned(x, np.matmul(g_prop, adj_t.T))

    _record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every contributing tensor.

    Replays the active tape once in reverse execution order, then clears
    it.  Recorded operations that did not feed the loss are skipped
    (their outputs carry no gradient).
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        got = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ValueError(f"backward: loss must be a scalar tensor, got {got}")
    st = _state()
    tape = st.tape
    st.tape = None
    if tape is None or not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape._records):
        if out.grad is not None:
            backward_fn(out.grad)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare the autodiff gradient of scalar f(x) with central differences.

    Returns the maximum relative error over coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(probe.data)).item()
            flat[i] = orig - eps
            lo = f(Tensor(probe.data)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
