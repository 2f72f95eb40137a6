"""Dense tensors with reverse-mode automatic differentiation.

A thin tape over numpy: every operation that touches a tensor requiring
gradients records a node (parents + a closure producing parent gradients),
and ``backward`` walks the recorded graph once in reverse topological
order.  The tape lives only for the duration of one forward/backward pair
and is dropped afterwards; there is no support for higher-order
derivatives.

float64 is the default dtype so that the algebraic-identity checks in the
verification suites can run at 1e-10 tolerances; float32 can be selected
per tensor (and per model) for training speed.

Tensors are immutable after creation except for the ``grad`` slot, so
read-only use from several threads is safe as long as each thread builds
its own graph.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ConfigError

DEFAULT_DTYPE = np.float64

# When enabled, every forward op asserts its output is finite. Slow; used
# by the test suite and `verify` runs, not by training.
debug_nan_checks = False


class _Node:
    """One recorded operation: where the output came from and how to push
    gradients back to its parents."""

    __slots__ = ("op", "parents", "grad_fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 grad_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Node] = None

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # ------------------------------------------------------------------
    # autograd mechanics

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor in this graph that requires it.

        The loss must be scalar.  Gradients from multiple uses of the same
        tensor accumulate additively.  The recorded tape is released once
        the walk finishes.
        """
        if self.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.node is not None or p.requires_grad:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad:
                t._accumulate(g)
            if t.node is None:
                continue
            parent_grads = t.node.grad_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not (p.requires_grad or p.node is not None):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

        # Tape is single-use: free the graph so intermediates can be collected.
        for t in order:
            t.node = None


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if debug_nan_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data, dtype=out_data.dtype)
    if any(p.requires_grad or p.node is not None for p in parents):
        out.node = _Node(op, parents, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data + b.data
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data - b.data
    return _make(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data * b.data
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; trailing two axes contract, leading axes
    broadcast. Gradients: d a = g @ b^T, d b = a^T @ g."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), grad_fn)


# ----------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, "relu", (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through strictly inside
    the interval and is zero where the clamp engaged."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(out, "clip", (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------------
# shape / reduction


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axis)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise DimensionError(f"reduction axis {ax} out of range for ndim {ndim}")
    return axes


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, "sum", (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, "mean", (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(ax)
    out = a.data.transpose(ax)
    return _make(out, "transpose", (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat axis {axis} out of range for ndim {nd}")
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(i != axis and t.shape[i] != tensors[0].shape[i]
                               for i in range(nd)):
            raise DimensionError(
                f"concat shapes incompatible: {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), grad_fn)


def take_rows(weights: Tensor, ids: np.ndarray,
              on_backward: Optional[Callable[[np.ndarray], None]] = None) -> Tensor:
    """Row gather `weights[ids]`; the backward pass scatter-adds into the
    weight gradient, touching only the gathered rows.  `on_backward`, when
    given, receives the unique row indices that received gradient."""
    ids = np.asarray(ids)
    out = weights.data[ids]

    def grad_fn(g):
        gw = np.zeros_like(weights.data)
        np.add.at(gw, ids, g)
        if on_backward is not None:
            on_backward(np.unique(ids))
        return (gw,)

    return _make(out, "take_rows", (weights,), grad_fn)


# ----------------------------------------------------------------------
# structured ops


def conv1d(x: Tensor, kernels: Tensor) -> Tensor:
    """1-D convolution over the time axis with zero-padded "same" output.

    x: [t, n] or [batch, t, n].
    kernels: [k, n, c] (static) or [batch, k, n, c] (one kernel stack per
    instance).  k must be odd.  When c == 1 the convolution is depthwise:
    each input channel is filtered by its own scalar taps and the output
    keeps n channels; otherwise channels mix and the output has c channels.
    """
    squeeze_batch = x.ndim == 2
    xd = x.data[None] if squeeze_batch else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be [t,n] or [batch,t,n], got {x.shape}")
    kd = kernels.data
    static_kernel = kd.ndim == 3
    if static_kernel:
        kd = kd[None]
    if kd.ndim != 4:
        raise DimensionError(f"conv1d kernels must be [k,n,c] or [batch,k,n,c], got {kernels.shape}")
    batch, t, n = xd.shape
    kb, k, kn, c = kd.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if kn != n:
        raise DimensionError(f"conv1d channel mismatch: input has {n}, kernels have {kn}")
    if not static_kernel and kb != batch:
        raise DimensionError(f"conv1d batch mismatch: input {batch}, kernels {kb}")
    depthwise = c == 1
    half = k // 2
    xp = np.pad(xd, ((0, 0), (half, half), (0, 0)))

    if depthwise:
        out = np.zeros((batch, t, n), dtype=xd.dtype)
        for j in range(k):
            out += xp[:, j:j + t, :] * kd[:, j, :, 0][:, None, :]
    else:
        out = np.zeros((batch, t, c), dtype=xd.dtype)
        for j in range(k):
            out += np.matmul(xp[:, j:j + t, :], kd[:, j])

    def grad_fn(g):
        if squeeze_batch:
            g = g[None]
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(k):
            win = xp[:, j:j + t, :]
            if depthwise:
                gk[:, j, :, 0] = (g * win).sum(axis=1)
                gxp[:, j:j + t, :] += g * kd[:, j, :, 0][:, None, :]
            else:
                gk[:, j] = np.matmul(win.transpose(0, 2, 1), g)
                gxp[:, j:j + t, :] += np.matmul(g, kd[:, j].transpose(0, 2, 1))
        gx = gxp[:, half:half + t, :]
        if squeeze_batch:
            gx = gx[0]
        if static_kernel:
            gk = gk.sum(axis=0)
        return gx, gk

    out_t = out[0] if squeeze_batch else out
    return _make(out_t, "conv1d", (x, kernels), grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of a [batch, d] tensor.

    Training mode normalizes with batch statistics and folds them into the
    running estimates in place (`running <- momentum*running + (1-m)*batch`);
    eval mode uses the running estimates.  Training requires batch >= 2.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects [batch, d], got {x.shape}")
    b = x.shape[0]
    if training:
        if b < 2:
            raise RuntimeError(f"batch_norm in training mode needs batch >= 2, got {b}")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        g_xhat = g * gamma.data
        if training:
            gx = (inv_std / b) * (b * g_xhat - g_xhat.sum(axis=0)
                                  - xhat * (g_xhat * xhat).sum(axis=0))
        else:
            gx = g_xhat * inv_std
        return gx, g_gamma, g_beta

    return _make(out, "batch_norm", (x, gamma, beta), grad_fn)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed stably from raw scores."""
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=z.dtype).reshape(-1)
    if z.shape != y.shape:
        raise DimensionError(f"logits {logits.shape} vs labels {y.shape}")
    # log(1 + e^-|z|) + max(z, 0) - z*y
    loss = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * y
    out = np.asarray(loss.mean())

    def grad_fn(g):
        p = _sigmoid_np(z)
        return ((g * (p - y) / z.size).reshape(logits.shape),)

    return _make(out, "bce_with_logits", (logits,), grad_fn)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ----------------------------------------------------------------------
# operator sugar

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: add(neg(self), other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.sum = tsum
Tensor.mean = tmean
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
Tensor.transpose = transpose


# ----------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic map from one tensor to a scalar.  The
    error per coordinate is |analytic - numeric| / max(1, |analytic|); a
    non-finite function value reports as +inf (failure).
    """
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    out = f(probe)
    if out.size != 1:
        raise DimensionError(f"grad_check target must be scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        return float("inf")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape), dtype=x.data.dtype)).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape), dtype=x.data.dtype)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    if not np.all(np.isfinite(numeric)):
        return float("inf")
    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max()) if err.size else 0.0
