"""Define-by-run reverse-mode differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor` that records its parents and a closure
mapping the output gradient to one gradient per parent.  A tape is rebuilt on
every forward pass; :func:`backward` walks it in reverse topological order.

Only the broadcasting needed by the model is supported: a bias vector added
to each column of a matrix (:func:`add_bias`).  Everything else requires
matching shapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "constant",
    "backward",
    "no_grad",
    "finite_difference_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "affine",
    "add_bias",
    "apply_unary",
    "sigmoid",
    "tanh",
    "log",
    "neg",
    "square",
    "clamp",
    "floor",
    "concat",
    "reshape",
    "transpose",
    "take",
    "total",
    "bernoulli_kl",
    "gaussian_nll",
    "conv1d",
    "conv1d_transposed",
    "conv_output_length",
    "conv_transposed_output_length",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node of the computation record: a value, its parents and a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return affine(self, float(other), 0.0)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def tensor(data, dtype=None, requires_grad=False) -> Tensor:
    """Wrap ``data`` as a leaf. Non-finite values are rejected here."""
    arr = _as_array(data, dtype)
    _check_finite(arr, "tensor input")
    return Tensor(arr, requires_grad=requires_grad)


def parameter(data, dtype=None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    """A leaf that never receives gradient (also used to detach values)."""
    if isinstance(data, Tensor):
        return Tensor(data.data)
    return tensor(data, dtype=dtype)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full_like(like.data, value))


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Forward-only evaluation: ops record no parents inside this block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _result(data: np.ndarray, parents: tuple, backward_fn: BackwardFn, op: str) -> Tensor:
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, False, (), None, op)


def _shape_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``loss``.

    Returns a map from each leaf that requires gradient to d(loss)/d(leaf).
    Gradients from several uses of the same node are summed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        node.grad = None  # intermediate gradients are not kept
    return leaves


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    oracle_dtype=np.longdouble,
) -> float:
    """Compare :func:`backward` against central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar.  Returns ``max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`` over the
    checked coordinates (all of them unless ``coords`` limits each parameter to
    a random subset).  NaN anywhere yields ``inf``.

    The analytic gradient is computed at the parameters' own precision.  The
    difference quotients are evaluated with parameters cast to ``oracle_dtype``
    (extended precision by default): at float64 the quotient's rounding noise,
    about ``ulp(f) / eps``, swamps coordinates whose gradient is below ~1e-8.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    grads = backward(f())
    originals = [p.data for p in params]
    picks = []
    for p in params:
        index = np.arange(p.size)
        if coords is not None and coords < p.size:
            index = (rng or np.random.default_rng(0)).choice(p.size, size=coords, replace=False)
        picks.append(index)
    worst = 0.0
    try:
        if oracle_dtype is not None:
            for p in params:
                p.data = p.data.astype(oracle_dtype)
        for p, orig_data, index in zip(params, originals, picks):
            g_ad = grads.get(p)
            g_flat = np.zeros(p.size) if g_ad is None else np.asarray(g_ad, dtype=np.float64).reshape(-1)
            flat = p.data.reshape(-1)
            for i in index:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().data
                flat[i] = orig - eps
                down = f().data
                flat[i] = orig
                g_fd = float(((up - down) / (2 * eps)).reshape(-1)[0])
                err = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
                if math.isnan(err):
                    return math.inf
                worst = max(worst, err)
    finally:
        for p, orig_data in zip(params, originals):
            p.data = orig_data
    return worst


# ---------------------------------------------------------------------------
# Dense algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with constant scale and shift."""
    return _result(x.data * scale + shift, (x,), lambda g: (g * scale,), "affine")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` to ``x``: a vector, each column of a matrix, or each
    column of every matrix in a ``[B, n, cols]`` stack."""
    nd = x.data.ndim
    if b.data.ndim != 1 or nd > 3 or x.shape[-2 if nd > 1 else 0] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    if nd == 1:
        return _result(x.data + b.data, (x, b), lambda g: (g, g), "add_bias")
    if nd == 2:
        return _result(x.data + b.data[:, None], (x, b), lambda g: (g, g.sum(axis=1)), "add_bias")
    return _result(x.data + b.data[:, None], (x, b), lambda g: (g, g.sum(axis=(0, 2))), "add_bias")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def apply_unary(x: Tensor, name: str) -> Tensor:
    v = x.data
    if name == "sigmoid":
        y = _sigmoid(v)
        return _result(y, (x,), lambda g: (g * y * (1.0 - y),), name)
    if name == "tanh":
        y = np.tanh(v)
        return _result(y, (x,), lambda g: (g * (1.0 - y * y),), name)
    if name == "log":
        if np.any(v <= 0):
            raise DomainError(f"log of non-positive value (min {v.min()!r})")
        return _result(np.log(v), (x,), lambda g: (g / v,), name)
    if name == "neg":
        return _result(-v, (x,), lambda g: (-g,), name)
    if name == "square":
        return _result(v * v, (x,), lambda g: (2.0 * g * v,), name)
    raise ValueError(f"unknown unary function {name!r}")


def sigmoid(x: Tensor) -> Tensor:
    return apply_unary(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return apply_unary(x, "tanh")


def log(x: Tensor) -> Tensor:
    return apply_unary(x, "log")


def neg(x: Tensor) -> Tensor:
    return apply_unary(x, "neg")


def square(x: Tensor) -> Tensor:
    return apply_unary(x, "square")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the clip is active."""
    v = x.data
    inside = (v > lo) & (v < hi)
    return _result(np.clip(v, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def floor(x: Tensor, minimum: float) -> Tensor:
    """``max(x, minimum)`` elementwise."""
    v = x.data
    above = v > minimum
    return _result(np.maximum(v, minimum), (x,), lambda g: (g * above,), "floor")


def bernoulli_kl(q: Tensor, p: Tensor) -> Tensor:
    """Elementwise KL(Bern(q) || Bern(p)); inputs must lie strictly in (0, 1)."""
    _shape_check(q, p, "bernoulli_kl")
    Q, P = q.data, p.data
    if np.any((Q <= 0) | (Q >= 1) | (P <= 0) | (P >= 1)):
        raise DomainError("bernoulli_kl: probabilities must lie strictly inside (0, 1)")
    val = Q * np.log(Q / P) + (1.0 - Q) * np.log((1.0 - Q) / (1.0 - P))

    def back(g):
        dq = np.log(Q / P) - np.log((1.0 - Q) / (1.0 - P))
        dp = -Q / P + (1.0 - Q) / (1.0 - P)
        return g * dq, g * dp

    return _result(val, (q, p), back, "bernoulli_kl")


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_nll(x: Tensor, mean: Tensor, var: Tensor) -> Tensor:
    """Elementwise negative log density of N(mean, var) at x."""
    _shape_check(x, mean, "gaussian_nll")
    _shape_check(x, var, "gaussian_nll")
    X, M, V = x.data, mean.data, var.data
    if np.any(V <= 0):
        raise DomainError("gaussian_nll: variance must be positive")
    r = X - M
    val = _HALF_LOG_2PI + 0.5 * np.log(V) + r * r / (2.0 * V)

    def back(g):
        dx = g * r / V
        return dx, -dx, g * (0.5 / V - r * r / (2.0 * V * V))

    return _result(val, (x, mean, var), back, "gaussian_nll")


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [p.data for p in parts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[a.shape for a in arrays]}: {exc}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _result(out, tuple(parts), back, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {shape}: {exc}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    src_shape, dtype = x.shape, x.data.dtype
    out = x.data[index]

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (x,), back, "take")


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),), "sum")


# ---------------------------------------------------------------------------
# Convolutions (single signal [C, L] or batch [B, C, L])
# ---------------------------------------------------------------------------


def _pair(pad) -> tuple[int, int]:
    if isinstance(pad, (tuple, list)):
        left, right = int(pad[0]), int(pad[1])
    else:
        left = right = int(pad)
    if left < 0 or right < 0:
        raise ConfigError(f"padding must be non-negative, got {pad!r}")
    return left, right


def conv_output_length(length: int, kernel: int, stride: int, pad) -> int:
    left, right = _pair(pad)
    span = length + left + right - kernel
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv1d: padded length {length + left + right} with kernel {kernel} "
            f"is not compatible with stride {stride}; trim or pad the input"
        )
    return span // stride + 1


def conv_transposed_output_length(length: int, kernel: int, stride: int, crop) -> int:
    left, right = _pair(crop)
    out = (length - 1) * stride + kernel - left - right
    if length < 1 or out < 1:
        raise ConfigError(f"conv1d_transposed: crop {crop!r} leaves no output for length {length}")
    return out


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, pad=0) -> Tensor:
    """Strided cross-correlation with explicit zero padding.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``kernels`` is ``[C_out, C_in, K]``.
    ``pad`` is an int (both sides) or a ``(left, right)`` pair.
    """
    W = kernels.data
    if W.ndim != 3 or x.data.ndim not in (2, 3) or x.shape[-2] != W.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernels {W.shape}")
    K = W.shape[2]
    left, right = _pair(pad)
    L = x.shape[-1]
    L_out = conv_output_length(L, K, stride, (left, right))
    lead = [(0, 0)] * (x.data.ndim - 1)
    xp = np.pad(x.data, lead + [(left, right)])
    win = sliding_window_view(xp, K, axis=-1)[..., ::stride, :]  # [..., C_in, L_out, K]
    out = np.einsum("...clk,ock->...ol", win, W, optimize=True)

    def back(g):
        if g.ndim == 3:
            dW = np.einsum("bol,bclk->ock", g, win, optimize=True)
        else:
            dW = np.einsum("ol,clk->ock", g, win, optimize=True)
        dwin = np.einsum("...ol,ock->...clk", g, W, optimize=True)
        dxp = np.zeros_like(xp)
        hi = stride * (L_out - 1) + 1
        for k in range(K):
            dxp[..., k : k + hi : stride] += dwin[..., k]
        return dxp[..., left : left + L], dW

    return _result(out, (x, kernels), back, "conv1d")


def conv1d_transposed(x: Tensor, kernels: Tensor, stride: int = 1, crop=0) -> Tensor:
    """Adjoint of :func:`conv1d`: stamps each input sample's kernel at ``stride`` spacing.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``kernels`` is ``[C_in, C_out, K]``
    (the same array layout as the matching ``conv1d`` kernels).
    """
    W = kernels.data
    if W.ndim != 3 or x.data.ndim not in (2, 3) or x.shape[-2] != W.shape[0]:
        raise ShapeError(f"conv1d_transposed: input {x.shape} incompatible with kernels {W.shape}")
    K = W.shape[2]
    left, right = _pair(crop)
    L = x.shape[-1]
    L_out = conv_transposed_output_length(L, K, stride, (left, right))
    full_len = (L - 1) * stride + K
    X = x.data
    contrib = np.einsum("...cl,cok->...olk", X, W, optimize=True)
    full = np.zeros(contrib.shape[:-2] + (full_len,), dtype=contrib.dtype)
    hi = stride * (L - 1) + 1
    for k in range(K):
        full[..., k : k + hi : stride] += contrib[..., k]
    out = full[..., left : left + L_out]

    def back(g):
        lead = [(0, 0)] * (g.ndim - 1)
        gf = np.pad(g, lead + [(left, right)])
        gw = sliding_window_view(gf, K, axis=-1)[..., ::stride, :]  # [..., C_out, L, K]
        dx = np.einsum("...olk,cok->...cl", gw, W, optimize=True)
        if g.ndim == 3:
            dW = np.einsum("bcl,bolk->cok", X, gw, optimize=True)
        else:
            dW = np.einsum("cl,olk->cok", X, gw, optimize=True)
        return dx, dW

    return _result(np.array(out, copy=True), (x, kernels), back, "conv1d_transposed")
