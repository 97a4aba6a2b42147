"""Reverse-mode automatic differentiation over dense 4-D tensors.

The engine is deliberately small: a ``Tensor`` wraps a numpy array plus an
optional gradient function, and each operation below builds the output value
eagerly while registering a closure that maps the upstream gradient to
per-input gradient contributions.  ``Tensor.backward`` walks the graph in
reverse topological order with an episode-local gradient table, so calling it
twice accumulates two full passes instead of corrupting intermediate state.

Layout convention is NCHW (batch, channel, height, width) for every spatial
operation.  Scalars produced by reductions keep rank 4 with shape
``(1, 1, 1, 1)``.

Precision is a process-global mode: float32 for normal runtime, float64 for
gradient checking.  Operations inherit the dtype of their operands; the mode
only governs where arrays enter the system (creation helpers, parameters).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

# scalar gradients produced by closures: list of (input tensor, gradient array)
GradPairs = Sequence[tuple["Tensor", np.ndarray]]

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32

# central-difference step used by finite_diff_grad unless overridden
DEFAULT_FD_EPS = 1e-5


def set_default_dtype(name: str) -> None:
    """Set the global precision mode: "float32" or "float64"."""
    global _default_dtype
    if name == "float32":
        _default_dtype = np.float32
    elif name == "float64":
        _default_dtype = np.float64
    else:
        raise ValueError(f"unknown dtype mode: {name!r}")


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision mode."""
    global _default_dtype
    saved = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = saved


class Tensor:
    """A dense array with an optional backward closure.

    ``grad`` is None until a backward pass deposits into it; repeated passes
    accumulate.  Tensors are values: no operation mutates an input's data.
    Leaf tensors created with ``requires_grad=True`` (parameters) are the
    intended gradient sinks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_grad_fn", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._grad_fn: Callable[[np.ndarray], GradPairs] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def grad_value(self) -> np.ndarray:
        """Accumulated gradient, reading as zeros when no pass reached this tensor."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` over the whole graph.

        Requires a single-element tensor.  Gradients of this episode are
        staged in a local table and deposited once per node, so earlier
        ``grad`` contents are added to, never overwritten.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a single-element loss tensor")
        order = _topo_order(self)
        table: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = table.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            for parent, contrib in node._grad_fn(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in table:
                    table[key] = table[key] + contrib
                else:
                    table[key] = contrib

    # Convenience arithmetic; full-shape tensor-tensor or python-scalar only.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _build(data: np.ndarray, parents: Iterable[Tensor], grad_fn: Callable[[np.ndarray], GradPairs]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor in the current precision mode."""
    arr = np.asarray(data, dtype=_default_dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _build(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _build(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _build(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data

    def grad_fn(g: np.ndarray) -> GradPairs:
        return ((a, g / b.data), (b, -g * a.data / (b.data * b.data)))

    return _build(out, (a, b), grad_fn)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _build(a.data + c, (a,), lambda g: ((a, g),))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _build(a.data * c, (a,), lambda g: ((a, g * c),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def grad_fn(g: np.ndarray) -> GradPairs:
        return ((a, g * take_a), (b, g * ~take_a))

    return _build(np.maximum(a.data, b.data), (a, b), grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _build(a.data * mask, (a,), lambda g: ((a, g * mask),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable two-branch form; both branches bounded
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return _build(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) computed in overflow-safe form; gradient is sigmoid(x)."""
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def grad_fn(g: np.ndarray) -> GradPairs:
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return ((a, g * s.astype(x.dtype)),)

    return _build(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# structure


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; other dims must agree."""
    if not parts:
        raise ValueError("concat_channels: empty input list")
    base = parts[0].data.shape
    for p in parts:
        if p.data.ndim != 4:
            raise ValueError("concat_channels: tensors must be 4-D")
        if p.data.shape[0] != base[0] or p.data.shape[2:] != base[2:]:
            raise ValueError(f"concat_channels: incompatible shape {p.data.shape} vs {base}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g: np.ndarray) -> GradPairs:
        return tuple((p, g[:, offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))

    return _build(out, parts, grad_fn)


def sum_all(a: Tensor) -> Tensor:
    """Sum every element; result keeps rank 4 with shape (1, 1, 1, 1)."""
    out = a.data.sum(dtype=a.data.dtype).reshape(1, 1, 1, 1)

    def grad_fn(g: np.ndarray) -> GradPairs:
        return ((a, np.broadcast_to(g.reshape(()), a.data.shape).astype(a.data.dtype)),)

    return _build(out, (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    return mul_scalar(sum_all(a), 1.0 / a.data.size)


def sum_per_image(a: Tensor) -> Tensor:
    """Reduce (N, C, H, W) over channel and space to (N, 1, 1, 1)."""
    if a.data.ndim != 4:
        raise ValueError("sum_per_image: tensor must be 4-D")
    out = a.data.sum(axis=(1, 2, 3), keepdims=True)

    def grad_fn(g: np.ndarray) -> GradPairs:
        return ((a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype)),)

    return _build(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# convolution and normalisation


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``w`` has shape (out_c, in_c, kh, kw); ``b``, when given, broadcasts from
    (1, out_c, 1, 1).  Output spatial size follows the usual floor rule for
    the effective kernel span (kh - 1) * dilation + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: input and weight must be 4-D")
    n, in_c, h, wd = x.data.shape
    out_c, w_in_c, kh, kw = w.data.shape
    if w_in_c != in_c:
        raise ValueError(f"conv2d: weight expects {w_in_c} input channels, input has {in_c}")
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    oh = (h + 2 * padding - eff_h) // stride + 1
    ow = (wd + 2 * padding - eff_w) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d: kernel span {eff_h}x{eff_w} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)

    # im2col: patch matrix (N, C*kh*kw, OH*OW) gathered through a strided view
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, in_c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride))
    cols = view.reshape(n, in_c * kh * kw, oh * ow)
    wmat = w.data.reshape(out_c, in_c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, out_c, oh, ow)
    if b is not None:
        if b.data.shape != (1, out_c, 1, 1):
            raise ValueError(f"conv2d: bias shape {b.data.shape} != (1, {out_c}, 1, 1)")
        out += b.data

    def grad_fn(g: np.ndarray) -> GradPairs:
        gmat = g.reshape(n, out_c, oh * ow)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(wmat.T, gmat).reshape(n, in_c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                r0 = i * dilation
                c0 = j * dilation
                gxp[:, :, r0:r0 + (oh - 1) * stride + 1:stride,
                    c0:c0 + (ow - 1) * stride + 1:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        pairs = [(x, gx), (w, gw)]
        if b is not None:
            pairs.append((b, g.sum(axis=(0, 2, 3)).reshape(1, out_c, 1, 1)))
        return pairs

    parents = (x, w) if b is None else (x, w, b)
    return _build(out, parents, grad_fn)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-batch normalisation over (N, H, W) for each channel.

    Always uses the statistics of the current batch (population variance);
    there is no running-average mode.  Requires at least 2 values per channel.
    gamma and beta broadcast from (1, C, 1, 1).
    """
    if x.data.ndim != 4:
        raise ValueError("batchnorm: input must be 4-D")
    n, c, h, wd = x.data.shape
    m = n * h * wd
    if m < 2:
        raise ValueError(f"batchnorm: needs at least 2 values per channel, got {m}")
    if gamma.data.shape != (1, c, 1, 1) or beta.data.shape != (1, c, 1, 1):
        raise ValueError("batchnorm: gamma/beta must have shape (1, C, 1, 1)")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def grad_fn(g: np.ndarray) -> GradPairs:
        dxhat = g * gamma.data
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        ggamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        return ((x, gx.astype(x.data.dtype)), (gamma, ggamma), (beta, gbeta))

    return _build(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear sampling matrix, half-pixel-centre convention.

    Row j holds the two tap weights for output sample j; clamped taps at the
    borders collapse onto the edge sample, so rows always sum to 1.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), (1.0 - frac).astype(dtype))
    np.add.at(m, (rows, hi), frac.astype(dtype))
    return m


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a plain array whose last two axes are spatial."""
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    my = _interp_matrix(h, out_h, np.float64)
    mx = _interp_matrix(w, out_w, np.float64)
    out = np.einsum("oh,...hw->...ow", my, arr.astype(np.float64))
    out = np.einsum("pw,...ow->...op", mx, out)
    return out.astype(arr.dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize to (out_h, out_w), half-pixel centres."""
    if x.data.ndim != 4:
        raise ValueError("upsample_bilinear: input must be 4-D")
    h, w = x.data.shape[2], x.data.shape[3]
    my = _interp_matrix(h, out_h, x.data.dtype)
    mx = _interp_matrix(w, out_w, x.data.dtype)
    t = np.einsum("oh,nchw->ncow", my, x.data)
    out = np.einsum("pw,ncow->ncop", mx, t)

    def grad_fn(g: np.ndarray) -> GradPairs:
        # exact transpose of the sampling operator
        t2 = np.einsum("pw,ncop->ncow", mx, g)
        gx = np.einsum("oh,ncow->nchw", my, t2)
        return ((x, gx),)

    return _build(out, (x,), grad_fn)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return upsample_bilinear(x, 2 * x.data.shape[2], 2 * x.data.shape[3])


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g: np.ndarray) -> GradPairs:
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return ((x, gx.astype(x.data.dtype)),)

    return _build(out, (x,), grad_fn)


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient goes to the first maximum in
    row-major order within each window."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x: spatial dims must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g: np.ndarray) -> GradPairs:
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return ((x, gx),)

    return _build(out, (x,), grad_fn)


def align_down_avg(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Shrink x to target spatial size by repeated 2x average pooling.

    The current size must reach the target by exact halving; anything else is
    a wiring error upstream.
    """
    out = x
    while out.data.shape[2:] != tuple(target_hw):
        h, w = out.data.shape[2], out.data.shape[3]
        th, tw = target_hw
        if h < th or w < tw or h % 2 or w % 2:
            raise ValueError(f"align_down_avg: cannot reach {target_hw} from {(h, w)} by halving")
        out = avgpool2x(out)
    return out


# ---------------------------------------------------------------------------
# numeric gradient oracle


def finite_diff_grad(f: Callable[[], float], tensors: Sequence[Tensor], eps: float = DEFAULT_FD_EPS) -> list[np.ndarray]:
    """Central-difference gradients of scalar-valued f w.r.t. each tensor.

    Perturbs entries in place and restores them, evaluating
    (f(x + eps) - f(x - eps)) / (2 eps) per entry.  Meant to run in float64
    mode; float32 resolution is too coarse for the default step.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = f()
            flat[i] = saved - eps
            down = f()
            flat[i] = saved
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def finite_diff_entry(f: Callable[[], float], t: Tensor, index: tuple[int, ...], eps: float = DEFAULT_FD_EPS) -> float:
    """Central difference for a single entry of one tensor."""
    saved = t.data[index]
    t.data[index] = saved + eps
    up = f()
    t.data[index] = saved - eps
    down = f()
    t.data[index] = saved
    return (up - down) / (2.0 * eps)
