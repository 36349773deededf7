"""Dense float tensors with a reverse-mode automatic differentiation engine.

Image tensors follow the NCHW layout. All arithmetic runs in float32 by
default; wrap code in ``dtype_scope(np.float64)`` when doing finite-difference
gradient checks. Tensors created by an operation record their parents and a
backward closure, forming an implicit graph that ``Tensor.backward`` walks in
reverse topological order exactly once, accumulating gradients additively.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


class ConfigError(ValueError):
    """Raised for invalid shapes or layer configuration, naming the offender."""


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype (float64 for gradient checking)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph.

    ``data`` is treated as immutable once the tensor participates in a graph;
    optimizers overwrite parameter storage only between steps, after the step's
    graph has been consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"

    # -- arithmetic sugar (same-shape or python scalar; no general broadcasting)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result; records the graph edge only when a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    else:
        out._parents = ()
        out._backward_fn = None
        out._op = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, filling ``grad`` on every tensor
    (leaf or intermediate) that requires grad. Gradients accumulate into any
    pre-existing ``grad`` buffers."""
    if loss.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative post-order DFS; visit-once is asserted via the seen set.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited: set[int] = set()
    for node in reversed(topo):
        assert id(node) not in visited, "cycle in autodiff graph"
        visited.add(id(node))
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a, b) -> Tensor:
    """Elementwise sum; one operand may be a python scalar."""
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        data = a.data + a.data.dtype.type(b)
        return _make(data, (a,), lambda g: (g,), "add_scalar")
    a = _as_tensor(a)
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a python scalar."""
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        s = a.data.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    a = _as_tensor(a)
    if a.shape != b.shape:
        raise ConfigError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data), "mul")


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    data = np.asarray(x.data.sum(dtype=x.data.dtype))
    return _make(data, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ConfigError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; all other extents must match."""
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            i != axis and t.shape[i] != base[i] for i in range(len(base))
        ):
            raise ConfigError(f"concat shape mismatch on axis {axis}: {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward_fn, "concat")


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ConfigError(f"take_rows index out of range for {x.shape[0]} rows")

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx].copy(), (x,), backward_fn, "take_rows")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,),
                 lambda g: (g * mask,), "relu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows along ``axis`` sum to 1."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), backward_fn, "softmax")


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise smooth L1: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise."""
    if pred.shape != target.shape:
        raise ConfigError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    absd = np.abs(d)
    quad = absd < 1.0
    out = np.where(quad, 0.5 * d * d, absd - 0.5).astype(pred.data.dtype)

    def backward_fn(g):
        dd = np.where(quad, d, np.sign(d)) * g
        return (dd, -dd)

    return _make(out, (pred, target), backward_fn, "smooth_l1")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-row cross entropy -log softmax(logits)[label], log-sum-exp stable.

    logits: [M, K]; labels: int array [M] with values in [0, K).
    """
    if logits.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy expects [M,K] logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    m, k = logits.shape
    if y.shape != (m,):
        raise ConfigError(f"labels shape {y.shape} does not match {m} rows")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ConfigError(f"label out of range [0,{k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = (lse - z[np.arange(m), y]).astype(z.dtype)

    def backward_fn(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(m), y] -= 1.0
        return (p * g[:, None],)

    return _make(loss, (logits,), backward_fn, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# convolution / pooling / normalization


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view [N, C, ho, wo, kh, kw] over a padded input (no copy)."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    x: [N, C, H, W]; weight: [F, C/groups, kh, kw]; bias: [F] or None.
    Output group g depends only on input channels of group g.
    """
    n, c, h, w = x.shape
    f, cg, kh, kw = weight.shape
    if c % groups or f % groups:
        raise ConfigError(f"channels not divisible by groups: C={c}, F={f}, groups={groups}")
    if cg != c // groups:
        raise ConfigError(f"kernel expects {cg} channels/group but input gives {c // groups}")
    # floor division: a trailing partial window is discarded, as is standard
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(
            f"conv output empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (f,):
        raise ConfigError(f"bias shape {bias.shape} does not match {f} filters")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = _conv_windows(xp, kh, kw, stride, ho, wo)
    fg = f // groups
    out = np.empty((n, f, ho, wo), dtype=x.data.dtype)
    for g in range(groups):
        # [N, ho, wo, F/g] <- [N, C/g, ho, wo, kh, kw] x [F/g, C/g, kh, kw]
        og = np.tensordot(windows[:, g * cg:(g + 1) * cg], weight.data[g * fg:(g + 1) * fg],
                          axes=([1, 4, 5], [1, 2, 3]))
        out[:, g * fg:(g + 1) * fg] = og.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(gout):
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        dw = np.empty_like(weight.data)
        wins = _conv_windows(xp, kh, kw, stride, ho, wo)
        for g in range(groups):
            go = gout[:, g * fg:(g + 1) * fg]
            dw[g * fg:(g + 1) * fg] = np.tensordot(
                go, wins[:, g * cg:(g + 1) * cg], axes=([0, 2, 3], [0, 2, 3]))
            # [N, ho, wo, C/g, kh, kw] <- [N, F/g, ho, wo] x [F/g, C/g, kh, kw]
            dcols = np.tensordot(go, weight.data[g * fg:(g + 1) * fg], axes=([1], [0]))
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)  # [N, C/g, ho, wo, kh, kw]
            for i in range(kh):
                for j in range(kw):
                    dxp[:, g * cg:(g + 1) * cg,
                        i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return (dx, dw)
        return (dx, dw, gout.sum(axis=(0, 2, 3)))

    return _make(out, parents, backward_fn, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None,
               padding: int = 0, ceil_mode: bool = False) -> Tensor:
    """Max pooling over kernel x kernel windows; ties go to the first element
    in row-major scan order. Padding (and any ceil-mode overhang) is -inf so
    it never wins a window."""
    stride = stride or kernel
    n, c, h, w = x.shape
    if padding < 0 or padding >= kernel:
        raise ConfigError(f"pool padding {padding} invalid for kernel {kernel}")
    he, we = h + 2 * padding, w + 2 * padding
    if ceil_mode:
        ho = -(-(he - kernel) // stride) + 1
        wo = -(-(we - kernel) // stride) + 1
    else:
        ho = (he - kernel) // stride + 1
        wo = (we - kernel) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"pool output empty: input {h}x{w}, kernel {kernel}, stride {stride}")
    hp = max((ho - 1) * stride + kernel, he)
    wp = max((wo - 1) * stride + kernel, we)
    if hp > h or wp > w:
        xp = np.full((n, c, hp, wp), -np.inf, dtype=x.data.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    windows = _conv_windows(xp, kernel, kernel, stride, ho, wo)
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dxp = np.zeros((n * c * hp * wp,), dtype=x.data.dtype)
        oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        src_h = oh[None, None] * stride + arg // kernel
        src_w = ow[None, None] * stride + arg % kernel
        base = (np.arange(n * c) * (hp * wp)).reshape(n, c, 1, 1)
        np.add.at(dxp, (base + src_h * wp + src_w).ravel(), g.ravel())
        dxp = dxp.reshape(n, c, hp, wp)
        return (np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w]),)

    return _make(np.ascontiguousarray(out), (x,), backward_fn, "max_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over [N, C, H, W].

    Training mode normalizes by batch statistics (biased variance, used
    consistently for the running buffers too) and updates the running stats
    in place with the given momentum. Inference mode uses the running stats.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if training:
        count = n * h * w
        if count < 2:
            raise ConfigError(f"batch_norm needs >=2 elements per channel in training, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * invstd)[None, :, None, None]
        if training:
            m = g.mean(axis=(0, 2, 3))[None, :, None, None]
            mx = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            dx = scale * (g - m - xhat * mx)
        else:
            dx = scale * g
        return (dx.astype(x.data.dtype), dgamma, dbeta)

    return _make(out.astype(x.data.dtype), (x, gamma, beta), backward_fn, "batch_norm")


# ---------------------------------------------------------------------------
# initialization


def xavier_init(shape, rng: np.random.Generator, requires_grad: bool = True) -> Tensor:
    """Uniform Glorot initialization on +/- sqrt(6 / (fan_in + fan_out)).

    For conv kernels [F, C, kh, kw] the fans include the receptive field:
    fan_in = C*kh*kw, fan_out = F*kh*kw.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ConfigError(f"xavier_init needs >=2 dims, got {shape}")
    receptive = math.prod(shape[2:]) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    if fan_in + fan_out == 0:
        raise ConfigError(f"zero fan for shape {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=requires_grad)
