"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 for verification, float32 for speed).
Every operation records a tape node eagerly; ``Tensor.backward`` replays
the tape in reverse topological order. Tensors produced by an op are
treated as immutable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "Linear",
    "Conv2d",
    "BatchNorm2d",
    "no_grad",
    "concat",
    "maximum",
    "minimum",
    "flatten_hw",
    "unflatten_hw",
    "upsample_nearest",
    "upsample_nearest_to",
    "adaptive_avg_pool2d",
    "global_avg_pool",
    "avg_pool2d",
    "max_pool2d",
    "channel_max",
    "channel_mean",
    "bilinear_resize",
    "linear_recurrence",
    "scan_seq",
    "scan_par",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make ndarray <op> Tensor defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- tape ----------------------------------------------------------

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Reverse-mode accumulation from a scalar loss.

        Gradients of leaf tensors (parameters, inputs) accumulate into
        ``.grad``; intermediate gradients are kept only while needed.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that is detached from the tape")
        if self.size != 1:
            raise RuntimeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic ----------------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return Tensor._node(self.data + other, (self,), lambda g: (g,))
        a, b = self, Tensor._coerce(other)
        out = a.data + b.data
        return Tensor._node(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return Tensor._node(self.data - other, (self,), lambda g: (g,))
        a, b = self, Tensor._coerce(other)
        return Tensor._node(
            a.data - b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Tensor._node(self.data * other, (self,), lambda g: (g * other,))
        a, b = self, Tensor._coerce(other)
        ad, bd = a.data, b.data
        return Tensor._node(
            ad * bd, (a, b),
            lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            inv = 1.0 / other
            return Tensor._node(self.data * inv, (self,), lambda g: (g * inv,))
        a, b = self, Tensor._coerce(other)
        ad, bd = a.data, b.data
        out = ad / bd
        return Tensor._node(
            out, (a, b),
            lambda g: (_unbroadcast(g / bd, a.shape),
                       _unbroadcast(-g * out / bd, b.shape)))

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, p: float):
        d = self.data
        return Tensor._node(d ** p, (self,), lambda g: (g * p * d ** (p - 1),))

    # -- elementwise functions ------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self):
        d = self.data
        return Tensor._node(np.log(d), (self,), lambda g: (g / d,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,))

    def sigmoid(self):
        d = self.data
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return Tensor._node(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self):
        s = self.sigmoid().data
        d = self.data
        return Tensor._node(d * s, (self,), lambda g: (g * s * (1.0 + d * (1.0 - s)),))

    def gelu(self):
        """Exact GELU: x * Phi(x) with the Gaussian CDF via erf."""
        d = self.data
        phi = 0.5 * (1.0 + _erf(d / _SQRT2))
        out = d * phi

        def back(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
            return (g * (phi + d * pdf),)

        return Tensor._node(out, (self,), back)

    def softplus(self):
        d = self.data
        out = np.logaddexp(0.0, d)

        def back(g):
            s = np.empty_like(d)
            pos = d >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
            e = np.exp(d[~pos])
            s[~pos] = e / (1.0 + e)
            return (g * s,)

        return Tensor._node(out, (self,), back)

    def relu(self):
        d = self.data
        mask = d > 0
        return Tensor._node(d * mask, (self,), lambda g: (g * mask,))

    def clamp(self, lo=None, hi=None):
        d = self.data
        out = np.clip(d, lo, hi)
        mask = np.ones_like(d)
        if lo is not None:
            mask *= d >= lo
        if hi is not None:
            mask *= d <= hi
        return Tensor._node(out, (self,), lambda g: (g * mask,))

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g
            if not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(a % len(shape) for a in ax)
                gg = np.expand_dims(g, ax)
            return (np.broadcast_to(gg, shape).copy(),)

        return Tensor._node(out, (self,), back)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) / n

    def max(self, axis: int, keepdims=False):
        """Max over one axis; gradient routes to the first argmax."""
        d = self.data
        idx = d.argmax(axis=axis)
        out = np.take_along_axis(d, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out = out.squeeze(axis)

        def back(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.zeros_like(d)
            np.put_along_axis(gx, np.expand_dims(idx, axis), gg, axis=axis)
            return (gx,)

        return Tensor._node(out, (self,), back)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._node(self.data.reshape(shape), (self,),
                            lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._node(self.data.transpose(axes), (self,),
                            lambda g: (g.transpose(inv),))

    def flip(self, axis: int):
        return Tensor._node(np.flip(self.data, axis).copy(), (self,),
                            lambda g: (np.flip(g, axis).copy(),))

    def pad(self, pad_width):
        """Zero padding; ``pad_width`` as for np.pad."""
        out = np.pad(self.data, pad_width)
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, self.shape))
        return Tensor._node(out, (self,), lambda g: (g[sl],))

    def __getitem__(self, key):
        d = self.data
        out = d[key]
        shape = d.shape

        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.add.at(gx, key, g)
            return (gx,)

        return Tensor._node(out.copy() if isinstance(out, np.ndarray) else out,
                            (self,), back)

    def __matmul__(self, other):
        """Matmul with a 2-D right operand: [..., K] @ [K, N]."""
        a, b = self, other
        ad, bd = a.data, b.data
        if bd.ndim != 2:
            raise ValueError("matmul: right operand must be 2-D")
        out = ad @ bd

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return (ga, gb)

        return Tensor._node(out, (a, b), back)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = list(tensors)
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref))
                                     if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(out, tensors, back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    ad, bd = a.data, b.data
    mask = ad >= bd
    return Tensor._node(
        np.where(mask, ad, bd), (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    mask = ad <= bd
    return Tensor._node(
        np.where(mask, ad, bd), (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


# -- image <-> token layout -------------------------------------------------

def flatten_hw(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N, H*W, C], row-major (row outer, column inner)."""
    n, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n, h * w, c)


def unflatten_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse of flatten_hw."""
    n, l, c = x.shape
    if l != h * w:
        raise ValueError(f"unflatten_hw: {l} tokens cannot form {h}x{w}")
    return x.reshape(n, h, w, c).transpose(0, 3, 1, 2)


# -- convolution -------------------------------------------------------------

def _conv_out_size(h, k, stride, padding, dilation):
    return (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be positive")
    n, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    if c % groups or co % groups:
        raise ValueError(f"conv2d: channels ({c} in, {co} out) not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"conv2d: weight expects {cg} channels/group, input supplies {c // groups}")
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: non-positive output size for input {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = xd.strides
    view = as_strided(xd, (n, c, kh, kw, oh, ow),
                      (s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride))
    cols = np.ascontiguousarray(view).reshape(n, groups, cg * kh * kw, oh * ow)
    w2 = weight.data.reshape(groups, co // groups, cg * kh * kw)
    out = np.matmul(w2[None], cols).reshape(n, co, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gg = g.reshape(n, groups, co // groups, oh * ow)
        gw = np.einsum("ngop,ngkp->gok", gg, cols).reshape(weight.shape)
        gcols = np.matmul(w2.transpose(0, 2, 1)[None], gg)
        gcols = gcols.reshape(n, c, kh, kw, oh, ow)
        hp, wp = h + 2 * padding, w + 2 * padding
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            hi = i * dilation
            for j in range(kw):
                wj = j * dilation
                gxp[:, :, hi:hi + oh * stride:stride,
                    wj:wj + ow * stride:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._node(out, parents, back)


# -- normalization ------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, *, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """BatchNorm over (N,H,W) per channel; updates running stats in train mode."""
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: parameter length mismatch for C={c}")
    xd = x.data
    if training:
        if n * h * w < 2:
            raise ValueError("batch_norm: train mode needs at least 2 samples per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n * h * w) / max(n * h * w - 1, 1)
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gi = gamma.data.reshape(1, c, 1, 1) * inv.reshape(1, c, 1, 1)
        if training:
            m = n * h * w
            gsum = g.sum(axis=(0, 2, 3), keepdims=True)
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = gi * (g - gsum / m - xhat * gxhat_sum / m)
        else:
            gx = gi * g
        return gx, ggamma, gbeta

    return Tensor._node(out, (x, gamma, beta), back)


# -- pooling / resampling ------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,1,1]."""
    return x.mean(axis=(2, 3), keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    return x.mean(axis=1, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    return x.max(axis=1, keepdims=True)


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    if kernel < 1:
        raise ValueError("avg_pool2d: kernel must be positive")
    stride = stride or kernel
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"avg_pool2d: kernel {kernel} larger than input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    xd = x.data
    s0, s1, s2, s3 = xd.strides
    win = as_strided(xd, (n, c, oh, ow, kernel, kernel),
                     (s0, s1, s2 * stride, s3 * stride, s2, s3))
    out = win.mean(axis=(4, 5))
    inv = 1.0 / (kernel * kernel)

    def back(g):
        gx = np.zeros_like(xd)
        gk = g * inv
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gk
        return (gx,)

    return Tensor._node(out, (x,), back)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"max_pool2d: kernel {kernel} larger than input {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    xd = x.data
    s0, s1, s2, s3 = xd.strides
    win = as_strided(xd, (n, c, oh, ow, kernel, kernel),
                     (s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(xd)
        ky, kx = np.divmod(arg, kernel)
        hy = np.arange(oh)[None, None, :, None] * stride + ky
        wx = np.arange(ow)[None, None, None, :] * stride + kx
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(nn, arg.shape), np.broadcast_to(cc, arg.shape),
                       hy, wx), g)
        return (gx,)

    return Tensor._node(out.copy(), (x,), back)


def adaptive_avg_pool2d(x: Tensor, grid: tuple[int, int]) -> Tensor:
    """Average-pool to a ``gh x gw`` grid with torch-style cell boundaries."""
    n, c, h, w = x.shape
    gh, gw = grid
    gh, gw = min(gh, h), min(gw, w)
    if gh < 1 or gw < 1:
        raise ValueError("adaptive_avg_pool2d: empty input")
    hb = [(i * h // gh, -(-(i + 1) * h // gh)) for i in range(gh)]
    wb = [(j * w // gw, -(-(j + 1) * w // gw)) for j in range(gw)]
    xd = x.data
    out = np.empty((n, c, gh, gw), dtype=xd.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = xd[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def back(g):
        gx = np.zeros_like(xd)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gx[:, :, h0:h1, w0:w1] += (g[:, :, i, j] /
                                           ((h1 - h0) * (w1 - w0)))[:, :, None, None]
        return (gx,)

    return Tensor._node(out, (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be a positive integer")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._node(out, (x,), back)


def upsample_nearest_to(x: Tensor, oh: int, ow: int) -> Tensor:
    """Nearest upsampling to an arbitrary target size (source cell = i*h//oh)."""
    n, c, h, w = x.shape
    ri = np.arange(oh) * h // oh
    ci = np.arange(ow) * w // ow
    out = x.data[:, :, ri][:, :, :, ci]

    def back(g):
        tmp = np.zeros((n, c, h, ow), dtype=g.dtype)
        np.add.at(tmp.transpose(2, 0, 1, 3), ri, g.transpose(2, 0, 1, 3))
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx.transpose(3, 0, 1, 2), ci, tmp.transpose(3, 0, 1, 2))
        return (gx,)

    return Tensor._node(out.copy(), (x,), back)


def bilinear_resize(x: Tensor, oh: int, ow: int) -> Tensor:
    """Bilinear resize (half-pixel centers), used for position-embedding rescale."""
    n, c, h, w = x.shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(x.dtype)
    wx = (xs - x0).astype(x.dtype)

    xd = x.data
    top = xd[:, :, y0][:, :, :, x0] * (1 - wx) + xd[:, :, y0][:, :, :, x1] * wx
    bot = xd[:, :, y1][:, :, :, x0] * (1 - wx) + xd[:, :, y1][:, :, :, x1] * wx
    out = top * (1 - wy)[None, None, :, None] + bot * wy[None, None, :, None]

    def back(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        gt = g.transpose(2, 3, 0, 1)  # [oh, ow, n, c]
        for yi, wyi in ((y0, 1 - wy), (y1, wy)):
            for xi, wxi in ((x0, 1 - wx), (x1, wx)):
                idx = (yi[:, None] * w + xi[None, :]).ravel()
                contrib = (gt * (wyi[:, None] * wxi[None, :])[:, :, None, None])
                np.add.at(gx.transpose(2, 0, 1), idx,
                          contrib.reshape(oh * ow, n, c))
        return (gx.reshape(n, c, h, w),)

    return Tensor._node(out, (x,), back)


# -- linear recurrence (selective-scan core) ----------------------------------

def scan_seq(abar: np.ndarray, bu: np.ndarray) -> np.ndarray:
    """h_t = abar_t * h_{t-1} + bu_t along axis 1, h_0 = 0. Raw-array kernel."""
    h = np.empty_like(bu)
    acc = np.zeros(bu.shape[:1] + bu.shape[2:], dtype=bu.dtype)
    for t in range(bu.shape[1]):
        acc = abar[:, t] * acc + bu[:, t]
        h[:, t] = acc
    return h


def scan_par(abar: np.ndarray, bu: np.ndarray, threads: int = 1) -> np.ndarray:
    """Work-efficient inclusive scan via the associative combiner
    (a2,b2)∘(a1,b1) = (a2*a1, a2*b1 + b2), vectorized over the sequence axis."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        n = abar.shape[0]
        if n >= threads:
            chunks = np.array_split(np.arange(n), threads)
            out = np.empty_like(bu)
            with ThreadPoolExecutor(threads) as ex:
                futs = [ex.submit(scan_par, abar[ix], bu[ix]) for ix in chunks]
                for ix, f in zip(chunks, futs):
                    out[ix] = f.result()
            return out
    a = abar.copy()
    b = bu.copy()
    l = a.shape[1]
    stride = 1
    while stride < l:
        a_lo = a[:, :-stride]
        b_lo = b[:, :-stride]
        a_hi = a[:, stride:]
        b[:, stride:] = b[:, stride:] + a_hi * b_lo
        a[:, stride:] = a_hi * a_lo
        stride *= 2
    return b


def linear_recurrence(abar: Tensor, bu: Tensor, *, parallel: bool = False,
                      threads: int = 1) -> Tensor:
    """Differentiable h_t = abar_t ⊙ h_{t-1} + bu_t along axis 1."""
    if abar.shape != bu.shape:
        raise ValueError(f"linear_recurrence: shape mismatch {abar.shape} vs {bu.shape}")
    ad, bd = abar.data, bu.data
    h = scan_par(ad, bd, threads) if parallel else scan_seq(ad, bd)

    def back(g):
        l = g.shape[1]
        q = np.empty_like(g)
        acc = g[:, l - 1].copy()
        q[:, l - 1] = acc
        for t in range(l - 2, -1, -1):
            acc = g[:, t] + ad[:, t + 1] * acc
            q[:, t] = acc
        ga = np.empty_like(q)
        ga[:, 0] = 0.0
        ga[:, 1:] = q[:, 1:] * h[:, :-1]
        return ga, q

    return Tensor._node(h, (abar, bu), back)


# -- parameters and modules ----------------------------------------------------

class Parameter(Tensor):
    """A named, trainable tensor reachable from a model's registry."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = ""
        self.trainable = trainable


class Module:
    """Minimal parameter container with hierarchical naming."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __getattr__(self, name):
        bufs = self.__dict__.get("_buffers")
        if bufs is not None and name in bufs:
            return bufs[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, arr: np.ndarray):
        self._buffers[name] = arr

    def _children(self):
        for key, val in self.__dict__.items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self.__dict__.items():
            if isinstance(val, Parameter):
                name = f"{prefix}{key}"
                val.name = name
                yield name, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in self._buffers.items():
            yield f"{prefix}{key}", val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            d[name] = buf
        return d

    def load_state_dict(self, d: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for name, arr in d.items():
            if name in own:
                if own[name].shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}: "
                                     f"{own[name].shape} vs {arr.shape}")
                own[name].data = np.asarray(arr, dtype=own[name].dtype)
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown entry in state dict: {name}")

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k in list(m._buffers):
                m._buffers[k] = m._buffers[k].astype(dtype)
        return self


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None, zero_init: bool = False,
                 dtype=np.float64):
        super().__init__()
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        shape = (out_channels, in_channels // groups, kernel, kernel)
        fan_in = (in_channels // groups) * kernel * kernel
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Conv2d needs an rng unless zero_init=True")
            w = kaiming_uniform(rng, shape, fan_in, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, dilation=self.dilation, groups=self.groups)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None, zero_init: bool = False,
                 dtype=np.float64):
        super().__init__()
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            if rng is None:
                raise ValueError("Linear needs an rng unless zero_init=True")
            w = kaiming_uniform(rng, (in_features, out_features), in_features, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                          self._buffers["running_var"], training=self.training,
                          momentum=self.momentum, eps=self.eps)
