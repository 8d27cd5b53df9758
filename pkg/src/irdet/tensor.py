"""Dense NCHW tensor kernels with reverse-mode autodiff.

Everything runs on float64 numpy arrays. Each op builds a node in a
dynamic graph; calling ``backward()`` on a scalar replays the tape in
reverse topological order. No views escape: every op materializes its
output, so forward results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad=False, _prev=(), name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = tuple(_prev)
        self.name = name

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        return reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _needs_grad(*ts):
    return any(t.requires_grad or t._backward is not None for t in ts)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, bwd):
    out = Tensor(data, _prev=[p for p in parents if _needs_grad(p)])
    if out._prev:
        out._backward = bwd
    return out


# -- elementwise --------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def bwd(g):
        if _needs_grad(a):
            a._accum(_unbroadcast(g, a.data.shape))
        if _needs_grad(b):
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def bwd(g):
        if _needs_grad(a):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if _needs_grad(b):
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e

    def bwd(g):
        if _needs_grad(a):
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if _needs_grad(b):
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        a._accum(g * s)

    return _node(a.data * s, (a,), bwd)


def relu(a):
    mask = a.data > 0

    def bwd(g):
        a._accum(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a):
    s = expit(a.data)
    # s*(1-s) via the paired logistic keeps the derivative nonzero even
    # where s itself rounds to exactly 0.0 or 1.0 in double precision
    ds = s * expit(-a.data)

    def bwd(g):
        a._accum(g * ds)

    return _node(s, (a,), bwd)


def silu(a):
    s = expit(a.data)
    y = a.data * s

    def bwd(g):
        a._accum(g * (s + y * (1.0 - s)))

    return _node(y, (a,), bwd)


def exp(a):
    y = np.exp(a.data)

    def bwd(g):
        a._accum(g * y)

    return _node(y, (a,), bwd)


def tanh(a):
    y = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - y * y))

    return _node(y, (a,), bwd)


def softsign(a):
    """x / (1 + |x|): bounded like tanh but with a polynomially decaying
    derivative, so the gradient never underflows to an exact zero."""
    d = 1.0 + np.abs(a.data)

    def bwd(g):
        a._accum(g / (d * d))

    return _node(a.data / d, (a,), bwd)


def softplus(a):
    y = np.logaddexp(0.0, a.data)
    s = expit(a.data)

    def bwd(g):
        a._accum(g * s)

    return _node(y, (a,), bwd)


def elementwise(x, kind, y=None, binop=None):
    """Unary activation or broadcasting binop, per kernel contract."""
    if kind is not None:
        fn = {"relu": relu, "silu": silu, "sigmoid": sigmoid}.get(kind)
        if fn is None:
            raise ValueError(f"unknown elementwise kind {kind!r}")
        x = fn(x)
    if binop is not None:
        if y is None:
            raise ValueError("binop requires a second operand")
        op = {"add": add, "mul": mul}.get(binop)
        if op is None:
            raise ValueError(f"unknown binop {binop!r}")
        x = op(x, y)
    return x


# -- reductions / reshaping --------------------------------------------


def sum_all(a):
    def bwd(g):
        a._accum(np.full_like(a.data, float(g)))

    return _node(a.data.sum(), (a,), bwd)


def reshape(a, shape):
    shape = tuple(shape)

    def bwd(g):
        a._accum(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bwd(g):
        if _needs_grad(a):
            a._accum(g @ b.data.T)
        if _needs_grad(b):
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bwd)


def concat(tensors, axis=1):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs_grad(t):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _node(data, tensors, bwd)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accum(buf)

    return _node(a.data[idx].copy(), (a,), bwd)


def take_last(a, perm):
    """Permute the last axis: out[..., t] = a[..., perm[t]]."""
    perm = np.asarray(perm)

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[..., perm] = g
        a._accum(buf)

    return _node(a.data[..., perm].copy(), (a,), bwd)


# -- convolution --------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Grouped 2-D convolution, NCHW; shift-and-add over kernel taps."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.data.shape
    cout, cin_g, kh, kw = weight.data.shape
    if cin != cin_g * groups:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape} incompatible with "
            f"weight {weight.data.shape} at groups={groups}"
        )
    if cout % groups != 0:
        raise ShapeError(f"conv2d: out channels {cout} not divisible by {groups}")
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {weight.data.shape} does not fit input "
            f"{x.data.shape} with padding={padding}"
        )
    cout_g = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xv = xp.reshape(n, groups, cin_g, *xp.shape[2:])
    wv = weight.data.reshape(groups, cout_g, cin_g, kh, kw)

    taps = []
    for i in range(kh):
        for j in range(kw):
            hs = slice(i * dilation, i * dilation + stride * (oh - 1) + 1, stride)
            ws = slice(j * dilation, j * dilation + stride * (ow - 1) + 1, stride)
            taps.append((i, j, hs, ws))

    depthwise = cin_g == 1 and cout_g == 1
    if groups == 1:
        # one GEMM per kernel tap
        out = np.zeros((n, cout, oh * ow))
        for i, j, hs, ws in taps:
            xs = np.ascontiguousarray(xp[:, :, hs, ws]).reshape(n, cin, oh * ow)
            out += np.matmul(weight.data[:, :, i, j], xs)
        out = out.reshape(n, cout, oh, ow)
    elif depthwise:
        out = np.zeros((n, cout, oh, ow))
        for i, j, hs, ws in taps:
            out += xp[:, :, hs, ws] * weight.data[:, 0, i, j][None, :, None, None]
    else:
        out = np.zeros((n, groups, cout_g, oh, ow))
        for i, j, hs, ws in taps:
            out += np.einsum(
                "ngihw,goi->ngohw", xv[:, :, :, hs, ws], wv[:, :, :, i, j]
            )
        out = out.reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        need_w = _needs_grad(weight)
        need_x = _needs_grad(x)
        if groups == 1:
            gf = g.reshape(n, cout, oh * ow)
            gw = np.zeros_like(weight.data) if need_w else None
            gxp = np.zeros_like(xp) if need_x else None
            for i, j, hs, ws in taps:
                if need_w:
                    xs = np.ascontiguousarray(xp[:, :, hs, ws]).reshape(
                        n, cin, oh * ow
                    )
                    gw[:, :, i, j] = np.tensordot(gf, xs, axes=([0, 2], [0, 2]))
                if need_x:
                    gxp[:, :, hs, ws] += np.matmul(
                        weight.data[:, :, i, j].T, gf
                    ).reshape(n, cin, oh, ow)
        elif depthwise:
            gw = np.zeros_like(weight.data) if need_w else None
            gxp = np.zeros_like(xp) if need_x else None
            for i, j, hs, ws in taps:
                if need_w:
                    gw[:, 0, i, j] = (g * xp[:, :, hs, ws]).sum(axis=(0, 2, 3))
                if need_x:
                    gxp[:, :, hs, ws] += g * weight.data[:, 0, i, j][
                        None, :, None, None
                    ]
        else:
            gv = g.reshape(n, groups, cout_g, oh, ow)
            gw5 = np.zeros_like(wv) if need_w else None
            gxv = np.zeros_like(xv) if need_x else None
            for i, j, hs, ws in taps:
                if need_w:
                    gw5[:, :, :, i, j] = np.einsum(
                        "ngohw,ngihw->goi", gv, xv[:, :, :, hs, ws]
                    )
                if need_x:
                    gxv[:, :, :, hs, ws] += np.einsum(
                        "ngohw,goi->ngihw", gv, wv[:, :, :, i, j]
                    )
            gw = gw5.reshape(weight.data.shape) if need_w else None
            gxp = gxv.reshape(xp.shape) if need_x else None
        if need_w:
            weight._accum(gw)
        if need_x:
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accum(gxp)
        if bias is not None and _needs_grad(bias):
            bias._accum(g.sum(axis=(0, 2, 3)))

    return _node(out, parents, bwd)


def linear(x, weight, bias=None):
    """Channel-mixing linear layer == 1x1 convolution."""
    if weight.data.shape[2:] != (1, 1):
        raise ShapeError(f"linear weight must be Cx Cx1x1, got {weight.data.shape}")
    return conv2d(x, weight, bias)


# -- pooling ------------------------------------------------------------


def max_pool2(x):
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    xv = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    xv = xv.reshape(n, c, oh, ow, 4)
    arg = xv.argmax(axis=-1)
    out = np.take_along_axis(xv, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros((n, c, oh, ow, 4))
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
        buf = buf.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(buf.reshape(n, c, h, w))

    return _node(out, (x,), bwd)


def _partition(n, k):
    bounds = [(i * n) // k for i in range(k)] + [n]
    return [(bounds[i], bounds[i + 1]) for i in range(k)]


def adaptive_avg_pool(x, k):
    n, c, h, w = x.data.shape
    if k > h or k > w:
        raise ShapeError(f"adaptive_avg_pool: k={k} exceeds spatial {h}x{w}")
    rows = _partition(h, k)
    cols = _partition(w, k)
    out = np.empty((n, c, k, k))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bwd(g):
        buf = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                buf[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
        x._accum(buf)

    return _node(out, (x,), bwd)


def pool(x, kind, k=None):
    if kind == "max2":
        return max_pool2(x)
    if kind == "adaptive_avg":
        if k is None:
            raise ValueError("adaptive_avg needs k")
        return adaptive_avg_pool(x, k)
    raise ValueError(f"unknown pool kind {kind!r}")


def global_max_pool(x):
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(n, c, 1, 1)

    def bwd(g):
        buf = np.zeros((n, c, h * w))
        np.put_along_axis(buf, arg[..., None], g.reshape(n, c, 1), axis=-1)
        x._accum(buf.reshape(x.data.shape))

    return _node(out, (x,), bwd)


# -- bilinear upsampling -------------------------------------------------

_BILINEAR_CACHE = {}


def _bilinear_matrix(n_in, factor):
    key = (n_in, factor)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        n_out = n_in * factor
        m = np.zeros((n_out, n_in))
        for o in range(n_out):
            src = (o + 0.5) / factor - 0.5
            i0 = int(np.floor(src))
            t = src - i0
            i0c = min(max(i0, 0), n_in - 1)
            i1c = min(max(i0 + 1, 0), n_in - 1)
            m[o, i0c] += 1.0 - t
            m[o, i1c] += t
        _BILINEAR_CACHE[key] = m
    return m


def upsample_bilinear(x, factor):
    """Half-pixel-center bilinear upsampling (align-corners off)."""
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return reshape(x, x.data.shape)
    n, c, h, w = x.data.shape
    rh = _bilinear_matrix(h, factor)
    rw = _bilinear_matrix(w, factor)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def bwd(g):
        x._accum(np.matmul(np.matmul(rh.T, g), rw))

    return _node(out, (x,), bwd)


# -- channel ops --------------------------------------------------------


def channel_shuffle(x, groups):
    n, c = x.data.shape[:2]
    if c % groups:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by {groups}")
    per = c // groups
    idx = np.arange(c)
    perm = (idx % groups) * per + idx // groups
    inv = np.empty_like(perm)
    inv[perm] = idx

    def bwd(g):
        x._accum(g[:, inv])

    return _node(x.data[:, perm].copy(), (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize across channels at each (n, h, w) position."""
    n, c = x.data.shape[:2]
    if gamma.data.size != c or beta.data.size != c:
        raise ShapeError(
            f"layer_norm: gamma/beta must have {c} entries, got "
            f"{gamma.data.size}/{beta.data.size}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    gs = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gs + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if _needs_grad(gamma):
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.data.shape))
        if _needs_grad(beta):
            beta._accum(g.sum(axis=(0, 2, 3)).reshape(beta.data.shape))
        if _needs_grad(x):
            gx = g * gs
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            x._accum(inv_std * (gx - m1 - xhat * m2))

    return _node(out, (x, gamma, beta), bwd)


# -- gradient checking --------------------------------------------------


def fd_gradcheck(f, params, eps=1e-5, max_coords=8, rng=None):
    """Max relative error between analytic and central-difference grads.

    ``f`` maps the given parameter Tensors to a scalar Tensor; a fresh
    graph is built per call. Per parameter, up to ``max_coords`` random
    coordinates are probed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = f()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise ValueError("fd_gradcheck: objective must be a finite scalar")
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f().data)
            flat[c] = orig - eps
            fm = float(f().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("fd_gradcheck: non-finite objective at probe")
            fd = (fp - fm) / (2.0 * eps)
            err = abs(an.reshape(-1)[c] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
