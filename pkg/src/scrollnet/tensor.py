"""Dense float64 tensors with reverse-mode differentiation.

Every operation links its output to its input tensors together with a
vector-Jacobian callback, so the computation tape is rebuilt implicitly on
each forward pass. ``Tensor.backward`` replays that DAG once in reverse
topological order and accumulates gradients into the ``.grad`` buffers of
leaf tensors. Accumulation (rather than overwrite) is deliberate: summing
several losses and calling backward once yields the same leaf gradients as
one backward call per loss.

All data is float64. Elementwise ops follow numpy broadcasting; structured
ops (linear, conv2d, pooling, normalization, losses) validate their shapes
explicitly.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, InputError

_GRAD_STACK = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    _GRAD_STACK.append(False)
    try:
        yield
    finally:
        _GRAD_STACK.pop()


def grad_enabled():
    return _GRAD_STACK[-1]


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def tape(self):
        """Return the op DAG below this tensor in topological order."""
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                stack.append((parent, False))
        return order

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        Adjoints of interior nodes live only for the duration of this call,
        so repeated backward calls add full gradients each time.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        order = self.tape()
        adjoint = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is not None:
                for parent, pg in zip(node._prev, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    held = adjoint.get(id(parent))
                    adjoint[id(parent)] = pg if held is None else held + pg

    # elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_coerce(other))

    def __rsub__(self, other):
        return add(_coerce(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        def vjp(g):
            return (-g,)

        return _node(-self.data, (self,), vjp)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division only supported by python scalars")
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        p = float(exponent)
        base = self.data

        def vjp(g):
            return (g * p * base ** (p - 1.0),)

        return _node(base ** p, (self,), vjp)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        def vjp(g):
            return (np.broadcast_to(g, self.data.shape).copy(),)

        return _node(self.data.sum(), (self,), vjp)

    def mean(self):
        n = self.data.size

        def vjp(g):
            return (np.broadcast_to(g / n, self.data.shape).copy(),)

        return _node(self.data.mean(), (self,), vjp)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def vjp(g):
            return (g.reshape(old),)

        return _node(self.data.reshape(shape), (self,), vjp)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, vjp):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if grad_enabled() and out.requires_grad:
        out._prev = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _node(a.data + b.data, (a, b), vjp)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), vjp)


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not conform")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), vjp)


def take(t, indices, axis=0):
    """Gather along one axis; the backward pass scatter-adds into the source."""
    t = _coerce(t)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take expects a 1-D index list")
    shape = t.data.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, (slice(None),) * axis + (idx,), g)
        return (gt,)

    return _node(np.take(t.data, idx, axis=axis), (t,), vjp)


def relu(t):
    t = _coerce(t)
    mask = t.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, t.data, 0.0), (t,), vjp)


def linear(x, weight, bias=None):
    """Affine map: out[b, o] = sum_i x[b, i] * weight[o, i] + bias[o]."""
    x, weight = _coerce(x), _coerce(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(
            f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear input features {x.shape[1]} != weight features {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(
                f"linear bias shape {bias.shape} != ({weight.shape[0]},)"
            )
        out = out + bias.data
    xd, wd = x.data, weight.data

    if bias is None:
        def vjp(g):
            return g @ wd, g.T @ xd

        return _node(out, (x, weight), vjp)

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _node(out, (x, weight, bias), vjp)


def _conv_patches(xp, k, stride, out_h, out_w):
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, c, k, k, out_h, out_w),
        (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation (no kernel flip) with zero padding."""
    x, kernel, bias = _coerce(x), _coerce(kernel), _coerce(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input/kernel, got {x.shape} and {kernel.shape}"
        )
    b, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {kernel.shape}")
    if kc != c:
        raise DimensionError(
            f"conv2d input channels {c} != kernel channels {kc}"
        )
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({f},)")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    patches = _conv_patches(xp, k, stride, out_h, out_w)
    out = np.einsum("bcuvhw,fcuv->bfhw", patches, kernel.data, optimize=True)
    out += bias.data[None, :, None, None]
    kd = kernel.data

    def vjp(g):
        gb = g.sum(axis=(0, 2, 3))
        gk = np.einsum("bcuvhw,bfhw->fcuv", patches, g, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                contrib = np.einsum("bfhw,fc->bchw", g, kd[:, :, u, v], optimize=True)
                gxp[:, :, u:u + out_h * stride:stride, v:v + out_w * stride:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    return _node(out, (x, kernel, bias), vjp)


def maxpool2d(x, size=2, stride=None):
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-D input, got {x.shape}")
    s = size if stride is None else stride
    b, c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    out_h = (h - size) // s + 1
    out_w = (w - size) // s + 1
    patches = _conv_patches(x.data, size, s, out_h, out_w)
    flat = patches.transpose(0, 1, 4, 5, 2, 3).reshape(b, c, out_h, out_w, size * size)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros((b, c, h, w), dtype=np.float64)
        bi, ci, hi, wi = np.indices((b, c, out_h, out_w))
        rows = hi * s + am // size
        cols = wi * s + am % size
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _node(out, (x,), vjp)


def avgpool2d(x, size=2, stride=None):
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects a 4-D input, got {x.shape}")
    s = size if stride is None else stride
    b, c, h, w = x.shape
    if size > h or size > w:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    out_h = (h - size) // s + 1
    out_w = (w - size) // s + 1
    patches = _conv_patches(x.data, size, s, out_h, out_w)
    out = patches.mean(axis=(2, 3))
    area = size * size

    def vjp(g):
        gx = np.zeros((b, c, h, w), dtype=np.float64)
        gshare = g / area
        for u in range(size):
            for v in range(size):
                gx[:, :, u:u + out_h * s:s, v:v + out_w * s:s] += gshare
        return (gx,)

    return _node(out, (x,), vjp)


def global_avg_pool(x):
    x = _coerce(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    _, _, h, w = x.shape
    area = h * w

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalization over (B,C) or (B,C,H,W) inputs.

    In training mode batch statistics normalize the input and the running
    buffers (plain numpy arrays, mutated in place) track them with the
    usual exponential update; in eval mode the running buffers are used and
    left untouched.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"batch_norm scale/shift shape {gamma.shape}/{beta.shape} != ({channels},)"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    pshape = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    gr = gamma.data.reshape(pshape)
    m = x.data.size // channels

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(channels) * (m / (m - 1)) if m > 1 else var.reshape(channels)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(channels)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def vjp(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            dxhat = g * gr
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, ggamma, gbeta

        out = gr * xhat + beta.data.reshape(pshape)
        return _node(out, (x, gamma, beta), vjp)

    inv = 1.0 / np.sqrt(running_var.reshape(pshape) + eps)
    xhat = (x.data - running_mean.reshape(pshape)) * inv

    def vjp(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = g * gr * inv
        return gx, ggamma, gbeta

    out = gr * xhat + beta.data.reshape(pshape)
    return _node(out, (x, gamma, beta), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax at the given class indices.

    Stabilized by max subtraction, so it stays finite for logit magnitudes
    far beyond 1e4.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if n == 0:
        raise InputError("empty batch")
    if y.shape != (n,):
        raise InputError(f"labels shape {y.shape} != ({n},)")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    if y.min() < 0 or y.max() >= k:
        raise InputError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -logp[np.arange(n), y].mean()

    def vjp(g):
        p = ez / sez
        p[np.arange(n), y] -= 1.0
        return (p * (float(g) / n),)

    return _node(loss, (logits,), vjp)


def soft_cross_entropy(logits, target_probs):
    """Mean cross-entropy against fixed target distributions (distillation).

    Targets must be (row-)normalized probabilities; the backward pass uses
    the exact softmax-minus-target form, so identical logits and targets
    give an exactly zero gradient.
    """
    logits = _coerce(logits)
    q = np.asarray(target_probs, dtype=np.float64)
    if logits.ndim != 2 or q.shape != logits.shape:
        raise DimensionError(
            f"targets shape {q.shape} must match logits shape {logits.shape}"
        )
    n = logits.shape[0]
    if n == 0:
        raise InputError("empty batch")
    if np.abs(q.sum(axis=1) - 1.0).max() > 1e-8:
        raise InputError("target rows must be normalized distributions")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -(q * logp).sum(axis=1).mean()

    def vjp(g):
        return ((ez / sez - q) * (float(g) / n),)

    return _node(loss, (logits,), vjp)


def sgd_step(params, velocities, lr, momentum=0.0, weight_decay=0.0):
    """One SGD update: v <- momentum*v + g + weight_decay*theta; theta -= lr*v.

    ``params`` maps names to Tensors, ``velocities`` maps the same names to
    numpy buffers and is mutated. Parameters without a gradient are skipped.
    """
    if lr <= 0.0:
        raise InputError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocities.get(name)
        v = g.copy() if v is None and momentum == 0.0 else (
            momentum * v + g if v is not None else g.copy()
        )
        velocities[name] = v
        p.data -= lr * v


class SGD:
    """Momentum SGD over a named parameter dict."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {}

    def step(self, lr=None):
        sgd_step(self.params, self.velocities, self.lr if lr is None else lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
