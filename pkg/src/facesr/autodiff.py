"""Minimal reverse-mode autodiff over dense float64 rasters.

Supports exactly the layer vocabulary the hallucination networks need:
3x3 stride-1 pad-1 convolutions, ReLU, logistic squashing, elementwise
algebra, channel concatenation and masked squared losses. The graph is an
explicit tape rebuilt on every forward pass; ``backward()`` walks it once.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """A float64 ndarray plus the tape bookkeeping needed for backward().

    ``requires_grad`` marks leaves (parameters, probed inputs); interior
    nodes inherit it from their parents. Gradients accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        self must be a scalar produced by recorded operations.
        """
        if self._backward_fn is None and not self._parents:
            raise RuntimeError("backward() before any recorded forward pass")
        if self.data.size != 1:
            raise RuntimeError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a, s):
    """a * s for a python scalar s."""
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), bw)


def one_minus(a):
    """1 - a, elementwise."""
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(1.0 - a.data, (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), bw)


def concat_channels(tensors):
    """Concatenate (B, C_i, H, W) tensors along the channel axis."""
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].data.shape
    for t in tensors:
        if t.data.ndim != 4 or t.data.shape[0] != base[0] or t.data.shape[2:] != base[2:]:
            raise ShapeError("concat_channels: incompatible shapes")
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def bw(g):
        for t, gpart in zip(tensors, np.split(g, splits, axis=1)):
            _accumulate(t, gpart)

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, bw)


def sum_sq(a):
    """Sum of squares of all entries, as a scalar tensor."""
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * float(g) * a.data)

    return _make(np.sum(a.data * a.data), (a,), bw)


def masked_sq_loss(pred, target, mask):
    """Sum over mask channels of the squared masked residual.

    pred (B, 1, H, W) and target share one shape; mask is (B, C, H, W) and is
    broadcast against pred's single channel. With an all-ones single-channel
    mask this reduces to the plain squared Frobenius residual.
    """
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ShapeError(f"masked_sq_loss: pred {pred.data.shape} vs target {t.shape}")
    if pred.data.ndim != 4 or pred.data.shape[1] != 1:
        raise ShapeError("masked_sq_loss: pred must be (B, 1, H, W)")
    if m.ndim != 4 or m.shape[0] != pred.data.shape[0] or m.shape[2:] != pred.data.shape[2:]:
        raise ShapeError(f"masked_sq_loss: mask {m.shape} incompatible with {pred.data.shape}")
    r = t - pred.data
    val = np.sum((m * r) ** 2)
    msq = np.sum(m * m, axis=1, keepdims=True)

    def bw(g):
        _accumulate(pred, float(g) * (-2.0) * msq * r)

    return _make(val, (pred,), bw)


# -------------------------------------------------------------- convolutions

def _im2col(x, cin):
    """(B, C, H, W) -> (B*H*W, C*9) patches under zero pad 1."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, h, w, c, 3, 3), (s[0], s[2], s[3], s[1], s[2], s[3]))
    return win.reshape(b * h * w, c * 9)


def _col2im(cols, shape):
    """Adjoint of _im2col: scatter-add (B*H*W, C*9) back to (B, C, H, W)."""
    b, c, h, w = shape
    cols = cols.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            out[:, :, dy:dy + h, dx:dx + w] += cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def conv3x3(x, weight, bias):
    """3x3 cross-correlation, stride 1, zero pad 1; spatial extent preserved.

    x: (B, Cin, H, W); weight: (Cout, Cin, 3, 3); bias: (Cout,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3x3: input must be 4-d, got {x.data.shape}")
    b, cin, h, w = x.data.shape
    cout = weight.data.shape[0]
    if weight.data.shape != (cout, cin, 3, 3):
        raise ShapeError(
            f"conv3x3: weight {weight.data.shape} does not match input channels {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv3x3: bias {bias.data.shape} != ({cout},)")

    cols = _im2col(x.data, cin)
    wmat = weight.data.reshape(cout, cin * 9)
    out = cols @ wmat.T
    out = out.reshape(b, h, w, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * h * w, cout)
        if weight.requires_grad:
            _accumulate(weight, (gmat.T @ _im2col(x.data, cin)).reshape(cout, cin, 3, 3))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            _accumulate(x, _col2im(gmat @ wmat, (b, cin, h, w)))

    return _make(out, (x, weight, bias), bw)


# --------------------------------------------------------------- layers, opt

class Conv2d:
    """A 3x3 stride-1 pad-1 convolution layer with He-initialised kernels.

    ``lr_pretrain`` / ``lr_finetune`` are the per-layer learning-rate scales
    used by the stagewise training schedule.
    """

    def __init__(self, in_ch, out_ch, rng, lr_pretrain=1.0, lr_finetune=1.0):
        std = np.sqrt(2.0 / (in_ch * 9))
        self.weight = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.lr_pretrain = float(lr_pretrain)
        self.lr_finetune = float(lr_finetune)

    def __call__(self, x):
        return conv3x3(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class SGD:
    """SGD with momentum and per-parameter learning-rate scales.

    Update: buf <- momentum * buf + grad; p <- p - lr_scale * base_lr * buf.
    """

    def __init__(self, params, base_lr, momentum=0.9, lr_scales=None):
        self.params = list(params)
        self.base_lr = float(base_lr)
        self.momentum = float(momentum)
        if lr_scales is None:
            lr_scales = [1.0] * len(self.params)
        if len(lr_scales) != len(self.params):
            raise ValueError("lr_scales length mismatch")
        self.lr_scales = [float(s) for s in lr_scales]
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, buf, s in zip(self.params, self.buffers, self.lr_scales):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            p.data -= s * self.base_lr * buf
        self.step_count += 1


# ------------------------------------------------------------ gradient check

def finite_diff_check(loss_fn, tensors, h=1e-5, max_entries=None, rng=None):
    """Central finite-difference check of d loss_fn() / d t for each tensor.

    Returns the worst relative error over all probed entries. ``loss_fn``
    must rebuild the graph from the current tensor data on every call.
    """
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            ad = gflat[i]
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst
