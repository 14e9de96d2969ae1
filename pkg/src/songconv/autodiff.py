"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for gated convolutional networks: 1-D/2-D
convolutions, gated linear units, instance normalization, pixel shuffle,
and the Adam optimizer.  Every op records a closure that maps the output
gradient to the gradients of its parents; :meth:`Tensor.backward` walks the
tape in reverse topological order and frees it afterwards.

Forward outputs are checked for NaN/Inf after every op and a
:class:`~songconv.errors.NumericError` naming the op is raised immediately.
"""
from __future__ import annotations

import contextlib
from collections.abc import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'")
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data)
    if req:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def abs_(x: Tensor) -> Tensor:
    def bw(g):
        return (g * np.sign(x.data),)

    return _make(np.abs(x.data), (x,), bw, "abs")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), bw, "log")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form cannot overflow
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw, "sigmoid")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.dtype)

    def bw(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), bw, "leaky_relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), bw, "clamp")


# ----------------------------------------------------------------- reductions / shape

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        if _needs_add_at(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatch(f"concat: shapes {ref} and {t.shape} incompatible on axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# ----------------------------------------------------------------- losses

def l1(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1: shapes {a.shape} and {b.shape} differ")
    return mean(abs_(sub(a, b)))


# ----------------------------------------------------------------- convolutions

def _pad_pair(p) -> tuple[int, int]:
    if isinstance(p, int):
        return p, p
    return int(p[0]), int(p[1])


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, T) with ``w`` (Cout, Cin, K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} vs weight {w.shape}")
    B, cin, _ = x.shape
    cout, _, K = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    tp = xp.shape[2]
    if tp < K:
        raise ShapeMismatch(f"conv1d: padded length {tp} shorter than kernel {K}")
    tout = (tp - K) // stride + 1
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :tout]  # B,Cin,Tout,K
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, tout, cin * K)
    w2 = w.data.reshape(cout, cin * K)
    out = (cols @ w2.T).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gt = g.transpose(0, 2, 1)  # B,Tout,Cout
        gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        gb = g.sum(axis=(0, 2)) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray((gt @ w2).reshape(B, tout, cin, K).transpose(3, 0, 2, 1))
            gxp = np.zeros_like(xp)
            span = stride * (tout - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + span:stride] += gcols[k]
            gx = gxp[:, :, padding:tp - padding] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv1d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, H, W) with ``w`` (Cout, Cin, KH, KW)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {w.shape}")
    sh, sw = _pad_pair(stride)
    ph, pw = _pad_pair(padding)
    B, cin, _, _ = x.shape
    cout, _, KH, KW = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2:]
    if hp < KH or wp < KW:
        raise ShapeMismatch(f"conv2d: padded input {xp.shape} smaller than kernel {w.shape}")
    hout = (hp - KH) // sh + 1
    wout = (wp - KW) // sw + 1
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :hout, :wout]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * hout * wout, cin * KH * KW)
    w2 = w.data.reshape(cout, -1)
    out = (cols @ w2.T).reshape(B, hout, wout, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(
                (g2 @ w2).reshape(B, hout, wout, cin, KH, KW).transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            hspan = sh * (hout - 1) + 1
            wspan = sw * (wout - 1) + 1
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i:i + hspan:sh, j:j + wspan:sw] += gcols[i, j]
            gx = gxp[:, :, ph:hp - ph, pw:wp - pw]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv2d")


# ----------------------------------------------------------------- normalization / reshaping

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each (sample, channel) over its trailing axes, then scale/shift."""
    if x.ndim < 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"instance_norm: input {x.shape} vs affine {gamma.shape}/{beta.shape}")
    axes = tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0,) + axes)
        gbeta = g.sum(axis=(0,) + axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "instance_norm")


def pixel_shuffle_1d(x: Tensor, factor: int) -> Tensor:
    """(B, C*r, T) -> (B, C, T*r), out[b, c, t*r + i] = x[b, c*r + i, t]."""
    B, cr, T = x.shape
    if cr % factor:
        raise ShapeMismatch(f"pixel_shuffle_1d: {cr} channels not divisible by {factor}")
    c = cr // factor
    out = x.data.reshape(B, c, factor, T).transpose(0, 1, 3, 2).reshape(B, c, T * factor)

    def bw(g):
        return (g.reshape(B, c, T, factor).transpose(0, 1, 3, 2).reshape(B, cr, T),)

    return _make(np.ascontiguousarray(out), (x,), bw, "pixel_shuffle_1d")


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_nearest2d")


def glu(linear: Tensor, gate: Tensor) -> Tensor:
    """Gated linear unit: ``linear * sigmoid(gate)``."""
    if linear.shape != gate.shape:
        raise ShapeMismatch(f"glu: linear path {linear.shape} vs gate path {gate.shape}")
    return mul(linear, sigmoid(gate))


def glu_layer(h: Tensor, w: Tensor, b: Tensor, v: Tensor, c: Tensor, stride: int = 1,
              padding: int = 0) -> Tensor:
    """One gated convolutional layer: ``(h*w + b) ⊗ σ(h*v + c)`` with 1-D convolutions."""
    return glu(conv1d(h, w, b, stride, padding), conv1d(h, v, c, stride, padding))


# ----------------------------------------------------------------- tape

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf and free the tape."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ----------------------------------------------------------------- modules

class Module:
    """Container that discovers parameters through its attributes.

    Parameter names are dotted attribute paths (``down.0.lin.weight``); list
    attributes contribute their index.  Names are stable for a given
    architecture, which is what checkpoint transfer matches on.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = _init_uniform(rng, (cout, cin, kernel), cin * kernel, dtype)
        self.bias = _init_uniform(rng, (cout,), cin * kernel, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel, stride=1, padding=None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pad_pair(kernel)
        self.stride = _pad_pair(stride)
        self.padding = (kh // 2, kw // 2) if padding is None else _pad_pair(padding)
        self.weight = _init_uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype)
        self.bias = _init_uniform(rng, (cout,), cin * kh * kw, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, self.eps)


# ----------------------------------------------------------------- optimizer

def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction.

    ``state`` holds the step counter ``t`` and first/second moment lists;
    pass an empty dict on the first call.
    """
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


# ----------------------------------------------------------------- verification

def gradcheck(fn, inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between backprop and central finite differences.

    ``fn`` maps the inputs to a tensor; non-scalar outputs are reduced with a
    fixed random projection.  Inputs should be float64.  The step for entry
    ``x`` is ``h * max(1, |x|)``.  Errors are normalized by the largest
    gradient magnitude over all inputs: a bias feeding an instance norm has a
    true gradient of zero, and scaling by its own roundoff would be meaningless.
    """
    rng = np.random.default_rng([seed, 0x9D])
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar(*xs):
        return float(np.sum(fn(*xs).data * proj))

    for t in inputs:
        t.grad = None
    loss = sum_(mul(out, Tensor(proj)))
    backward(loss)
    diffs, scale = [], 1e-12
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                fp = scalar(*inputs)
                flat[i] = orig - step
                fm = scalar(*inputs)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * step)
        scale = max(scale, np.abs(numeric).max(), np.abs(analytic).max())
        diffs.append(float(np.abs(analytic - numeric).max()))
    return max(diffs, default=0.0) / scale
