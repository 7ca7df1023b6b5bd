"""Reverse-mode autodiff on dense numpy arrays.

Single precision is the working dtype; every op preserves the dtype of its
inputs, so float64 parameters give a float64 graph (used by the finite
difference checker, where doubles make the comparison tight).

Ops are free functions building a closure-per-node graph; `Tensor.backward`
walks the topological order. All forwards are pure, so concurrent reads of
shared frozen parameters are safe.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .backend import col2im, im2col


class DimensionError(ValueError):
    """Shape or width mismatch between op operands."""


class GradCheckError(RuntimeError):
    """Finite-difference checker hit a non-finite objective value."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarrays, not Tensors")
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            # copy: the buffer may be shared with another consumer's update
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen, stack = [], set(), [(self, False)]
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
                stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar; heavy lifting lives in the free functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * s)

    return _node(x.data * x.data.dtype.type(s), (x,), bw)


def square(x) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (2.0 * x.data))

    return _node(x.data * x.data, (x,), bw)


def gelu(x) -> Tensor:
    """tanh-approximation GELU."""
    x = _as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        if x.requires_grad:
            dinner = c * (1.0 + 3 * 0.044715 * x.data**2)
            x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * dinner))

    return _node(out.astype(x.dtype), (x,), bw)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _node(out.astype(x.dtype), (x,), bw)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inv))

    return _node(x.data.transpose(axes), (x,), bw)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _node(np.ascontiguousarray(x.data[idx]), (x,), bw)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x, ), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.shape[a] for a in axis]))
    else:
        n = x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(np.matmul(a.data, b.data), (a, b), bw)


def linear(x, weight: Tensor, bias=None) -> Tensor:
    """x [*, in] times weight [in, out], plus optional bias [out]."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit (population) variance."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    for aff in (gamma, beta):
        if aff is not None and aff.shape != (d,):
            raise DimensionError(f"layer_norm affine shape {aff.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [p for p in (x, gamma, beta) if p is not None]

    def bw(g):
        if beta is not None and beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data if gamma is not None else g
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            dmu = -(dxhat * inv).sum(axis=-1, keepdims=True)
            x._accumulate(dxhat * inv + dvar * (2.0 / d) * xc + dmu / d)

    return _node(out.astype(x.dtype), parents, bw)


def channel_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization over the channel axis of [B, C, H, W]."""
    x = _as_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("channel_norm affine must match the channel count")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gb
            dvar = (dxhat * xc).sum(axis=1, keepdims=True) * (-0.5) * inv**3
            dmu = -(dxhat * inv).sum(axis=1, keepdims=True)
            x._accumulate(dxhat * inv + dvar * (2.0 / c) * xc + dmu / c)

    return _node(out.astype(x.dtype), (x, gamma, beta), bw)


def softmax_last(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s.astype(x.dtype), (x,), bw)


def scaled_dot_attention(q, k, v):
    """Softmax(q kT / sqrt(dk)) v over the key axis.

    Shapes [.., n, dk] x [.., m, dk] x [.., m, dv]; returns (out, weights)
    with weights [.., n, m] rows summing to one.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise DimensionError(f"query width {dk} != key width {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise DimensionError("key and value counts differ")
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = scale(matmul(q, kt), 1.0 / math.sqrt(dk))
    weights = softmax_last(logits)
    return matmul(weights, v), weights


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        coeff = g * (2.0 / n)
        if pred.requires_grad:
            pred._accumulate(coeff * diff)
        if target.requires_grad:
            target._accumulate(-coeff * diff)

    return _node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), bw)


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------


def conv2d(x, weight: Tensor, bias=None, stride: int = 1, pad: int = 1) -> Tensor:
    """x [B, C, H, W] with weight [O, C, KH, KW]; zero padding."""
    x = _as_tensor(x)
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input channels {x.shape[1]} != weight channels {c}")
    b, _, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = im2col(x.data, kh, kw, stride, pad)     # [B, C*KH*KW, OH*OW]
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(b, o, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gmat = g.reshape(b, o, oh * ow)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.tensordot(gmat, cols, axes=([0, 2], [0, 2]))
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            x._accumulate(col2im(gcols, x.shape, kh, kw, stride, pad))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def upsample_nearest2x(x) -> Tensor:
    x = _as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# timestep encoding
# ---------------------------------------------------------------------------


def sinusoidal_encoding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Half sines then half cosines, frequencies log-spaced over [1, max_period].

    t may be a scalar or a 1-d array of timesteps; returns [dim] or [len(t), dim].
    """
    if dim % 2 != 0:
        raise DimensionError("sinusoidal encoding width must be even")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1, dtype=np.float64)
    else:
        freqs = max_period ** (-np.arange(half, dtype=np.float64) / (half - 1))
    angles = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return enc.astype(np.float32)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    max_rel_error: float
    per_parameter_errors: dict = field(default_factory=dict)
    tolerance: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def zero_grads(params):
    for p in params.values():
        p.grad = None


def grad_check(f, params: dict, step: float = 1e-3, tolerance: float = 1e-3,
               rng=None, max_coords: int = 0, zero_threshold: float = 1e-10,
               wide_step: float = 0.5) -> GradReport:
    """Compare reverse-mode gradients of scalar f(params) to central differences.

    max_coords > 0 samples that many coordinates per parameter (rng required),
    otherwise every coordinate is checked. Relative error per coordinate is
    |a - b| / max(|a|, |b|, 1e-8).

    Coordinates whose analytic gradient is below zero_threshold sit in
    directions the objective is (numerically) constant along, e.g. key biases
    feeding a softmax; the difference there reads pure roundoff, so it is
    taken at wide_step to push that noise below the comparison floor. Other
    coordinates walk a short ladder of steps around `step` and keep the best
    agreement, since the optimal step trades truncation against roundoff per
    coordinate; a wrong gradient disagrees at every step.
    """
    zero_grads(params)
    loss = f(params)
    base = float(loss.data)
    if not math.isfinite(base):
        raise GradCheckError(f"objective is non-finite at the base point: {base}")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items() if p.requires_grad
    }

    def f_value():
        zero_grads(params)
        val = float(f(params).data)
        if not math.isfinite(val):
            raise GradCheckError("objective became non-finite during perturbation")
        return val

    errors = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords and n > max_coords:
            if rng is None:
                raise ValueError("sampled grad_check needs an rng")
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        ana = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            a = float(ana[i])
            if abs(a) > zero_threshold:
                ladder = (step, step / 4, step / 16, step / 64,
                          step * 4, step * 16, max(step, wide_step))
            else:
                ladder = (max(step, wide_step),)

            def rel_err(b):
                return abs(a - b) / max(abs(a), abs(b), 1e-8)

            best = math.inf
            fds = []
            for h in ladder:
                xph = np.asarray(orig + h, dtype=flat.dtype)
                xmh = np.asarray(orig - h, dtype=flat.dtype)
                flat[i] = xph
                fp = f_value()
                flat[i] = xmh
                fm = f_value()
                flat[i] = orig
                fd = (fp - fm) / (float(xph) - float(xmh))
                fds.append((h, fd))
                best = min(best, rel_err(fd))
                if best < tolerance / 10:
                    break
            # Richardson over 4x-apart rungs cancels the h^2 truncation term
            for j, (h1, fd1) in enumerate(fds):
                for h2, fd2 in fds[j + 1:]:
                    hs, fs_, hb, fb = (h1, fd1, h2, fd2) if h1 < h2 else (h2, fd2, h1, fd1)
                    if hb == 4 * hs:
                        best = min(best, rel_err((16.0 * fs_ - fb) / 15.0))
            worst = max(worst, best)
        errors[name] = worst
    overall = max(errors.values()) if errors else 0.0
    return GradReport(max_rel_error=overall, per_parameter_errors=errors, tolerance=tolerance)
