"""A small reverse-mode autodiff kernel over numpy arrays.

Only what the Q-network needs: dense and batched matmul, broadcasting
arithmetic, ReLU, batch normalisation, inverted dropout, masked softmax,
multi-head self-attention, Huber loss and Adam. Every op keeps the dtype of its
inputs, so networks run in float32 and gradient checks can run in float64.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np


class KernelError(Exception):
    pass


class DimensionError(KernelError, ValueError):
    pass


class GraphError(KernelError, RuntimeError):
    pass


class NumericError(KernelError, FloatingPointError):
    pass


class InvalidBatchError(KernelError, ValueError):
    pass


class InvalidMaskError(KernelError, ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if not isinstance(loss, Tensor) or loss._backward is None:
        raise GraphError("backward() needs the output of a recorded forward pass")
    order, seen, stack = [], set(), [(loss, False)]
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
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss: Tensor, params: dict) -> dict:
    """Zero the parameters' grads, run :func:`backward`, return ``{name: grad}``."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# ---- elementwise and shape ops ------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw)


def scale(a, c: float):
    a = as_tensor(a)
    def bw(g):
        _accum(a, g * c)
    return _node(a.data * a.data.dtype.type(c), (a,), bw)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0

    def bw(g):
        _accum(a, g * pos)
    return _node(np.where(pos, a.data, 0).astype(a.dtype), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))
    return _node(a.data.transpose(axes), (a,), bw)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def take_along_last(a, idx):
    """``out[i] = a[i, idx[i]]`` for a 2-D ``a``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accum(a, full)
    return _node(a.data[rows, idx], (a,), bw)


# ---- linear algebra -----------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _node(a.data @ b.data, (a, b), bw)


def linear_forward(x, W, bias):
    """``x @ W + bias`` for ``x`` of shape (..., in), ``W`` (in, out), ``bias`` (out,)."""
    x, W, bias = as_tensor(x), as_tensor(W), as_tensor(bias)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if bias.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {W.shape}")
    return add(matmul(x, W), bias)


# ---- normalisation and regularisation ----------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, features, dtype=np.float32):
        return cls(np.zeros(features, dtype=dtype), np.ones(features, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm_forward(x, gamma, beta, stats: RunningStats, training: bool, rows=None,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch norm over the last axis of a 2-D ``x`` (rows x features).

    In training mode the statistics come from the rows selected by the boolean
    ``rows`` mask (all rows by default) and the running statistics are updated
    in place, using the unbiased variance. Evaluation mode uses the running
    statistics only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X = x.data
    if X.ndim != 2:
        raise DimensionError("batchnorm expects a 2-D input")
    dt = X.dtype.type
    if training:
        sel = np.ones(len(X), bool) if rows is None else np.asarray(rows, bool)
        m = int(sel.sum())
        if m < 2:
            raise InvalidBatchError("batch norm in training mode needs at least 2 rows")
        Xs = X[sel]
        mu = Xs.mean(axis=0)
        var = ((Xs - mu) ** 2).mean(axis=0)
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mu
        stats.var[...] = (1 - momentum) * stats.var + momentum * var * (m / (m - 1))
    else:
        sel, m = None, None
        mu, var = stats.mean.astype(X.dtype), stats.var.astype(X.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(X.dtype)
    xhat = (X - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        if not x.requires_grad:
            return
        gx = g * gamma.data
        dx = gx * inv
        if training:
            # Mean and variance only see the selected rows.
            d_mu = -gx.sum(axis=0) * inv
            d_var = -0.5 * (gx * (X - mu)).sum(axis=0) * inv ** 3
            dx = dx + sel[:, None] * (d_mu / m + d_var * 2.0 * (X - mu) / m)
        _accum(x, dx)
    return _node(out.astype(X.dtype), (x, gamma, beta), bw)


def dropout_forward(x, rate=0.2, training=True, rng=None):
    """Inverted dropout: identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)

    def bw(g):
        _accum(x, g * keep)
    return _node(x.data * keep, (x,), bw)


# ---- attention ----------------------------------------------------------------------------------

def masked_softmax(x, mask):
    """Softmax over the last axis; positions where ``mask`` is False get zero weight."""
    mask = np.asarray(mask, bool)
    logits = np.where(mask, x.data, -np.inf)
    mx = logits.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise InvalidMaskError("every softmax row needs at least one unmasked entry")
    e = np.exp(logits - mx)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _node(y, (x,), bw)


@dataclass
class AttentionOutput:
    output: Tensor
    weights: np.ndarray


def multihead_attention(tokens, mask, wq, wk, wv, wo, return_weights=False):
    """Masked multi-head self-attention.

    ``tokens`` is (batch, tokens, model); ``wq``/``wk``/``wv`` are per-head
    projections (heads, model, head_dim) and ``wo`` maps the concatenated heads
    back to the model width. Padded tokens are excluded as keys and their output
    rows are zeroed.
    """
    mask = np.asarray(mask, bool)
    B, T, D = tokens.shape
    H, _, dh = wq.shape
    if H * dh != D or wo.shape != (D, D):
        raise DimensionError("attention projection shapes do not match the model width")
    if mask.shape != (B, T):
        raise DimensionError(f"mask shape {mask.shape} != {(B, T)}")
    if not mask.any(axis=1).all():
        raise InvalidMaskError("every attention row needs at least one valid token")
    flat = reshape(tokens, (B * T, D))

    def project(w):
        # (H, D, dh) -> (D, H*dh): one dense matmul instead of H broadcast ones.
        w2 = reshape(transpose(w, (1, 0, 2)), (D, H * dh))
        return transpose(reshape(matmul(flat, w2), (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = project(wq), project(wk), project(wv)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = masked_softmax(scores, mask[:, None, None, :])
    ctx = matmul(att, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    out = mul(matmul(ctx, wo), mask[:, :, None].astype(tokens.dtype))
    if return_weights:
        return AttentionOutput(out, att.data)
    return out


def masked_mean(x, mask):
    """Mean over the token axis of (batch, tokens, features) using valid tokens only."""
    mask = np.asarray(mask, bool)
    w = (mask / mask.sum(axis=1, keepdims=True)).astype(x.dtype)[:, :, None]
    return sum_(mul(x, w), axis=1)


# ---- loss ---------------------------------------------------------------------------------------

def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss; ``target`` is treated as a constant."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"huber_loss shape mismatch: {pred.shape} vs {target.shape}")
    err = pred.data - target
    a = np.abs(err)
    quad = a <= delta
    vals = np.where(quad, 0.5 * err * err, delta * (a - 0.5 * delta))
    n = err.size

    def bw(g):
        d = np.where(quad, err, delta * np.sign(err))
        _accum(pred, g * d / n)
    return _node(np.asarray(vals.mean(), dtype=pred.dtype), (pred,), bw)


# ---- optimiser ----------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
