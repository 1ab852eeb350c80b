"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the mask generator, the U-Net discriminator and the
losses need are provided. Every op records a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` replays them in reverse
topological order.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Array with an optional gradient slot and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {self.name or self.shape}")
        return self

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf.

        ``grad`` defaults to ones, which is the usual case for a scalar loss.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # arithmetic with broadcasting
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))



def take_rows(a: Tensor, idx) -> Tensor:
    """Select entries along the leading axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward)

# --------------------------------------------------------------------------
# activations

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# spatial ops

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIKK kernel (im2col + GEMM).

    Patches are gathered channel-major, as a ``(K*K*C, N*Ho*Wo)`` matrix, so
    every copy in the gather and in the backward scatter is contiguous.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {i}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")

    if stride == 1:
        return _conv2d_shifted(x, w, b, pad, ho, wo)

    xc = x.data.transpose(1, 0, 2, 3)
    if pad:
        xc = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xc = np.ascontiguousarray(xc)
    hp, wp = xc.shape[2:]
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[ki, kj] = xc[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                              kj:kj + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(kh * kw * c, -1)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gt @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = gt.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                        kj:kj + stride * (wo - 1) + 1:stride] += gcols[ki, kj]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(np.ascontiguousarray(out), parents, backward)


def _conv2d_shifted(x, w, b, pad, ho, wo):
    # Stride-1 path: with the padded batch flattened to (C, N*Hp*Wp), the input
    # seen by kernel tap (ki, kj) is the same matrix shifted by ki*Wp + kj
    # columns. Summing one GEMM per tap over those views gives the output on
    # the padded grid; the valid Ho x Wo corner is cropped afterwards.
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xc = x.data.transpose(1, 0, 2, 3)
    xc = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(xc)
    hp, wp = xc.shape[2:]
    total = n * hp * wp
    xf = xc.reshape(c, total)
    span = total - (kh - 1) * wp - (kw - 1)
    offsets = [(ki, kj, ki * wp + kj) for ki in range(kh) for kj in range(kw)]
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # kh, kw, O, C

    full = np.zeros((o, total), dtype=x.dtype)
    acc = full[:, :span]
    for ki, kj, off in offsets:
        acc += taps[ki, kj] @ xf[:, off:off + span]
    if b is not None:
        acc += b.data[:, None]
    out = full.reshape(o, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)

    def backward(g):
        gp = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gp[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gp.reshape(o, total)[:, :span]
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.empty((kh, kw, o, c), dtype=g.dtype)
            for ki, kj, off in offsets:
                gw[ki, kj] = gf @ xf[:, off:off + span].T
            gw = gw.transpose(2, 3, 0, 1)
        if b is not None and b.requires_grad:
            gb = gf.sum(axis=1)
        if x.requires_grad:
            gxf = np.zeros((c, total), dtype=g.dtype)
            for ki, kj, off in offsets:
                gxf[:, off:off + span] += taps[ki, kj].T @ gf
            gx = gxf.reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(np.ascontiguousarray(out), parents, backward)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * 0.25

    def backward(g):
        q = g * np.asarray(0.25, dtype=g.dtype)
        return (np.broadcast_to(q[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2)).reshape(x.shape),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g[:, :, 0::2, 0::2] + g[:, :, 1::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 1::2],)

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)
    return _result(out, (x,), lambda g: (np.broadcast_to(
        (g * scale)[:, :, None, None], x.shape).astype(x.dtype),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation; updates running stats in place when training."""
    axes = (0, 2, 3)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        cnt = x.data.size // x.shape[1]
        unbiased = v * cnt / max(cnt - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * m
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m, v = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(v + eps)).astype(x.dtype)
    xhat = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            cnt = x.data.size // x.shape[1]
            gx = (inv[None, :, None, None] / cnt) * (
                cnt * gxhat - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(out.astype(x.dtype), (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# losses

def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean BCE of probabilities ``pred`` against targets in [0, 1].

    Predictions are clamped to ``[BCE_EPS, 1 - BCE_EPS]``; the gradient is
    zero where the clamp is active.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"binary_cross_entropy shape mismatch: {pred.shape} vs {t.shape}")
    p = np.clip(pred.data, BCE_EPS, 1 - BCE_EPS)
    n = p.size
    val = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean(dtype=np.float64)

    def backward(g):
        inside = (pred.data > BCE_EPS) & (pred.data < 1 - BCE_EPS)
        gp = (g / n) * (p - t) / (p * (1 - p)) * inside
        return (gp.astype(pred.dtype),)

    return _result(np.asarray(val, dtype=pred.dtype), (pred,), backward)


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean of ``-[t log s(z) + (1-t) log(1-s(z))]`` evaluated stably from logits."""
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - t z
    val = (np.maximum(z, 0) - target * z + np.log1p(np.exp(-np.abs(z)))).mean(dtype=np.float64)
    n = z.size

    def backward(g):
        return (((g / n) * (_sigmoid(z) - target)).astype(z.dtype),)

    return _result(np.asarray(val, dtype=z.dtype), (logits,), backward)


# --------------------------------------------------------------------------
# optimisation

class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient is treated as zero. Any non-finite gradient aborts the
    step before anything is modified.
    """
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# verification

def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
                   seed: int = 0, max_coords: int | None = None):
    """Compare analytic gradients of scalar ``fn(*tensors)`` with central differences.

    ``inputs`` are float64 arrays. For large inputs ``max_coords`` limits the
    number of probed coordinates per input (chosen with ``seed``).

    Returns ``(max_rel_err, (input_index, flat_index))``. The relative error
    of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)

    worst, where = 0.0, (None, None)
    for idx, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig - eps
            fm = float(fn(*[Tensor(a) for a in arrays]).data)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[idx].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst:
                worst, where = err, (idx, int(j))
    return worst, where


# --------------------------------------------------------------------------
# randomness

STREAMS = ("init", "data", "noise")


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def rng_stream(seed: int, name: str, *sub: int) -> np.random.Generator:
    """Independent generator for a named stream derived from one 64-bit seed.

    Extra integers in ``sub`` split the stream further (e.g. per layer or per
    sample index) without disturbing the others.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1),
                                spawn_key=(_stream_key(name), *sub))
    return np.random.Generator(np.random.PCG64(ss))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
