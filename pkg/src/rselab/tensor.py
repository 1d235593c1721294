"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 when a verification
routine needs the headroom). A Tape records every primitive applied while
recording is on; backward() walks the record in reverse and accumulates
gradients for every tensor that was touched, including network inputs, so
both weight gradients (training) and input gradients (attacks) fall out of
the same machinery.

Tensors are treated as immutable once created; primitives always allocate
fresh outputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_ids = itertools.count()


class Tensor:
    """Value + optional link to the tape that produced it."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data, tape: "Tape | None" = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape = tape
        self.tid = next(_ids)
        if tape is not None:
            tape.touch(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class TapeNode:
    out_tid: int
    in_tids: tuple
    backward_fn: object  # grad_out -> tuple of grads aligned with in_tids


class Tape:
    """Append-only record of primitives; single-owner, not thread-shared."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._shapes: dict[int, tuple] = {}
        self._dtypes: dict[int, np.dtype] = {}
        self._consumed = False

    def touch(self, t: Tensor):
        self._shapes[t.tid] = t.data.shape
        self._dtypes[t.tid] = t.data.dtype

    def watch(self, t: Tensor) -> Tensor:
        """Register an existing tensor as a leaf on this tape."""
        if t.tape is None:
            t.tape = self
        elif t.tape is not self:
            raise UsageError("tensor already belongs to a different tape")
        self.touch(t)
        return t

    def record(self, node: TapeNode):
        self.nodes.append(node)

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.gradients.get(t.tid)
        if g is None:
            return np.zeros(self._shapes.get(t.tid, t.data.shape), dtype=t.data.dtype)
        return g

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._consumed:
            raise UsageError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        if loss.tape is not self:
            raise UsageError("loss tensor is not on this tape")
        self._consumed = True
        grads = self.gradients
        grads[loss.tid] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = grads.get(node.out_tid)
            if gout is None:
                continue
            gins = node.backward_fn(gout)
            for tid, g in zip(node.in_tids, gins):
                if g is None:
                    continue
                acc = grads.get(tid)
                grads[tid] = g if acc is None else acc + g
        return grads


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise UsageError("operands live on different tapes")
    return tape


def _make(data, tape, inputs, backward_fn) -> Tensor:
    out = Tensor(data, tape=tape, dtype=data.dtype)
    if tape is not None:
        tape.record(TapeNode(out.tid, tuple(t.tid for t in inputs), backward_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    ash, bsh = a.data.shape, b.data.shape
    return _make(a.data + b.data, tape, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    ash, bsh = a.data.shape, b.data.shape
    return _make(a.data - b.data, tape, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, tape, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    tape = _tape_of(a)
    cc = a.data.dtype.type(c)
    return _make(a.data * cc, tape, (a,), lambda g: (g * cc,))


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError("matmul expects rank-2 operands")
    tape = _tape_of(a, b)
    ad, bd = a.data, b.data
    if transpose_b:
        out = ad @ bd.T
        back = lambda g: (g @ bd, g.T @ ad)
    else:
        out = ad @ bd
        back = lambda g: (g @ bd.T, ad.T @ g)
    return _make(out, tape, (a, b), back)


def relu(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.data.dtype.type(0)), tape, (a,),
                 lambda g: (g * mask,))


def brelu(a: Tensor, bound: float = 1.0) -> Tensor:
    """Bounded ReLU: clamp to [0, bound]. Bound matches the [0,1] pixel range."""
    tape = _tape_of(a)
    mask = (a.data > 0) & (a.data < bound)
    return _make(np.clip(a.data, 0, bound), tape, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    ad = a.data
    return _make(np.log(ad), tape, (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    tape = _tape_of(a)
    out_data = np.exp(a.data)
    return _make(out_data, tape, (a,), lambda g: (g * out_data,))


def reshape(a: Tensor, shape) -> Tensor:
    tape = _tape_of(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), tape, (a,), lambda g: (g.reshape(old),))


def sum_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    ash = a.data.shape

    def back(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ash).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), tape, (a,), back)


def max_reduce(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient flows to the first maximal element."""
    tape = _tape_of(a)
    ad = a.data
    if axis is None:
        flat_idx = int(np.argmax(ad))
        out = ad.max()

        def back(g):
            ga = np.zeros_like(ad)
            ga.flat[flat_idx] = g if np.ndim(g) == 0 else g.item()
            return (ga,)

        return _make(np.asarray(out), tape, (a,), back)

    idx = np.argmax(ad, axis=axis)
    out = ad.max(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return (ga,)

    return _make(out, tape, (a,), back)


def softmax(z: Tensor) -> Tensor:
    """Row-wise stable softmax over the last axis."""
    tape = _tape_of(z)
    zt = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(zt)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, tape, (z,), back)


def softmax_temperature(z: Tensor, temperature: float) -> Tensor:
    """softmax(z / T); T>1 softens the distribution (distillation)."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    tape = _tape_of(z)
    inv_t = 1.0 / float(temperature)
    zt = z.data * inv_t
    zt = zt - zt.max(axis=-1, keepdims=True)
    e = np.exp(zt)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return ((p * (g - dot)) * z.data.dtype.type(inv_t),)

    return _make(p, tape, (z,), back)


def neg_log_likelihood(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log p[y] over the batch. probs is (N, K) or (K,)."""
    tape = _tape_of(probs)
    p = probs.data
    squeeze = p.ndim == 1
    p2 = p[None, :] if squeeze else p
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = p2.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= k:
        raise ConfigurationError("labels inconsistent with probability shape")
    picked = p2[np.arange(n), y]
    out = np.asarray(-np.log(picked).mean(), dtype=p.dtype)

    def back(g):
        gp = np.zeros_like(p2)
        gp[np.arange(n), y] = -float(g) / (n * picked)
        return (gp[0] if squeeze else gp,)

    return _make(out, tape, (probs,), back)


def soft_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean -sum_k t_k log p_k against fixed soft targets (distillation)."""
    tape = _tape_of(probs)
    p = probs.data
    t = np.asarray(targets, dtype=p.dtype)
    if t.shape != p.shape:
        raise ConfigurationError("soft targets must match probability shape")
    n = p.shape[0] if p.ndim == 2 else 1
    out = np.asarray(-(t * np.log(p)).sum() / n, dtype=p.dtype)

    def back(g):
        return ((-float(g) / n) * t / p,)

    return _make(out, tape, (probs,), back)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW x OIHW cross-correlation, zero padding, no dilation/groups."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError("conv2d expects NCHW input and OIHW kernel")
    if stride < 1:
        raise ConfigurationError("conv2d stride must be >= 1")
    n, c, h, w = x.data.shape
    o, i, kh, kw = kernel.data.shape
    if i != c:
        raise ConfigurationError(f"conv2d channel mismatch: input {c}, kernel {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError("conv2d kernel larger than padded input")
    tape = _tape_of(x, kernel)
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        go = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gk = (go.T @ cols).reshape(o, c, kh, kw)
        gcols = go @ kmat
        gwin = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += gwin[..., di, dj]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gk)

    return _make(out, tape, (x, kernel), back)


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Direct quadruple-loop definition; the oracle for the fast path."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    p, s = padding, stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    patch = xp[bi, :, yi * s:yi * s + kh, xi * s:xi * s + kw]
                    out[bi, oi, yi, xi] = (patch * kernel[oi]).sum()
    return out


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling (kernel == stride == size)."""
    if x.data.ndim != 4:
        raise ConfigurationError("maxpool2d expects NCHW input")
    n, c, h, w = x.data.shape
    if h % size or w % size:
        raise ConfigurationError(f"maxpool2d size {size} does not divide {h}x{w}")
    tape = _tape_of(x)
    ho, wo = h // size, w // size
    win = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, ho, wo, size * size)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _make(out, tape, (x,), back)


# ---------------------------------------------------------------------------
# dispatch + gradient checking

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "brelu": brelu,
    "max_reduce": max_reduce,
    "sum_reduce": sum_reduce,
    "log": log,
    "exp": exp,
    "softmax": softmax,
    "neg_log_likelihood": neg_log_likelihood,
    "softmax_temperature": softmax_temperature,
    "maxpool2d": maxpool2d,
    "reshape": reshape,
}


def primitive_forward(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Uniform entry point over the primitive set (used by tests and tooling)."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ConfigurationError(f"unknown primitive kind '{kind}'")
    return fn(*inputs, **(attrs or {}))


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst: tuple = ()  # (input index, flat element index)
    per_input: list = field(default_factory=list)


def grad_check(f, points, step: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f against central differences.

    Runs in float64 regardless of the caller's dtype; `points` is a Tensor or
    a list of Tensors, differentiated jointly.
    """
    if isinstance(points, Tensor):
        points = [points]
    vals = [p.data.astype(np.float64) for p in points]
    if step <= 0:
        raise UsageError("grad_check step must be positive")

    tape = Tape()
    leaves = [tape.watch(Tensor(v, dtype=np.float64)) for v in vals]
    out = f(*leaves)
    if out.data.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = [tape.grad(t) for t in leaves]

    max_err = 0.0
    worst = ()
    per_input = []
    for i, v in enumerate(vals):
        num = np.zeros_like(v)
        flat = v.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = f(*[Tensor(x, dtype=np.float64) for x in vals]).data
            flat[j] = orig - step
            lo = f(*[Tensor(x, dtype=np.float64) for x in vals]).data
            flat[j] = orig
            nflat[j] = (float(hi) - float(lo)) / (2 * step)
        a = analytic[i]
        if not np.all(np.isfinite(a)):
            bad = int(np.argmin(np.isfinite(a).reshape(-1)))
            raise NumericError(f"non-finite analytic gradient at input {i}, element {bad}")
        if not np.all(np.isfinite(num)):
            bad = int(np.argmin(np.isfinite(num).reshape(-1)))
            raise NumericError(f"non-finite numeric gradient at input {i}, element {bad}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        rel = np.abs(a - num) / denom
        # Absolute agreement at tiny magnitudes counts as a match.
        rel[np.abs(a - num) < 1e-9] = 0.0
        err = float(rel.max()) if rel.size else 0.0
        per_input.append(err)
        if err > max_err:
            max_err = err
            worst = (i, int(np.argmax(rel)))
    return GradCheckReport(max_rel_err=max_err, tol=tol, passed=max_err <= tol,
                           worst=worst, per_input=per_input)
