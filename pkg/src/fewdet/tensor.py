"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything is double precision and deterministic: identical inputs produce
bit-identical forward values and gradients. The tape records each primitive
application (op name, inputs, output, closures for replaying the forward pass
and for pushing gradients back), lives for exactly one training step, and is
discarded afterwards.

Ops are module-level functions. They record onto the innermost active
``Tape`` (opened with ``with Tape() as tape:``) whenever any input requires
gradients; with no active tape they are plain numpy computations.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class TensorError(Exception):
    """Base class for tensor-level failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TensorError):
    """A NaN or Inf appeared where only finite values are allowed."""


class CheckpointError(TensorError):
    """A checkpoint document is malformed or from an unknown format version."""


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is populated by :func:`backward` for requires_grad leaves and has
    the same shape as ``data``. All stored values must be finite; non-finite
    values raise :class:`NonFiniteError` at construction time rather than
    propagating silently.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Array | None = None

    @classmethod
    def _wrap(cls, arr: Array, requires_grad: bool = False) -> "Tensor":
        # Fast path for op outputs: takes ownership of a fresh array.
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(self, op, inputs, output, forward_fn, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, so every entry's inputs were
    produced by an earlier entry or are leaves; :func:`backward` walks the
    list in reverse. ``replay`` re-runs every recorded forward closure against
    the inputs' current data, reproducing the recorded outputs bit-identically
    when the leaves are unchanged.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def replay(self) -> None:
        for node in self.nodes:
            node.output.data = node.forward_fn()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(op: str, inputs: Sequence[Tensor], out_data: Array,
            forward_fn: Callable[[], Array],
            backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(op, tuple(inputs), out, forward_fn, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Leaves that participated in the taped computation but do not influence
    the loss receive (accumulate) zeros. Gradients add across fan-out. The
    walk is a single reverse pass over the recorded order, so identical tapes
    give bit-identical gradients.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced:
        raise TensorError("loss tensor was not produced on this tape")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g.reshape(node.output.data.shape))
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig

    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            key = id(t)
            if not t.requires_grad or key in produced or key in seen:
                continue
            seen.add(key)
            contrib = grads.get(key)
            if contrib is None:
                contrib = np.zeros_like(t.data)
            t.grad = contrib if t.grad is None else t.grad + contrib


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to the shape numpy broadcast it up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and broadcasting primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)
    return _record("add", (a, b), a.data + b.data, lambda: a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                -_unbroadcast(g, b.data.shape) if b.requires_grad else None)
    return _record("sub", (a, b), a.data - b.data, lambda: a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _record("mul", (a, b), ad * bd, lambda: a.data * b.data, bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda: -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda: a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)
    return _record("relu", (a,), np.where(mask, a.data, 0.0),
                   lambda: np.maximum(a.data, 0.0), bwd)


def log_shift(a: Tensor, eps: float) -> Tensor:
    """Elementwise ln(eps + a); every eps + a must be strictly positive."""
    shifted = eps + a.data
    if np.any(shifted <= 0.0):
        raise ValueError("log_shift requires eps + value > 0 everywhere")

    def bwd(g):
        return (g / (eps + a.data),)
    return _record("log_shift", (a,), np.log(shifted),
                   lambda: np.log(eps + a.data), bwd)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        return (2.0 * ad * g,)
    return _record("square", (a,), ad * ad, lambda: a.data * a.data, bwd)


def smooth_l1(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise smooth-L1 of (a - b): 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    d = a.data - b.data
    inner = np.abs(d) < 1.0

    def fwd():
        dd = a.data - b.data
        return np.where(np.abs(dd) < 1.0, 0.5 * dd * dd, np.abs(dd) - 0.5)

    def bwd(g):
        dd = np.where(inner, d, np.sign(d))
        return (_unbroadcast(g * dd, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g * dd, b.data.shape) if b.requires_grad else None)
    return _record("smooth_l1", (a, b),
                   np.where(inner, 0.5 * d * d, np.abs(d) - 0.5), fwd, bwd)


# ---------------------------------------------------------------------------
# reductions, shaping, indexing
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda: np.asarray(a.data.sum()), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)
    return _record("mean", (a,), np.asarray(a.data.mean()),
                   lambda: np.asarray(a.data.mean()), bwd)


def sum_axes(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, a.data.shape).copy(),)
    return _record("sum_axes", (a,), a.data.sum(axis=axes),
                   lambda: a.data.sum(axis=axes), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda: a.data.reshape(shape), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)
    return _record("transpose", (a,), a.data.transpose(axes),
                   lambda: a.data.transpose(axes), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(lo, hi)
            pieces.append(g[tuple(key)] if t.requires_grad else None)
        return tuple(pieces)
    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis),
                   lambda: np.concatenate([t.data for t in tensors], axis=axis), bwd)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows (axis 0) or columns (axis 1); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if axis not in (0, 1):
        raise ShapeError("gather supports axis 0 or 1")

    def bwd(g):
        gz = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(gz, idx, g)
        else:
            np.add.at(gz, (slice(None), idx), g)
        return (gz,)
    return _record("gather", (a,), np.take(a.data, idx, axis=axis),
                   lambda: np.take(a.data, idx, axis=axis), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)
    return _record("dot", (a, b), np.asarray(ad @ bd), lambda: np.asarray(a.data @ b.data), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)
    return _record("matmul", (a, b), ad @ bd, lambda: a.data @ b.data, bwd)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; zero-norm slices are an error."""
    norms = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if np.any(norms < 1e-30):
        raise ValueError("cannot L2-normalize a zero-norm slice")
    y = a.data / norms

    def fwd():
        n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
        return a.data / n

    def bwd(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norms,)
    return _record("l2_normalize", (a,), y, fwd, bwd)


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def softmax_spatial(logits: Tensor) -> Tensor:
    """Softmax over every cell of a 2-d map; output sums to 1 over H*W."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_spatial expects a 2-d map, got shape {logits.data.shape}")

    def compute(x: Array) -> Array:
        e = np.exp(x - x.max())
        return e / e.sum()

    p = compute(logits.data)

    def bwd(g):
        return (p * (g - np.sum(g * p)),)
    return _record("softmax_spatial", (logits,), p, lambda: compute(logits.data), bwd)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross entropy with integer targets, log-sum-exp stabilized.

    logits: [N, C]; targets: length-N integer array; returns [N] losses.
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError("softmax_cross_entropy expects [N,C] logits and N targets")
    if t.size and (t.min() < 0 or t.max() >= logits.data.shape[1]):
        raise ShapeError("target class index out of range")

    def compute(x: Array) -> Array:
        m = x.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
        return lse - x[np.arange(x.shape[0]), t]

    def bwd(g):
        x = logits.data
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(x.shape[0]), t] -= 1.0
        return (p * g[:, None],)
    return _record("softmax_cross_entropy", (logits,), compute(logits.data),
                   lambda: compute(logits.data), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps_ln: float = 1e-5) -> Tensor:
    """Normalize a vector to zero mean / unit variance (population), then affine."""
    if x.data.ndim != 1:
        raise ShapeError("layer_norm expects a 1-d vector")
    if gain.data.shape != x.data.shape or bias.data.shape != x.data.shape:
        raise ShapeError("layer_norm gain/bias must match input shape")

    def compute(xv: Array, gv: Array, bv: Array) -> Array:
        m = xv.mean()
        s = 1.0 / np.sqrt(xv.var() + eps_ln)
        return gv * ((xv - m) * s) + bv

    m = x.data.mean()
    s = 1.0 / np.sqrt(x.data.var() + eps_ln)
    xhat = (x.data - m) * s
    out = gain.data * xhat + bias.data
    n = x.data.size

    def bwd(g):
        dxhat = g * gain.data
        dx = s * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean()) \
            if x.requires_grad else None
        dgain = g * xhat if gain.requires_grad else None
        dbias = g.copy() if bias.requires_grad else None
        return (dx, dgain, dbias)

    _ = n  # population variance: the means above already divide by n
    return _record("layer_norm", (x, gain, bias), out,
                   lambda: compute(x.data, gain.data, bias.data), bwd)


def _conv_out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _im2col(xd: Array, kh: int, kw: int, stride: int, pad: int) -> tuple[Array, int, int]:
    c, h, w = xd.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) over a [C,H,W] image, zero padded.

    kernel is [C_out, C_in, kH, kW]; bias, when given, is [C_out]. Output
    spatial extents follow floor((H + 2p - kH)/stride) + 1.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects [C,H,W] input and [Co,Ci,kh,kw] kernel")
    cout, cin, kh, kw = kernel.data.shape
    c, h, w = x.data.shape
    if cin != c:
        raise ShapeError(f"kernel expects {cin} input channels, image has {c}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (kmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def fwd():
        c2, _, _ = _im2col(x.data, kh, kw, stride, padding)
        o = (kernel.data.reshape(cout, -1) @ c2).reshape(cout, ho, wo)
        if bias is not None:
            o = o + bias.data[:, None, None]
        return o

    def bwd(g):
        gm = g.reshape(cout, ho * wo)
        gk = (gm @ cols.T).reshape(kernel.data.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(1, 2)) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w]
        if bias is None:
            return (gx, gk)
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", inputs, out, fwd, bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_momentum_step(params: dict[str, Tensor], velocity: dict[str, Array],
                      lr: float, momentum: float, weight_decay: float = 0.0) -> None:
    """One SGD step: v <- momentum*v + grad + wd*param; param <- param - lr*v.

    ``velocity`` maps the same names to buffers (zero-initialized on first
    use); missing grads count as zero. Updates params and velocity in place.
    """
    for name in params:
        p = params[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeError(f"velocity shape {v.shape} != param shape {p.data.shape} for {name!r}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        v = momentum * v + g + weight_decay * p.data
        params[name].data = p.data - lr * v
        velocity[name] = v


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[dict[str, Tensor]], Tensor],
               point: dict[str, Array], h: float = 1e-3) -> dict[str, float]:
    """Compare taped gradients of ``f`` against central finite differences.

    ``f`` maps a dict of named leaf tensors to a scalar tensor. Returns the
    per-leaf maximum relative error |a - n| / max(1e-8, |a| + |n|). Raises
    NonFiniteError if any probe evaluation is non-finite.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    leaves = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
    with Tape() as tape:
        out = f(leaves)
    if out.data.shape != () and out.data.size != 1:
        raise ShapeError("grad_check target must be scalar-valued")
    backward(tape, out)

    def evaluate(values: dict[str, Array]) -> float:
        probe = {k: Tensor(v) for k, v in values.items()}
        return float(f(probe).data)

    report: dict[str, float] = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(point[name].shape):
            plus = {k: v.copy() for k, v in point.items()}
            minus = {k: v.copy() for k, v in point.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        rel = np.abs(analytic - numeric) / denom
        report[name] = float(rel.max()) if rel.size else 0.0
    return report


def grad_check_sampled(f: Callable[[dict[str, Tensor]], Tensor],
                       point: dict[str, Array], h: float = 1e-3,
                       samples_per_leaf: int = 4,
                       rng: np.random.Generator | None = None) -> dict[str, float]:
    """grad_check restricted to a random coordinate subset of each leaf.

    Full central differences over every weight of a whole detector cost
    minutes; probing a few coordinates per tensor keeps composite-loss checks
    inside an interactive budget while still touching every leaf.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    leaves = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
    with Tape() as tape:
        out = f(leaves)
    if out.data.shape != () and out.data.size != 1:
        raise ShapeError("grad_check target must be scalar-valued")
    backward(tape, out)

    def evaluate(values: dict[str, Array]) -> float:
        probe = {k: Tensor(v) for k, v in values.items()}
        return float(f(probe).data)

    report: dict[str, float] = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = point[name].reshape(-1)
        n = min(samples_per_leaf, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False) if n else []
        worst = 0.0
        for c in coords:
            idx = np.unravel_index(int(c), point[name].shape)
            plus = {k: v.copy() for k, v in point.items()}
            minus = {k: v.copy() for k, v in point.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, Tensor | Array], meta: dict | None = None) -> None:
    """Write named float64 arrays as versioned JSON.

    Floats are emitted in shortest round-trip decimal form, so a load followed
    by a save is value-exact for finite doubles.
    """
    doc: dict = {"format_version": CHECKPOINT_FORMAT_VERSION, "arrays": {}}
    for name in sorted(arrays):
        a = arrays[name]
        arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
        doc["arrays"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, allow_nan=False, separators=(",", ":"))


def load_arrays(path) -> tuple[dict[str, Array], dict]:
    """Read a checkpoint written by :func:`save_arrays`; returns (arrays, meta)."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {doc.get('format_version')!r}"
            if isinstance(doc, dict) else "checkpoint is not a JSON object")
    arrays: dict[str, Array] = {}
    for name, entry in doc.get("arrays", {}).items():
        shape = tuple(entry["shape"])
        flat = np.asarray(entry["data"], dtype=np.float64)
        if flat.size != math.prod(shape):
            raise CheckpointError(f"array {name!r}: {flat.size} values for shape {shape}")
        if not np.all(np.isfinite(flat)):
            raise CheckpointError(f"array {name!r} holds non-finite values")
        arrays[name] = flat.reshape(shape)
    return arrays, doc.get("meta", {})
