"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array operation used by the model lives here. A ``Tensor`` wraps a
numpy array, records the tensors it was computed from, and carries a closure
that pushes its output gradient back to those parents. ``backward`` walks the
graph in reverse topological order.

Operations follow numpy broadcasting; gradients are summed back down to the
operand shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

DTYPE = np.float64


class Rng:
    """Seeded random stream (PCG64). Same seed and call sequence, same draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream derived from (seed, keys); does not advance self."""
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in keys]])
        return Rng(int(ss.generate_state(2, dtype=np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self):
        backward(self)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        a = self

        def bw(g):
            a._accum(-g)

        return Tensor._make(-a.data, (a,), bw, "neg")

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out / b.data, b.shape))

        return Tensor._make(out, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros(a.shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._make(a.data[idx], (a,), bw, "getitem")

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bw(g):
            a._accum(g.reshape(a.shape))

        return Tensor._make(a.data.reshape(shape), (a,), bw, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        a = self

        def bw(g):
            a._accum(g.transpose(inv))

        return Tensor._make(a.data.transpose(axes), (a,), bw, "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise -------------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)

        def bw(g):
            a._accum(g * out)

        return Tensor._make(out, (a,), bw, "exp")

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            a._accum(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bw, "log")

    def tanh(self) -> "Tensor":
        return elementwise("tanh", self)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor.

    Gradients add onto whatever is already stored; call ``zero_grad`` between
    steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
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
    # interior gradients are recomputed each call; only leaves accumulate
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- functional operations -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (both operands at least 2-D)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def elementwise(name: str, x: Tensor) -> Tensor:
    """Apply ``tanh``, ``relu`` or ``sigmoid`` elementwise."""
    if name == "tanh":
        out = np.tanh(x.data)
        local = lambda: 1.0 - out * out  # noqa: E731
    elif name == "relu":
        out = np.maximum(x.data, 0.0)
        local = lambda: (x.data > 0).astype(DTYPE)  # noqa: E731
    elif name == "sigmoid":
        out = _sigmoid(x.data)
        local = lambda: out * (1.0 - out)  # noqa: E731
    else:
        raise ConfigError(f"unknown elementwise op {name!r}")

    def bw(g):
        x._accum(g * local())

    return Tensor._make(out, (x,), bw, name)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor._make(out, (x,), bw, "log_softmax")


def frobenius_norm(x: Tensor, axes=(-2, -1)) -> Tensor:
    """sqrt of the sum of squares over ``axes``; subgradient 0 at the origin."""
    n = np.sqrt((x.data * x.data).sum(axis=axes))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        x._accum(x.data * np.expand_dims(scale, axes))

    return Tensor._make(n, (x,), bw, "fro")


def sorted_sum(x: Tensor, axis: int = 0) -> Tensor:
    """Sum along ``axis`` after sorting, so the result is independent of input order."""
    out = np.sort(x.data, axis=axis).sum(axis=axis)

    def bw(g):
        x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return Tensor._make(out, (x,), bw, "sorted_sum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def dropout(x: Tensor, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an Rng")
    mask = (rng.random(x.shape) >= p).astype(DTYPE) / (1.0 - p)
    return x * Tensor(mask)


def grouped_conv2d(x: Tensor, weight: Tensor, groups: int, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution with channel groups.

    x is ``C_in x H x W`` or ``N x C_in x H x W``; weight is
    ``C_out x (C_in/groups) x k x k``. Output group j reads only input group j.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"grouped_conv2d expects 3/4-D input and 4-D weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = xd.shape
    c_out, cg, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise DimensionError(f"weight expects {cg} channels per group, input has {c_in // groups}")
    og = c_out // groups
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = xp.reshape(n, groups, cg, hp, wp)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride]
    # G x (N*H'*W') x (Cg*kh*kw): one gemm per group
    kdim = cg * kh * kw
    cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, kdim)
    wmat = weight.data.reshape(groups, og, kdim).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # G x NHW x og
    out = out.reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, c_out, ho, wo)
    if single:
        out = out[0]

    def bw(g):
        gd = g[None] if single else g
        gm = gd.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gm)  # G x K x og
            weight._accum(gw.transpose(0, 2, 1).reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(gm, wmat.transpose(0, 2, 1)).reshape(groups, n, ho, wo, cg, kh, kw)
            gx = np.zeros((n, groups, cg, hp, wp), dtype=DTYPE)
            for di in range(kh):
                for dj in range(kw):
                    gx[:, :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[
                        ..., di, dj
                    ].transpose(1, 0, 4, 2, 3)
            gx = gx.reshape(n, c_in, hp, wp)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accum(gx[0] if single else gx)

    return Tensor._make(out, (x, weight), bw, "grouped_conv2d")


def segment_sum(x: Tensor, bounds: Sequence[int]) -> Tensor:
    """Per-segment sums along axis 0, each over sorted terms.

    ``bounds`` are row offsets ``[0, e1, e2, ..., N]``; the result has one row
    per segment. Sorting makes each segment's sum independent of row order.
    """
    bounds = [int(b) for b in bounds]
    out = np.stack([np.sort(x.data[lo:hi], axis=0).sum(axis=0) for lo, hi in zip(bounds[:-1], bounds[1:])])
    sizes = np.diff(bounds)

    def bw(g):
        x._accum(np.repeat(g, sizes, axis=0))

    return Tensor._make(out, (x,), bw, "segment_sum")


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 100,
    h: float = 1e-6,
    rng: Rng | None = None,
    floor: float = 1e-8,
) -> dict:
    """Compare analytic gradients with central finite differences.

    ``fn`` rebuilds the scalar loss from the current parameter values.
    When ``n_coords`` allows, every tensor contributes at least one
    coordinate; the rest are sampled uniformly over all entries. The relative
    error is |a - n| / max(|a|, |n|, floor); ``floor`` only matters for
    gradients below finite-difference resolution.
    """
    rng = rng or Rng(0)
    zero_grad(params)
    loss = fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n = min(n_coords, total)
    # one coordinate per tensor first (when the budget allows), then uniform
    picks = set()
    if n >= len(params):
        picks = {int(offsets[k] + rng.integers(0, sizes[k])) for k in range(len(params))}
    for i in rng.permutation(total):
        if len(picks) >= n:
            break
        picks.add(int(i))
    worst = 0.0
    records = []
    for flat in sorted(int(i) for i in picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[k], params[k].shape)
        p = params[k]
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = fn().item()
        p.data[idx] = orig - h
        fm = fn().item()
        p.data[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[k][idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, rel)
        records.append((k, idx, ana, num, rel))
    zero_grad(params)
    return {"max_rel_error": worst, "checked": len(records), "records": records}
