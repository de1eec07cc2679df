"""Minimal reverse-mode autodiff over dense NCHW numpy arrays.

Every op is a plain function that takes ``Tensor`` inputs and returns a new
``Tensor`` carrying a closure for its vector-Jacobian product. ``backward``
walks the recorded graph once in reverse topological order and then tears it
down, so a graph cannot be replayed.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "record",
    "conv2d",
    "leaky_relu",
    "sigmoid",
    "activation",
    "upsample_nearest2x",
    "add",
    "sub",
    "mul",
    "div",
    "abs_diff",
    "elementwise",
    "reduce_mean",
    "batch_mean",
    "concat_channels",
    "scale_shift",
    "clamp",
    "log",
    "avg_pool3x3_valid",
    "backward",
    "grad_check",
    "GradCheckReport",
]

LEAKY_SLOPE = 0.2


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on misuse of a recorded graph (non-scalar loss, replay)."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A value in the autodiff graph.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape, initialised to zeros and accumulated into by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensors have at most 4 dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same data, outside any graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route through scale_shift
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale_shift(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scale_shift(self, 1.0, -float(other))

    def __rsub__(self, other):
        return scale_shift(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale_shift(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale_shift(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        return scale_shift(self, -1.0, 0.0)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, attaching it to the graph when any parent needs grad.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that do not require grad).
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW input, OIHW weight."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1:
        raise ValueError("conv2d: stride must be positive")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hspan : stride, j : j + wspan : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    return record("conv2d", out, (x, weight, bias), _bw)


# ---------------------------------------------------------------------------
# elementwise


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def _bw(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return record("leaky_relu", out, (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids overflow in exp for large |x|
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def _bw(g):
        return (g * out * (1 - out),)

    return record("sigmoid", out, (x,), _bw)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _bw(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", out, (x,), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def _bw(g):
        gb = -g * out / b.data if b.requires_grad else None
        return g / b.data, gb

    return record("div", out, (a, b), _bw)


def abs_diff(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("abs_diff", a, b)
    diff = a.data - b.data
    sign = np.sign(diff)
    return record("abs_diff", np.abs(diff), (a, b), lambda g: (g * sign, -g * sign))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "abs_diff": abs_diff}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def scale_shift(x: Tensor, scale: float, shift: float) -> Tensor:
    s = x.dtype.type(scale)
    out = x.data * s + x.dtype.type(shift)
    return record("scale_shift", out, (x,), lambda g: (g * s,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError("clamp: lo > hi")
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", out, (x,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value; clamp the input first")
    return record("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# reductions and pooling


def reduce_mean(x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """Mean over every element, or over elements where ``mask`` is 1.

    A mask of shape [B,1,H,W] is broadcast across the channels of a
    [B,C,H,W] input, so the divisor counts pixels times channels.
    """
    if mask is None:
        n = x.data.size
        out = np.asarray(x.data.sum() / n, dtype=x.dtype)
        return record("reduce_mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))

    m = mask.data
    if m.shape != x.shape:
        if m.ndim != x.data.ndim or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:] or m.shape[1] != 1:
            raise ValueError(f"reduce_mean: mask shape {m.shape} incompatible with {x.shape}")
        m = np.broadcast_to(m, x.shape)
    if np.any((m != 0) & (m != 1)):
        raise ValueError("reduce_mean: mask must be binary")
    n = m.sum(dtype=np.float64)
    if n == 0:
        raise ValueError("reduce_mean: empty mask")
    mm = m.astype(x.dtype)
    out = np.asarray((x.data * mm).sum() / n, dtype=x.dtype)
    return record("reduce_mean", out, (x,), lambda g: ((g / n * mm).astype(x.dtype),))


def batch_mean(x: Tensor) -> Tensor:
    """Mean over all axes except the first: [B,...] -> [B]."""
    b = x.shape[0]
    n = x.data[0].size
    out = x.data.reshape(b, -1).sum(axis=1) / n
    out = out.astype(x.dtype)

    def _bw(g):
        return (np.broadcast_to((g / n).reshape((b,) + (1,) * (x.data.ndim - 1)), x.shape).astype(x.dtype),)

    return record("batch_mean", out, (x,), _bw)


def avg_pool3x3_valid(x: Tensor) -> Tensor:
    """3x3 box mean, stride 1, no padding: [B,C,H,W] -> [B,C,H-2,W-2]."""
    if x.data.ndim != 4 or x.shape[2] < 3 or x.shape[3] < 3:
        raise ValueError(f"avg_pool3x3_valid needs a 4-D input at least 3x3, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out = sliding_window_view(x.data, (3, 3), axis=(2, 3)).sum(axis=(4, 5)) / x.dtype.type(9)

    def _bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        g9 = g / g.dtype.type(9)
        for i in range(3):
            for j in range(3):
                gx[:, :, i : i + h - 2, j : j + w - 2] += g9
        return (gx,)

    return record("avg_pool3x3_valid", out, (x,), _bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The graph is consumed: interior nodes drop their closures and parents,
    and a second call on the same loss raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss._backward is None:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.grad is not None:
                node.grad += g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------------------
# finite-difference checking


class GradCheckReport:
    __slots__ = ("max_rel_err", "passed", "worst_input", "kinks")

    def __init__(self, max_rel_err: float, passed: bool, worst_input: int, kinks=()):
        self.max_rel_err = max_rel_err
        self.passed = passed
        self.worst_input = worst_input
        self.kinks = list(kinks)  # (input index, flat coordinate) excluded as non-smooth

    @property
    def pass_(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, pass={self.passed}, kinks={len(self.kinks)})"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_coords: Optional[int] = None,
    seed: int = 0,
    kink_tol: Optional[float] = None,
    coords: Optional[Sequence[tuple[int, int]]] = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*tensors)`` with central differences.

    Inputs are promoted to float64. ``max_coords`` caps how many coordinates
    per input are perturbed (chosen with a seeded RNG); ``None`` checks all.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).

    Piecewise-linear functions (leaky_relu, abs_diff, bilinear floor) have
    kinks; a central difference that straddles one measures a blend of two
    slopes. With ``kink_tol`` set, a coordinate whose one-sided slopes differ
    by more than that relative amount is not scored but listed in
    ``report.kinks`` so the caller can re-check it with a smaller step via
    ``coords`` (explicit (input index, flat coordinate) pairs).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def f_at(values: list[np.ndarray]) -> float:
        return float(fn(*[Tensor(v) for v in values]).data)

    if coords is None:
        rng = np.random.default_rng(seed)
        coords = []
        for k, base in enumerate(arrays):
            flat_idx = np.arange(base.size)
            if max_coords is not None and base.size > max_coords:
                flat_idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
            coords += [(k, int(i)) for i in flat_idx]

    f0 = f_at(arrays) if kink_tol is not None else 0.0
    worst = 0.0
    worst_idx = -1
    kinks = []
    for k, idx in coords:
        pos = np.unravel_index(idx, arrays[k].shape)
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[k][pos] += step
        minus[k][pos] -= step
        fp, fm = f_at(plus), f_at(minus)
        if kink_tol is not None:
            right, left = (fp - f0) / step, (f0 - fm) / step
            if abs(right - left) / max(abs(right), abs(left), 1e-8) > kink_tol:
                kinks.append((k, idx))
                continue
        numeric = (fp - fm) / (2 * step)
        a = analytic[k][pos]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst, worst_idx = rel, k
    return GradCheckReport(worst, worst < tol, worst_idx, kinks)
