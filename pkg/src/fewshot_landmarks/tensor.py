"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every primitive defines its vector-Jacobian product in terms of other
primitives. Running a backward sweep while a tape is recording therefore
appends the sweep itself to that tape, and the resulting gradients can be
differentiated again. That is all the machinery needed for meta-gradients
through unrolled SGD steps.

Typical use::

    with Tape():
        loss = mean(relu(matmul(x, w)))
        (gw,) = gradients(loss, [w])
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class Tensor:
    """A float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_STACK: list = []


class Tape:
    """Append-only record of primitive applications.

    Entering the tape makes it the recording target; tapes nest, and the
    innermost one receives new nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.nesting_depth = 0

    def __enter__(self) -> "Tape":
        self.nesting_depth = len([t for t in _STACK if isinstance(t, Tape)])
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording; ops inside produce constants."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


@contextlib.contextmanager
def _recording_on(tape: Tape) -> Iterator[None]:
    _STACK.append(tape)
    try:
        yield
    finally:
        _STACK.pop()


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite output")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(Node(op, inputs, out, vjp))
    return out


def _shape_error(op: str, a: Tensor, b: Tensor, why: str = "incompatible") -> ShapeError:
    return ShapeError(f"{op}: {why} shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                sum_to(g, b.shape) if need[1] else None)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                scale(sum_to(g, b.shape), -1.0) if need[1] else None)

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, need):
        return (sum_to(mul(g, b), a.shape) if need[0] else None,
                sum_to(mul(g, a), b.shape) if need[1] else None)

    return _emit("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def vjp(g, need):
        ga = sum_to(div(g, b), a.shape) if need[0] else None
        gb = None
        if need[1]:
            gb = scale(sum_to(div(mul(g, a), mul(b, b)), b.shape), -1.0)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _emit("div", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g, need):
        return (scale(g, c),)

    return _emit("scale", a.data * c, (a,), vjp)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a, b) from None

    def vjp(g, need):
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if need[0] else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if need[1] else None
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g, need):
        if not keepdims and axis is not None:
            g = reshape(g, np.sum(a.data, axis=axis, keepdims=True).shape)
        elif not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def sum_to(a, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1)
    out = np.sum(a.data, axis=axes, keepdims=True)
    out = out.reshape(out.shape[lead:]) if lead else out
    if out.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")

    def vjp(g, need):
        return (broadcast_to(g, a.shape),)

    return _emit("sum_to", out, (a,), vjp)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def vjp(g, need):
        return (sum_to(g, a.shape),)

    return _emit("broadcast_to", out, (a,), vjp)


def mean(a) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    a = as_tensor(a)
    n = a.size

    def vjp(g, need):
        return (broadcast_to(scale(g, 1.0 / n), a.shape),)

    return _emit("mean", np.asarray(a.data.mean()), (a,), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    if out.shape == a.shape:
        return a

    def vjp(g, need):
        return (reshape(g, a.shape),)

    return _emit("reshape", out, (a,), vjp)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inverse),)

    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    step = (a.data > 0).astype(np.float64)

    def vjp(g, need):
        return (mul(g, Tensor(step)),)

    return _emit("relu", a.data * step, (a,), vjp)


def avgpool2(a) -> Tensor:
    """2x2 average pooling, stride 2, over the last two axes."""
    a = as_tensor(a)
    *lead, H, W = a.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2: spatial size {(H, W)} not divisible by 2")
    out = a.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def vjp(g, need):
        return (scale(upsample2(g), 0.25),)

    return _emit("avgpool2", out, (a,), vjp)


def upsample2(a) -> Tensor:
    """Nearest-neighbour 2x upsampling; adjoint of 4 * avgpool2."""
    a = as_tensor(a)
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)

    def vjp(g, need):
        return (scale(avgpool2(g), 4.0),)

    return _emit("upsample2", out, (a,), vjp)


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data, False
    if x.ndim == 3:
        return x.data[None], True
    raise ShapeError(f"{op}: expected (B,C,H,W) or (C,H,W), got {x.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches of the zero-padded input."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((B, C, 9, H, W))
    for u in range(3):
        for v in range(3):
            cols[:, :, 3 * u + v] = xp[:, :, u:u + H, v:v + W]
    return cols.reshape(B, C * 9, H * W)


def conv2d_same(x, k) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero padding 1.

    ``x`` is (B, C, H, W) or (C, H, W); ``k`` is (O, C, 3, 3).
    """
    x, k = as_tensor(x), as_tensor(k)
    xb, squeeze = _as_batch(x, "conv2d_same")
    if k.ndim != 4 or k.shape[2:] != (3, 3) or k.shape[1] != xb.shape[1]:
        raise _shape_error("conv2d_same", x, k)
    B, C, H, W = xb.shape
    O = k.shape[0]
    out = np.matmul(k.data.reshape(O, C * 9), _im2col(xb)).reshape(B, O, H, W)
    if squeeze:
        out = out[0]

    def vjp(g, need):
        gx = conv2d_same(g, flip_kernel(k)) if need[0] else None
        gk = conv2d_kgrad(x, g) if need[1] else None
        return gx, gk

    return _emit("conv2d_same", out, (x, k), vjp)


def flip_kernel(k) -> Tensor:
    """Swap in/out channels and rotate 180 degrees; an involution."""
    k = as_tensor(k)

    def vjp(g, need):
        return (flip_kernel(g),)

    out = np.ascontiguousarray(k.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return _emit("flip_kernel", out, (k,), vjp)


def conv2d_kgrad(x, g) -> Tensor:
    """Kernel gradient of ``conv2d_same``: correlates input with output cotangent."""
    x, g = as_tensor(x), as_tensor(g)
    xb, _ = _as_batch(x, "conv2d_kgrad")
    gb, _ = _as_batch(g, "conv2d_kgrad")
    if xb.shape[0] != gb.shape[0] or xb.shape[2:] != gb.shape[2:]:
        raise _shape_error("conv2d_kgrad", x, g)
    B, C, H, W = xb.shape
    O = gb.shape[1]
    cols = _im2col(xb)
    out = np.tensordot(gb.reshape(B, O, H * W), cols, axes=([0, 2], [0, 2]))
    out = out.reshape(O, C, 3, 3)

    def vjp(gk, need):
        gx = conv2d_same(g, flip_kernel(gk)) if need[0] else None
        gg = conv2d_same(x, gk) if need[1] else None
        return gx, gg

    return _emit("conv2d_kgrad", out, (x, g), vjp)


def spatial_softmax(a) -> Tensor:
    """Softmax over the last two (spatial) axes, per leading index."""
    a = as_tensor(a)
    if a.ndim not in (3, 4):
        raise ShapeError(f"spatial_softmax: expected rank 3 (or batched 4), got {a.shape}")
    z = a.data - a.data.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    y_data = e / e.sum(axis=(-2, -1), keepdims=True)
    holder: list[Tensor] = []

    def vjp(g, need):
        y = holder[0]
        gy = mul(g, y)
        return (sub(gy, mul(y, sum(gy, axis=(-2, -1), keepdims=True))),)

    out = _emit("spatial_softmax", y_data, (a,), vjp)
    holder.append(out)
    return out


def masked_select(a, mask: np.ndarray) -> Tensor:
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_select: mask {mask.shape} vs tensor {a.shape}")

    def vjp(g, need):
        return (masked_scatter(g, mask),)

    return _emit("masked_select", a.data[mask], (a,), vjp)


def masked_scatter(v, mask: np.ndarray) -> Tensor:
    """Place the 1-D ``v`` into a zero array at the true entries of ``mask``."""
    v = as_tensor(v)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape)
    out[mask] = v.data

    def vjp(g, need):
        return (masked_select(g, mask),)

    return _emit("masked_scatter", out, (v,), vjp)


def xent_heatmap(pred, target) -> Tensor:
    """Cross-entropy of spatial distributions against binary target masks.

    ``target`` holds one 1 per active channel; all-zero channels are ignored.
    Returns ``-(1/n_active) * sum(log pred[target == 1])``.
    """
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise _shape_error("xent_heatmap", pred, Tensor(t))
    mask = t > 0.5
    n_active = int(mask.sum())
    if n_active == 0:
        raise ValueError("xent_heatmap: target has no active channel")
    with np.errstate(divide="ignore"):
        out = -np.log(pred.data[mask]).sum() / n_active

    def vjp(g, need):
        picked = masked_select(pred, mask)
        coeff = scale(g, -1.0 / n_active)
        return (masked_scatter(div(broadcast_to(coeff, picked.shape), picked), mask),)

    return _emit("xent_heatmap", np.asarray(out), (pred,), vjp)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("mse", pred, target)
    n = pred.size

    def vjp(g, need):
        d = mul(broadcast_to(scale(g, 2.0 / n), pred.shape), sub(pred, target))
        return (d if need[0] else None, scale(d, -1.0) if need[1] else None)

    return _emit("mse", np.asarray(np.mean((pred.data - target.data) ** 2)), (pred, target), vjp)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# reverse sweep


def gradients(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``wrt``.

    Tensors not reachable from ``loss`` get zero gradients. With
    ``create_graph`` the sweep is recorded onto the loss's tape, so the
    returned gradients can themselves be differentiated.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    zeros = [Tensor(np.zeros(t.shape)) for t in wrt]
    tape = loss.tape
    if tape is None or not loss.requires_grad:
        return zeros

    # only walk nodes that sit on a path from some wrt tensor
    live = {id(t) for t in wrt}
    try:
        end = _index_of(tape, loss)
    except LookupError:
        return zeros
    path: list[Node] = []
    for node in tape.nodes[: end + 1]:
        if any(id(t) in live for t in node.inputs):
            live.add(id(node.out))
            path.append(node)
    if id(loss) not in live:
        return zeros

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    ctx = _recording_on(tape) if create_graph else no_record()
    with ctx:
        for node in reversed(path):
            g = grads.get(id(node.out))
            if g is None:
                continue
            need = tuple(id(t) in live for t in node.inputs)
            for inp, gi, wanted in zip(node.inputs, node.vjp(g, need), need):
                if not wanted or gi is None:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else add(grads[key], gi)
    out = []
    for t, z in zip(wrt, zeros):
        g = grads.get(id(t), z)
        out.append(g if g.shape == t.shape else reshape(g, t.shape))
    return out


def _index_of(tape: Tape, t: Tensor) -> int:
    # outputs are appended in creation order, so search from the end
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].out is t:
            return i
    raise LookupError("tensor not on tape")


# ---------------------------------------------------------------------------
# parameter sets


class ParamSet:
    """Ordered name -> Tensor map of trainable tensors."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] | dict | None = None):
        self._d: dict[str, Tensor] = {}
        if entries is not None:
            items = entries.items() if isinstance(entries, dict) else entries
            for name, t in items:
                if name in self._d:
                    raise KeyError(f"duplicate parameter name {name!r}")
                self._d[name] = as_tensor(t)

    def __getitem__(self, name: str) -> Tensor:
        return self._d[name]

    def __contains__(self, name: str) -> bool:
        return name in self._d

    def __iter__(self):
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._d.items())
        return f"ParamSet({inner})"

    def names(self) -> list[str]:
        return list(self._d)

    def items(self):
        return self._d.items()

    def values(self) -> list[Tensor]:
        return list(self._d.values())

    def num_params(self) -> int:
        return int(np.sum([t.size for t in self._d.values()]))

    def trainable(self) -> "ParamSet":
        """Fresh leaf tensors (same values) that the tape will track."""
        return ParamSet((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self._d.items())

    def detach(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data)) for k, v in self._d.items())

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data.copy())) for k, v in self._d.items())

    def flatten(self) -> np.ndarray:
        if not self._d:
            return np.zeros(0)
        return np.concatenate([v.data.ravel() for v in self._d.values()])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        out, i = [], 0
        for k, v in self._d.items():
            out.append((k, Tensor(np.asarray(flat[i:i + v.size]).reshape(v.shape).copy())))
            i += v.size
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self)


def grad(loss: Tensor, params: ParamSet, create_graph: bool = False) -> ParamSet:
    gs = gradients(loss, params.values(), create_graph=create_graph)
    return ParamSet(zip(params.names(), gs))


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """Functional update ``p - lr * g``; stays on the tape when inputs are."""
    if params.names() != grads.names():
        raise KeyError(f"sgd_step: parameter names {params.names()} vs gradients {grads.names()}")
    out = []
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise _shape_error(f"sgd_step[{name}]", p, g)
        out.append((name, sub(p, scale(g, lr))))
    return ParamSet(out)
