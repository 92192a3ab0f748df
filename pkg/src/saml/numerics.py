"""Dense FP32 tensors with a reverse-mode tape, optimizers and a seeded RNG.

Only the handful of operations the toy transformer needs are provided.  Every
elementwise op demands identical shapes; the only broadcasting is the explicit
``add_bias`` (a trailing-axis vector added to every row).
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DoubleBackwardError, NumericError, ShapeError

FLOAT = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major array plus the tape bookkeeping needed for ``backward``."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=FLOAT)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        out._consumed = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"{type(self).__name__}(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A leaf tensor with a zero-initialised gradient and a trainable flag.

    Frozen parameters do not record on the tape, so their gradient stays zero
    and optimizers leave their values untouched.
    """

    def __init__(self, data, trainable: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=trainable, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def copy(self) -> Parameter:
        return Parameter(self.data.copy(), trainable=self.trainable, name=self.name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``: the one sanctioned broadcast."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = float(np.sqrt(2.0 / np.pi))
    inner = c * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis)
    src = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: empty sequence")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"stack: shapes {first} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._from_op(out, tuple(tensors), back)


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a[m,k] @ b[k,n]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _parse_einsum(subscripts: str, n_ops: int) -> tuple[list[str], str]:
    if "->" not in subscripts or "." in subscripts:
        raise ValueError(f"einsum: explicit output without ellipsis required, got {subscripts!r}")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_ops:
        raise ValueError(f"einsum: {len(ins)} subscripts for {n_ops} operands")
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index inside {s!r} is not supported")
    return ins, out


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` with explicit output subscripts."""
    ins, out = _parse_einsum(subscripts, len(operands))
    sizes: dict[str, int] = {}
    for s, t in zip(ins, operands):
        if len(s) != t.ndim:
            raise ShapeError(f"einsum {subscripts!r}: operand {t.shape} does not match {s!r}")
        for c, n in zip(s, t.shape):
            if sizes.setdefault(c, n) != n:
                shapes = ", ".join(str(o.shape) for o in operands)
                raise ShapeError(f"einsum {subscripts!r}: index {c!r} disagrees across shapes {shapes}")
    arrays = [t.data for t in operands]
    data = np.einsum(subscripts, *arrays, optimize=len(arrays) > 2)

    def back(g):
        grads = []
        for i, target in enumerate(ins):
            if not operands[i].requires_grad:
                grads.append(None)
                continue
            others = [(s, a) for j, (s, a) in enumerate(zip(ins, arrays)) if j != i]
            avail = set(out).union(*(set(s) for s, _ in others))
            reduced = "".join(c for c in target if c in avail)
            spec = ",".join([out] + [s for s, _ in others]) + "->" + reduced
            gi = np.einsum(spec, g, *[a for _, a in others], optimize=len(others) > 1)
            if reduced != target:
                shape = [sizes[c] if c in avail else 1 for c in target]
                gi = np.broadcast_to(gi.reshape(shape), [sizes[c] for c in target]).copy()
            grads.append(gi)
        return grads

    return Tensor._from_op(np.asarray(data), tuple(operands), back)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if x.data.size == 0 or x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty input of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.ndim == 0:
        raise ShapeError(f"log_softmax: empty input of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor._from_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"cross_entropy: logits must be [batch, classes], got {logits.shape}")
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: targets {t.shape} do not match logits {logits.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("cross_entropy: targets must be integer class indices")
    n, c = logits.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        bad = int(t[(t < 0) | (t >= c)][0])
        raise IndexError(f"cross_entropy: target {bad} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, t] -= 1
        return (d * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out.astype(x.data.dtype, copy=False), (x, gamma, beta), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id outside [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.data, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._from_op(table.data[ids], (table,), back)


# ---------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    The tape is released afterwards; a second call on the same graph raises
    :class:`DoubleBackwardError`.
    """
    if loss._consumed:
        raise DoubleBackwardError("backward() already ran on this graph; rebuild it with a fresh forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        if node._consumed:
            raise DoubleBackwardError("graph contains nodes already consumed by an earlier backward()")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.grad.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        self.betas = tuple(float(b) for b in self.betas)


class Optimizer:
    """SGD or Adam over a fixed parameter list.

    Parameters whose ``trainable`` flag is off at step time are skipped (value
    and moment state untouched); every gradient is zeroed after the step.
    """

    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig | None = None):
        self.params = list(params)
        self.config = config or OptimizerConfig()
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.trainable and not np.all(np.isfinite(p.grad)):
                bad = int(np.flatnonzero(~np.isfinite(p.grad.reshape(-1)))[0])
                raise NumericError(f"non-finite gradient in parameter {p.name or i!r} at flat index {bad}")
        cfg = self.config
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            g = p.grad
            if cfg.kind == "sgd":
                p.data -= (cfg.lr * g).astype(p.data.dtype)
                continue
            b1, b2 = cfg.betas
            m = self._m.setdefault(i, np.zeros_like(p.data))
            v = self._v.setdefault(i, np.zeros_like(p.data))
            t = self._t.get(i, 0) + 1
            self._t[i] = t
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
        self.zero_grad()


def optimizer_step(params: Iterable[Parameter], config: OptimizerConfig, optimizer: Optimizer | None = None) -> Optimizer:
    """One update of ``params``; pass the returned optimizer back in to keep Adam state."""
    opt = optimizer or Optimizer(params, config)
    opt.step()
    return opt


# ---------------------------------------------------------------------------
# randomness


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class SeededRng:
    """Philox (counter-based) stream keyed by a 64-bit seed.

    ``spawn`` derives independent child streams from labels, so the values a
    component draws do not depend on what other components drew before it.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def spawn(self, *labels) -> SeededRng:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(lb) for lb in labels))
        return SeededRng(int(ss.generate_state(1, np.uint64)[0]))

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return (mean + std * self._gen.standard_normal(shape, dtype=np.float64)).astype(FLOAT)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(FLOAT)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size=size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3
) -> list[float]:
    """Relative error between tape gradients and central differences.

    The tape gradient comes from the FP32 graph.  The difference quotients
    re-evaluate ``loss_fn`` with every listed tensor promoted to float64, so the
    oracle's round-off stays well below the tolerance of interest.  Returns one
    ``||g_tape - g_fd|| / max(||g_fd||, 1e-12)`` per parameter.
    """
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0
    loss = loss_fn()
    backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64) for p in params]

    originals = [p.data for p in params]
    errors = []
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
        with no_grad():
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                num = np.zeros(flat.size)
                for j in range(flat.size):
                    keep = flat[j]
                    flat[j] = keep + eps
                    up = float(loss_fn().data)
                    flat[j] = keep - eps
                    down = float(loss_fn().data)
                    flat[j] = keep
                    num[j] = (up - down) / (2 * eps)
                num = num.reshape(p.shape)
                errors.append(float(np.linalg.norm(ga - num) / max(np.linalg.norm(num), 1e-12)))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            if p.grad is not None:
                p.grad[...] = 0
    return errors
