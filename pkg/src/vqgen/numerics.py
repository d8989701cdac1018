"""Dense tensors with reverse-mode gradients, plus Adam with linear warmup/decay.

Values are backed by numpy arrays (row-major). Every operation that builds a
Tensor records enough state to push gradients back to its inputs; calling
``backward_gradients`` on a scalar loss fills in ``Parameter.gradient`` for
every trainable parameter that participated in the forward pass.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float64 or float32)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float64, np.float32):
        raise ShapeError(f"unsupported dtype: {dtype}")
    DEFAULT_DTYPE = dtype


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class StateError(RuntimeError):
    """Operation called outside its valid lifecycle (e.g. backward w/o forward)."""


class NumericError(ArithmeticError):
    """A public operation produced or received non-finite values."""


class Tensor:
    """A dense array node in the computation graph.

    Leaf tensors either belong to a Parameter (then `param` is set) or are
    constants; interior tensors carry a vjp closure over their parents.
    """

    __slots__ = ("data", "_parents", "_vjp", "param")

    def __init__(self, data, parents: tuple = (), vjp: Optional[Callable] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self._parents = parents
        self._vjp = vjp
        self.param: Optional[Parameter] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"


class Parameter:
    """Named learnable tensor with a gradient buffer of identical shape."""

    __slots__ = ("id", "value", "gradient", "trainable")

    def __init__(self, id: str, value, trainable: bool = True):
        tensor = value if isinstance(value, Tensor) else Tensor(value)
        if tensor._parents:
            raise StateError(f"parameter {id!r} must wrap a leaf tensor")
        self.id = id
        self.value = tensor
        self.gradient = np.zeros_like(tensor.data)
        self.trainable = trainable
        tensor.param = self

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={list(self.shape)}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands, casting plain scalars to the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single-pass sum is nan/inf-poisoned, so it detects any non-finite entry
    with np.errstate(all="ignore"):
        total = float(np.sum(arr))
    if not math.isfinite(total):
        raise NumericError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph-building operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """out[..., j] = sum_k x[..., k] * w[k, j] + b[j]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine weight must be 2-d and bias 1-d, got {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine inner dims differ: {x.shape} vs {w.shape}")
    if b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine bias dim {b.shape[0]} != output dim {w.shape[1]}")
    out = x.data @ w.data + b.data
    _check_finite(out, "affine")

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return Tensor(out, (x, w, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor(out, (a,), vjp)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _as_tensor(a)
    out = np.swapaxes(a.data, i, j)

    def vjp(g):
        return (np.swapaxes(g, i, j),)

    return Tensor(out, (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(tuple(shape))

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for k in range(len(parts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    return Tensor(out, tuple(parts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    a = _as_tensor(a)
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) outside axis of {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return Tensor(out, (a,), vjp)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-d tensor by an integer index array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor(out, (table,), vjp)


def softmax_rows(x) -> Tensor:
    """Stable softmax over the last axis; each output row sums to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _check_finite(out, "softmax_rows")

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gain.data + bias.data
    _check_finite(out, "layer_norm")

    def vjp(g):
        gn = g * gain.data
        gvar = (gn * centered).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        gmean = -(gn * inv).sum(axis=-1, keepdims=True) + gvar * (-2.0 / d) * centered.sum(
            axis=-1, keepdims=True
        )
        gx = gn * inv + gvar * 2.0 * centered / d + gmean / d
        ggain = (g * normed).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return Tensor(out, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Elementwise x * Phi(x) via the tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    x_sq = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x_sq))
    out = 0.5 * xd * (1.0 + t)
    _check_finite(out, "gelu")

    def vjp(g):
        du = _GELU_C * (1.0 + 0.134145 * x_sq)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        return (g * dx,)

    return Tensor(out, (x,), vjp)


def cross_entropy(logits, targets, ignore_id: int = -1) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions whose target != ignore_id."""
    logits = _as_tensor(logits)
    ids = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim < 2:
        raise ShapeError("cross_entropy expects logits with ndim >= 2")
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    if flat.shape[0] != ids.shape[0]:
        raise ShapeError(f"{flat.shape[0]} logit rows vs {ids.shape[0]} targets")
    keep = ids != ignore_id
    n_valid = int(keep.sum())
    if n_valid == 0:
        raise StateError("cross_entropy: every position is ignored")
    bad = keep & ((ids < 0) | (ids >= v))
    if bad.any():
        raise ShapeError(f"target id out of range [0,{v})")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.nonzero(keep)[0]
    nll = logz[rows] - shifted[rows, ids[rows]]
    out = nll.sum() / n_valid
    _check_finite(np.asarray(out), "cross_entropy")

    def vjp(g):
        probs = np.exp(shifted - logz[:, None])
        grad = np.zeros_like(flat)
        grad[rows] = probs[rows]
        grad[rows, ids[rows]] -= 1.0
        grad *= float(g) / n_valid
        return (grad.reshape(logits.shape),)

    return Tensor(out, (logits,), vjp)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum()

    def vjp(g):
        return (np.full_like(x.data, float(g)),)

    return Tensor(out, (x,), vjp)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean()

    def vjp(g):
        return (np.full_like(x.data, float(g) / x.size),)

    return Tensor(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward_gradients(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """Populate Parameter.gradient with d(loss)/d(parameter).

    Parameters reachable from `loss` get their true gradient; parameters in
    `params` that the graph never touched (and all non-trainable ones) get
    zeros. Requires `loss` to be a recorded scalar computation.
    """
    if not isinstance(loss, Tensor):
        raise StateError("backward_gradients expects a Tensor loss")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss._parents:
        raise StateError("no recorded forward computation behind this loss")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            if node.param.trainable:
                node.param.gradient = np.array(g, copy=True)
            continue
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    reached: set[int] = set()
    for node in order:
        if node.param is not None:
            reached.add(id(node))
    if params is not None:
        for p in params:
            if not p.trainable or id(p.value) not in reached:
                p.gradient = np.zeros_like(p.value.data)
    for node in order:
        p = node.param
        if p is not None and not p.trainable:
            p.gradient = np.zeros_like(p.value.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class OptimizerState:
    """Adam moments plus the warmup/decay schedule settings."""

    def __init__(
        self,
        base_lr: float,
        total_steps: int,
        warmup_fraction: float = 0.1,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        if total_steps <= 0:
            raise ShapeError("total_steps must be positive")
        if not 0.0 <= warmup_fraction <= 1.0:
            raise ShapeError("warmup_fraction must lie in [0, 1]")
        self.step = 0
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_fraction = warmup_fraction
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}


def lr_schedule(state: OptimizerState, step: int) -> float:
    """Linear ramp to base_lr over the warmup span, then linear decay to zero."""
    total = state.total_steps
    warm = state.warmup_fraction * total
    if step <= 0:
        return 0.0 if warm > 0 else state.base_lr
    if step >= total:
        return 0.0
    if step < warm:
        return state.base_lr * step / warm
    if total == warm:
        return state.base_lr
    return state.base_lr * (total - step) / (total - warm)


def adam_step(params: Iterable[Parameter], state: OptimizerState) -> None:
    """Bias-corrected Adam update at the scheduled learning rate.

    Non-trainable parameters are left untouched, bit for bit.
    """
    state.step += 1
    t = state.step
    lr = lr_schedule(state, t)
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    for p in params:
        if not p.trainable:
            continue
        g = p.gradient
        m = state.first_moment.get(p.id)
        if m is None:
            m = np.zeros_like(p.value.data)
            state.first_moment[p.id] = m
            state.second_moment[p.id] = np.zeros_like(p.value.data)
        v = state.second_moment[p.id]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite(update, "adam_step")
        p.value.data[...] = p.value.data - update


def clip_gradients(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        total += float((p.gradient * p.gradient).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in trainable:
            p.gradient = p.gradient * factor
    return norm
