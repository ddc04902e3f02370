"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op builds its output with a closure that maps the output
gradient to a tuple of input gradients (``None`` for inputs that do not need
one). :func:`backward` orders the graph reachable from a scalar loss into a
:class:`Tape` and replays the closures in reverse.

Only leaf tensors keep ``.grad``; intermediate gradients live for one pass, so
the same forward graph can be differentiated for several losses in a row.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels
from ..errors import ContractError, DegenerateInputError, DimensionError

NORM_EPS = 1e-8
PROB_EPS = 1e-7

BackwardFn = Callable[[np.ndarray], tuple]

_grad_enabled = True


class no_grad:
    """Context manager: ops inside build no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: BackwardFn | None = None
        self.op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.op = op
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Executed ops reachable from an output, in topological order.

    ``nodes`` lists every tensor (leaves included) such that each tensor
    appears after all of its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d loss / d leaf into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape {a.shape} does not match {b.shape}")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.shape)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(
        np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors, summed in list order."""
    if not tensors:
        raise ContractError("stack_mean needs at least one tensor")
    first = tensors[0]
    for t in tensors[1:]:
        _same_shape(first, t, "stack_mean")
    acc = first.data.copy()
    for t in tensors[1:]:
        acc = acc + t.data
    n = len(tensors)
    out = acc / n

    def _bw(g):
        share = g / n
        return tuple(share for _ in tensors)

    return _make(out, tuple(tensors), _bw, "stack_mean")


def take(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), _bw, "take")


# ------------------------------------------------------------------- spatial


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``weight``."""
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"conv2d: padding must be >= 0, got {padding}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,kH,kW], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != (C_out={c_out},)")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    n_batch, xc, h, w = xd.shape
    if xc != c_in:
        raise DimensionError(f"conv2d: input channel axis C_in={xc} != weight C_in={c_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel (kH={kh}, kW={kw}) exceeds padded input (H={hp}, W={wp})"
        )
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    if padding:
        xp = np.zeros((n_batch, c_in, hp, wp))
        xp[:, :, padding : padding + h, padding : padding + w] = xd
    else:
        xp = np.ascontiguousarray(xd)
    cols = kernels.im2col(xp, kh, kw, stride, out_h, out_w)
    w2 = weight.data.reshape(c_out, -1)
    out = np.matmul(w2, cols) + bias.data[None, :, None]
    out = out.reshape(n_batch, c_out, out_h, out_w)
    if unbatched:
        out = out[0]

    def _bw(g):
        g3 = g.reshape(n_batch, c_out, out_h * out_w)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(np.matmul(w2.T, g3))
            gpad = kernels.col2im(dcols, c_in, hp, wp, kh, kw, stride, out_h, out_w)
            gx = gpad[:, :, padding : padding + h, padding : padding + w]
            if unbatched:
                gx = gx[0]
        if weight.requires_grad:
            acc = g3[0] @ cols[0].T
            for i in range(1, n_batch):
                acc += g3[i] @ cols[i].T
            gw = acc.reshape(weight.shape)
        if bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    return _make(out, (x, weight, bias), _bw, "conv2d")


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """Mean over non-overlapping ``window``x``window`` blocks of the last two axes."""
    if window < 1:
        raise ContractError(f"avg_pool2d: window must be >= 1, got {window}")
    *lead, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"avg_pool2d: H={h}, W={w} not divisible by window {window}")
    hh, ww = h // window, w // window
    blocks = x.data.reshape(*lead, hh, window, ww, window)
    out = blocks.mean(axis=(-3, -1))
    inv = 1.0 / (window * window)

    def _bw(g):
        up = np.repeat(np.repeat(g, window, axis=-2), window, axis=-1)
        return (up * inv,)

    return _make(out, (x,), _bw, "avg_pool2d")


def masked_mean(features: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted mean of the feature columns of ``features`` [C,H,W] under ``weights`` [H,W]."""
    weights = np.asarray(weights, dtype=np.float64)
    c, h, w = features.shape
    if weights.shape != (h, w):
        raise DimensionError(f"masked_mean: weights {weights.shape} != feature map (H={h}, W={w})")
    total = weights.sum()
    if total <= 0:
        raise DegenerateInputError("masked_mean: weights sum to zero")
    norm_w = weights / total
    out = np.tensordot(features.data, norm_w, axes=([1, 2], [0, 1]))

    def _bw(g):
        return (g[:, None, None] * norm_w[None],)

    return _make(out, (features,), _bw, "masked_mean")


def cosine_map(features: Tensor, prototype: Tensor, eps: float | None = NORM_EPS) -> Tensor:
    """Per-pixel cosine similarity between ``features`` [C,H,W] and ``prototype`` [C].

    Norms are floored at ``eps``. With ``eps=None`` (or 0) flooring is off and
    a zero norm raises :class:`DegenerateInputError`.
    """
    if features.data.ndim != 3:
        raise DimensionError(f"cosine_map: features must be [C,H,W], got {features.shape}")
    c = features.shape[0]
    if prototype.shape != (c,):
        raise DimensionError(f"cosine_map: prototype {prototype.shape} != channel axis C={c}")
    f, p = features.data, prototype.data
    fnorm = np.sqrt(np.einsum("chw,chw->hw", f, f))
    pnorm = float(np.sqrt(p @ p))
    if eps:
        nf = np.maximum(fnorm, eps)
        npn = max(pnorm, eps)
    else:
        if pnorm == 0.0 or np.any(fnorm == 0.0):
            raise DegenerateInputError("cosine_map: zero-norm vector with flooring disabled")
        nf, npn = fnorm, pnorm
    dots = np.tensordot(p, f, axes=(0, 0))
    denom = nf * npn
    cos = dots / denom
    f_live = fnorm >= nf  # norm not floored, so it carries gradient
    p_live = pnorm >= npn

    def _bw(g):
        gf = gp = None
        if features.requires_grad:
            coef = g / denom
            gf = p[:, None, None] * coef[None]
            gf = gf - f * np.where(f_live, g * cos / (nf * nf), 0.0)[None]
        if prototype.requires_grad:
            gp = np.tensordot(f, g / denom, axes=([1, 2], [0, 1]))
            if p_live:
                gp = gp - p * float(np.sum(g * cos)) / (npn * npn)
        return gf, gp

    return _make(cos, (features, prototype), _bw, "cosine_map")


def bce_mean(prob: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """Mean binary cross-entropy; ``prob`` is clamped to ``[eps, 1-eps]``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if prob.shape != t.shape:
        raise DimensionError(f"bce_mean: prob {prob.shape} != target {t.shape}")
    p = np.clip(prob.data, eps, 1.0 - eps)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n
    inside = (prob.data > eps) & (prob.data < 1.0 - eps)

    def _bw(g):
        dp = (-t / p + (1.0 - t) / (1.0 - p)) / n
        return (float(g) * dp * inside,)

    return _make(np.array(loss), (prob,), _bw, "bce_mean")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
