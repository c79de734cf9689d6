"""Dense float tensors with reverse-mode automatic differentiation.

Small numpy-backed tape autodiff: every operation records its inputs and a
vector-Jacobian closure on the output node, and ``backward`` walks the graph
once in reverse topological order. float32 is the working precision for the
whole pipeline; float64 is supported so gradient checks can run above the
float32 noise floor.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "set_debug_checks",
    "matmul",
    "embedding",
    "softmax",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "conv2d",
    "upsample2x",
    "concat",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "binary_cross_entropy",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
    "global_grad_norm",
]

LAYERNORM_EPS = 1e-5
BCE_EPS = 1e-7

_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named operation."""


class NumericError(FloatingPointError):
    """Non-finite values detected while debug checks are enabled."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf detection (off by default; costs a pass per op)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in operand")


class Tensor:
    """A dense float array plus an optional gradient buffer.

    Leaf tensors are created directly from data; non-leaf tensors are created
    by the ops below and carry references to their parents together with the
    closures that push gradients back to them. ``backward`` accumulates into
    ``.grad`` of every reachable tensor with ``requires_grad=True``; repeated
    backward calls without ``zero_grad`` keep accumulating.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # note: not ascontiguousarray, which would promote 0-d scalars to 1-d
        self.data = np.asarray(arr, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable requires_grad tensor.

        The loss must be scalar (size 1). Each graph node is visited exactly
        once, in reverse topological order of construction.
        """
        if self.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if children_done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg
            if node._parents == ():  # leaf: accumulate persistently
                if self is node and not node.requires_grad:
                    continue
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            elif node is self and node.requires_grad:
                pass  # scalar loss itself rarely needs a stored grad

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)


def _make(data: np.ndarray, op: str, parents: tuple, vjps: tuple) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjps = vjps
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e
    return _make(
        data,
        "add",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e
    return _make(
        data,
        "sub",
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e
    return _make(
        data,
        "mul",
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data * s, "scale", (a,), (lambda g: g * s,))


def matmul(a, b) -> Tensor:
    """Matrix product with broadcast batch dimensions (numpy semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(ga, a.shape)

    def grad_b(g):
        if a.ndim == 1:
            gb = np.outer(a.data, g) if g.ndim == 1 else np.matmul(a.data[:, None], g[None])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    return _make(data, "matmul", (a, b), (grad_a, grad_b))


# -- lookups and structure -------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup"
        )
    data = table.data[ids]

    def grad_table(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return gt

    return _make(data, "embedding", (table,), (grad_table,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return vjp

    return _make(data, "concat", tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return full

    return _make(a.data[idx].copy(), "narrow", (a,), (vjp,))


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from e
    return _make(np.asarray(data, order="C"), "reshape", (a,), (lambda g: g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        "transpose",
        (a,),
        (lambda g: g.transpose(inv),),
    )


# -- nonlinearities -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), "relu", (a,), (lambda g: g * mask,))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    local = (cdf + x * pdf).astype(x.dtype)
    return _make(data, "gelu", (a,), (lambda g: g * local,))


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Saturated inputs round to exactly 0 or 1; keep the open interval so
    # log/odds of the output stay finite.
    fi = np.finfo(out.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)
    return _make(out, "sigmoid", (a,), (lambda g: g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, "softmax", (a,), (vjp,))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis with learned affine.

    Variance is clamped by ``eps``, so a constant row normalizes to zeros and
    the output is just ``beta``.
    """
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def grad_a(g):
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - m1 - xhat * m2)

    def grad_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return _make(data, "layer_norm", (a, gamma, beta), (grad_a, grad_gamma, grad_beta))


# -- image ops ----------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches for a 3x3, stride-1, pad-1 conv."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di : di + h, dj : dj + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def _col2im3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Adjoint of ``_im2col3``: scatter-add patch columns back into an image."""
    b, c, h, w = shape
    cols = cols.reshape(b, c, 9, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += cols[:, :, k]
            k += 1
    return xp[:, :, 1 : h + 1, 1 : w + 1]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. x: (B,C,H,W), w: (O,C,3,3)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected x (B,C,H,W) and w (O,C,3,3), got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, x has {x.shape[1]}, w has {w.shape[1]}")
    bsz, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col3(x.data)  # (B, C*9, H*W)
    wmat = w.data.reshape(o, c * 9)
    out = np.matmul(wmat, cols).reshape(bsz, o, h, wd)
    parents = [x, w]

    def grad_x(g):
        gcols = np.matmul(wmat.T, g.reshape(bsz, o, h * wd))
        return _col2im3(gcols, x.shape)

    def grad_w(g):
        gM = g.reshape(bsz, o, h * wd)
        gw = np.einsum("boh,bch->oc", gM, cols, optimize=True)
        return gw.reshape(w.shape)

    vjps = [grad_x, grad_w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} outputs")
        out = out + b.data[None, :, None, None]
        parents.append(b)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(out, "conv2d", tuple(parents), tuple(vjps))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on the last two axes of (B,C,H,W)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected (B,C,H,W), got {x.shape}")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        b, c, h2, w2 = g.shape
        return g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))

    return _make(data, "upsample2x", (x,), (vjp,))


# -- reductions -----------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _make(np.asarray(data, dtype=a.dtype), "sum", (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


def reduce_max(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.max(axis=axis)

    def vjp(g):
        expanded = data if axis is None else np.expand_dims(data, axis)
        mask = (a.data == expanded).astype(a.dtype)
        mask /= mask.sum(axis=axis, keepdims=axis is not None) if axis is not None else mask.sum()
        ge = g if axis is None else np.expand_dims(g, axis)
        return mask * ge

    return _make(np.asarray(data, dtype=a.dtype), "max", (a,), (vjp,))


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Elementwise BCE with soft targets, on probabilities.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS]; outside the clamp the
    gradient is zero. Reduce with ``.mean()`` / ``.sum()`` as needed.
    """
    pred = _as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"binary_cross_entropy: target {tgt.shape} vs pred {pred.shape}")
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    data = -(tgt * np.log(p) + (1.0 - tgt) * np.log1p(-p))

    def vjp(g):
        return g * inside * (p - tgt) / (p * (1.0 - p))

    return _make(data.astype(pred.dtype), "bce", (pred,), (vjp,))


# -- optimizer ------------------------------------------------------------------


def _as_param_dict(params) -> dict:
    """Accept either a name->Tensor mapping or a plain iterable of Tensors."""
    if isinstance(params, dict):
        return params
    return {i: p for i, p in enumerate(params)}


class AdamState:
    """Per-parameter first/second moments plus the shared step count."""

    def __init__(self, params: dict[str, Tensor]):
        params = _as_param_dict(params)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in _as_param_dict(params).values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for p in _as_param_dict(params).values():
            if p.grad is not None:
                p.grad *= s
    return norm


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam update with bias correction, applied in place.

    Parameters with ``grad is None`` (no gradient flow this step) are skipped.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in _as_param_dict(params).items():
        if p.grad is None:
            continue
        g = p.grad
        if g.shape != p.data.shape or state.m[k].shape != p.data.shape:
            raise ShapeError(f"adam_step: shape mismatch for parameter {k!r}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
