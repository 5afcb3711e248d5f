"""Array-valued reverse-mode autodiff on a recorded tape.

Small and explicit: each op builds a Tensor holding its result plus a closure
that routes the upstream gradient to the parents. backward() walks the tape in
reverse topological order. Only what the trainers need is implemented; every
op's VJP is checked against central finite differences in the tests.

Quantizer gradients deserve a note. sign_ste quantizes hard on the forward
pass and applies the straight-through estimator on the way back: upstream
passes where |input| <= 1 (closed window, so the boundary still learns) and is
zeroed outside. hardtanh shares that backward but keeps the forward smooth,
which is what makes the estimator checkable by finite differences.
"""

from __future__ import annotations

import numpy as np

from .bitcore import sign_quantize


class Tensor:
    """A node on the tape: value, accumulated gradient, and a backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from consuming Tensors elementwise; binary ops with an
    # ndarray on the left then defer to the __r*__ methods below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(
            data, np.ndarray
        ) else data
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        # first contribution copies (g may be shared with another parent),
        # later ones add in place
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Like accumulate, for gradients the caller freshly allocated and
        will not touch again; skips the defensive copy."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse sweep from this node; seeds with ones for a scalar loss.

        The sweep consumes the graph: hooks and parent links are cleared on
        the way out, so the tape frees by plain refcounting (the closures
        hold their output tensor, which would otherwise leave every tape as
        a reference cycle for the gc). Build a fresh graph per pass.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
            seed = np.ones_like(self.data, dtype=np.float64)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # distributed to the parents, so this buffer is dead weight;
                # dropping it early roughly halves the tape's peak footprint
                node.grad = None
        for node in order:
            node._backward = None
            node._parents = ()

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**exponent, parents=(a,))

    def backward(g):
        a.accumulate_owned(g * exponent * a.data ** (exponent - 1.0))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul is 2-d only")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate_owned(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_owned(a.data.T @ g)

    out._backward = backward
    return out


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_owned(np.broadcast_to(g, a.data.shape).copy())

    out._backward = backward
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first occurrence of the max."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    out = Tensor(out_data, parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.data, dtype=np.float64)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        a.accumulate_owned(ga)

    out._backward = backward
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backward(g):
        a.accumulate(g.reshape(a.data.shape))

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.T, parents=(a,))

    def backward(g):
        a.accumulate(g.T)

    out._backward = backward
    return out


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[key], parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.data, dtype=np.float64)
        np.add.at(ga, key, g)
        a.accumulate_owned(ga)

    out._backward = backward
    return out


def gather_rows(a, idx) -> Tensor:
    """Row gather with scatter-add backward; idx may repeat rows."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], parents=(a,))

    def backward(g):
        ga = np.zeros_like(a.data, dtype=np.float64)
        np.add.at(ga, idx, g)
        a.accumulate_owned(ga)

    out._backward = backward
    return out


def segment_sum(a, seg_ids, num_segments: int) -> Tensor:
    """Sum rows (or scalars) into segments; empty segments stay zero."""
    a = as_tensor(a)
    seg_ids = np.asarray(seg_ids)
    out_shape = (num_segments,) + a.data.shape[1:]
    data = np.zeros(out_shape, dtype=a.data.dtype)
    np.add.at(data, seg_ids, a.data)
    out = Tensor(data, parents=(a,))

    def backward(g):
        a.accumulate_owned(g[seg_ids])

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * out.data)

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), parents=(a,))

    def backward(g):
        a.accumulate_owned(g / a.data)

    out._backward = backward
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * 0.5 / out.data)

    out._backward = backward
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * (1.0 - out.data**2))

    out._backward = backward
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * (a.data > 0))

    out._backward = backward
    return out


def prelu(a, slope) -> Tensor:
    """PReLU with a learnable slope (broadcast against the input)."""
    a, slope = as_tensor(a), as_tensor(slope)
    neg = a.data < 0
    out = Tensor(np.where(neg, slope.data * a.data, a.data), parents=(a, slope))

    def backward(g):
        if a.requires_grad:
            a.accumulate_owned(g * np.where(neg, slope.data, 1.0))
        if slope.requires_grad:
            slope.accumulate_owned(_unbroadcast(g * np.where(neg, a.data, 0.0), slope.data.shape))

    out._backward = backward
    return out


def repeat_rows(a, k: int) -> Tensor:
    """np.repeat(a, k, axis=0) for 2-d input, with a reshape-sum backward.

    The edge tensors index source nodes as repeat(arange(n), k); expressing
    that gather as a repeat turns the scatter-add backward into a cheap
    reduction over the neighbour axis.
    """
    a = as_tensor(a)
    n = a.data.shape[0]
    out = Tensor(np.repeat(a.data, k, axis=0), parents=(a,))

    def backward(g):
        a.accumulate_owned(g.reshape(n, k, -1).sum(axis=1))

    out._backward = backward
    return out


def batch_norm_train(a, scale, shift, eps: float):
    """Batch-statistics normalization fused into one tape node.

    Returns (out, batch_mean, batch_var) with the biased variance; the
    caller owns the running-average update. Fusing matters: the edge
    tensors this runs over are the largest arrays in training, and the
    composed-op version walks them a dozen times. Reductions go through
    einsum and updates run in place to keep the traversal count down.
    """
    a, scale, shift = as_tensor(a), as_tensor(scale), as_tensor(shift)
    n = a.data.shape[0]
    mu = a.data.mean(axis=0)
    xhat = a.data - mu
    var = np.einsum("ij,ij->j", xhat, xhat) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out_data = xhat * scale.data
    out_data += shift.data
    out = Tensor(out_data, parents=(a, scale, shift))

    def backward(g):
        if shift.requires_grad:
            shift.accumulate(np.einsum("ij->j", g))
        if scale.requires_grad:
            scale.accumulate(np.einsum("ij,ij->j", g, xhat))
        if a.requires_grad:
            gh = g * scale.data
            mean_gh = np.einsum("ij->j", gh) / n
            mean_ghx = np.einsum("ij,ij->j", gh, xhat) / n
            gh -= mean_gh
            gh -= xhat * mean_ghx
            gh *= inv
            a.accumulate_owned(gh)

    out._backward = backward
    return out, mu, var


def ste_window(latent: np.ndarray) -> np.ndarray:
    """The straight-through gradient mask: 1 where |latent| <= 1, else 0."""
    return (np.abs(latent) <= 1.0).astype(np.float64)


def sign_ste(a) -> Tensor:
    """Hard sign forward, straight-through estimator backward."""
    a = as_tensor(a)
    out = Tensor(sign_quantize(a.data), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * ste_window(a.data))

    out._backward = backward
    return out


def hardtanh(a) -> Tensor:
    """clip(x, -1, 1): the smooth surrogate sharing sign_ste's backward."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, -1.0, 1.0), parents=(a,))

    def backward(g):
        a.accumulate_owned(g * ste_window(a.data))

    out._backward = backward
    return out


def log_softmax(a) -> Tensor:
    """Row-wise log softmax for 2-d logits."""
    a = as_tensor(a)
    shift = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    out = Tensor(shift - lse, parents=(a,))

    def backward(g):
        a.accumulate_owned(g - np.exp(out.data) * g.sum(axis=1, keepdims=True))

    out._backward = backward
    return out


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit l2 norm; all-zero rows map to zero."""
    a = as_tensor(a)
    norms = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    y = a.data / safe
    out = Tensor(np.where(norms == 0.0, 0.0, y), parents=(a,))

    def backward(g):
        inner = (g * out.data).sum(axis=1, keepdims=True)
        ga = (g - out.data * inner) / safe
        a.accumulate_owned(np.where(norms == 0.0, 0.0, ga))

    out._backward = backward
    return out


def dropout(a, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability out of range: {p}")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, mask)
