"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the encoder/projection/head stack needs:
broadcast arithmetic, matmul, strided valid convolution, reductions, exp,
log, sqrt, relu, and indexing-free composition of batch norm, dropout and
l2 normalization from those primitives. Storage defaults to float32;
gradient-check tests run the same graph in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            self.data = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            self.data = arr if arr.dtype.kind == "f" else arr.astype(DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()
        self.name = name

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _child(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=self.data.dtype), self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- arithmetic -----------------------------------------------------------

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        # scalars adopt this tensor's dtype so float32 graphs stay float32
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._wrap(other)
        out_parents = (self, other)

        def backward(g):
            self._accum(g)
            other._accum(g)
        return self._child(self.data + other.data, out_parents, backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)
        return self._child(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)

        def backward(g):
            self._accum(g * other.data)
            other._accum(g * self.data)
        return self._child(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)

        def backward(g):
            self._accum(g / other.data)
            other._accum(-g * self.data / (other.data ** 2))
        return self._child(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent: float):
        assert np.isscalar(exponent)

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1))
        return self._child(self.data ** exponent, (self,), backward)

    def __matmul__(self, other):
        other = self._wrap(other)

        def backward(g):
            self._accum(g @ other.data.T)
            other._accum(self.data.T @ g)
        return self._child(self.data @ other.data, (self, other), backward)

    # -- elementwise functions --------------------------------------------------

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accum(g * mask)
        return self._child(self.data * mask, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)
        return self._child(out_data, (self,), backward)

    def log(self):
        def backward(g):
            self._accum(g / self.data)
        return self._child(np.log(self.data), (self,), backward)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accum(g * 0.5 / out_data)
        return self._child(out_data, (self,), backward)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape):
        orig = self.data.shape

        def backward(g):
            self._accum(g.reshape(orig))
        return self._child(self.data.reshape(*shape), (self,), backward)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def backward(g):
            self._accum(g.transpose(inv))
        return self._child(self.data.transpose(axes), (self,), backward)

    @property
    def T(self):
        return self.transpose()

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
        return self._child(self.data.sum(axis=axis, keepdims=keepdims),
                           (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- backward driver ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._prev:
                visit(p)
            topo.append(t)
        visit(self)

        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# neural-net specific operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int]) -> Tensor:
    """Valid (no padding) strided 2-d convolution.

    x: (batch, in_ch, H, W); w: (out_ch, in_ch, kh, kw).
    """
    sh, sw = stride
    b, cin, hh, ww = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin} vs kernel {cin_w}")
    if kh > hh or kw > ww:
        raise ValueError(f"kernel {(kh, kw)} larger than input {(hh, ww)}")
    ho = (hh - kh) // sh + 1
    wo = (ww - kw) // sw + 1

    patches = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    # (b, cin, ho, wo, kh, kw) -> (b*ho*wo, cin*kh*kw)
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        if w.requires_grad:
            w._accum((gmat.T @ cols).reshape(cout, cin, kh, kw))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gcols = (gmat @ wmat).reshape(b, ho, wo, cin, kh, kw)
            for p in range(kh):
                for q in range(kw):
                    gx[:, :, p:p + sh * ho:sh, q:q + sw * wo:sw] += \
                        gcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            x._accum(gx)

    out = Tensor(out_data)
    if x.requires_grad or w.requires_grad:
        out.requires_grad = True
        out._prev = (x, w)
        out._backward = backward
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Project rows onto the unit sphere; errors on (near-)zero vectors."""
    norms_sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(norms_sq.data <= 1e-20):
        raise ValueError("zero-vector normalization")
    return x / (norms_sq + eps).sqrt()


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Numerically stabilized log-sum-exp (the shift is a constant)."""
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    out = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if not keepdims:
        squeezed = tuple(s for i, s in enumerate(out.shape)
                         if i != axis % x.data.ndim)
        out = out.reshape(*squeezed) if squeezed else out.reshape(1)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout: eval mode is the identity, train mode rescales by
    1/(1-rate) so no eval-time correction is needed."""
    if not training or rate <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask.astype(x.data.dtype))
