"""Dense tensors with reverse-mode autodiff on top of numpy.

Every differentiable operation the recognizer needs lives here: elementwise
arithmetic, matmul, softmax, layer norm, dropout, 2-D convolution, embedding
lookup. Gradients are checked against central finite differences (see
``finite_difference_check``), so keep backward rules exact, not approximate.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, NanError, ShapeError

# When true, every op output is scanned for NaN/Inf and the offending op is
# named in the raised NanError. Off by default: the scan costs ~20% runtime.
NAN_CHECK = False


class Rng:
    """Deterministic splittable generator (Philox counter-based).

    Identical seed gives an identical draw sequence on every platform.
    ``split`` derives an independent child stream from a string tag.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, tag) -> "Rng":
        h = hashlib.blake2b(f"{self.seed}/{tag}".encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)


def _check_finite(data, op):
    if NAN_CHECK and not np.all(np.isfinite(data)):
        raise NanError(f"non-finite values produced by op '{op}'")


class Tensor:
    """n-d array plus an optional gradient tape node.

    ``data`` is immutable by convention once the tensor participates in a
    graph; only ``grad`` accumulates in place during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from this scalar."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar output")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data, op, parents, backward):
    _check_finite(data, op)
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._backward is not None:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, "div", (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _make(out_data, "relu", (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # stable piecewise form, no overflow for large |x|
    out_data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def backward(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _make(out_data, "log", (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _make(out_data, "exp", (x,), backward)


# -- reductions and shape -----------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape))

    return _make(out_data, "sum", (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out_data, "reshape", (x,), backward)


def transpose(x, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    axes = axes if axes else None
    x = as_tensor(x)
    out_data = x.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(out_data, "transpose", (x,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._backward is not None:
                t._accumulate(piece)

    return _make(out_data, "concat", tuple(tensors), backward)


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dimensions like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._backward is not None:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, "matmul", (a, b), backward)


# -- softmax family ------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return _make(out_data, "softmax", (x,), backward)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, "log_softmax", (x,), backward)


# -- normalization, dropout ----------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad or gamma._backward is not None:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad or beta._backward is not None:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if x.requires_grad or x._backward is not None:
            gx_hat = g * gamma.data
            term1 = gx_hat
            term2 = gx_hat.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (term1 - term2 - term3))

    return _make(out_data, "layer_norm", (x, gamma, beta), backward)


def dropout(x, p: float, rng: Rng | None, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, E[out] == x in train mode."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode requires an Rng")
    keep = (rng.uniform(0.0, 1.0, x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def backward(g):
        x._accumulate(g * keep * scale)

    return _make(out_data, "dropout", (x,), backward)


# -- embedding -----------------------------------------------------------

def embedding(table, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table._accumulate(gt)

    return _make(out_data, "embedding", (table,), backward)


# -- 2-D convolution -------------------------------------------------------

def _same_pad(n, k, s):
    out = -(-n // s)  # ceil
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _im2col(xp, kh, kw, sh, sw):
    b, h, w, c = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    st = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, oh, ow, kh, kw, c), (st[0], st[1] * sh, st[2] * sw, st[1], st[2], st[3])
    )
    return np.ascontiguousarray(view).reshape(b, oh, ow, kh * kw * c), oh, ow


def conv2d(x, w, b=None, stride=1, padding="same") -> Tensor:
    """2-D convolution on NHWC input with HWIO weights.

    ``padding`` is "same" (TF-style, output = ceil(n/stride)) or "valid".
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[-1] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}"
        )
    sh = sw = int(stride)
    if padding == "same":
        ph = _same_pad(x.data.shape[1], kh, sh)
        pw = _same_pad(x.data.shape[2], kw, sw)
    elif padding == "valid":
        ph = pw = (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    col, oh, ow = _im2col(xp, kh, kw, sh, sw)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = col @ wmat
    if b is not None:
        out_data = out_data + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.reshape(-1, cout)
        if w.requires_grad or w._backward is not None:
            gw = col.reshape(-1, kh * kw * cin).T @ gmat
            w._accumulate(gw.reshape(w.data.shape))
        if b is not None and (b.requires_grad or b._backward is not None):
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad or x._backward is not None:
            gcol = (g @ wmat.T).reshape(g.shape[0], oh, ow, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += gcol[
                        :, :, :, i, j, :
                    ]
            hs, ws = ph[0], pw[0]
            gx = gxp[:, hs : hs + x.data.shape[1], ws : ws + x.data.shape[2], :]
            x._accumulate(gx)

    return _make(out_data, "conv2d", parents, backward)


# -- initialization --------------------------------------------------------

def glorot_uniform(rng: Rng, shape, fan_in, fan_out, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


# -- gradient verification ---------------------------------------------------

def finite_difference_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max scaled relative error between analytic grad of f and central differences.

    ``f`` must return a scalar Tensor. Run in float64: with float32 the
    difference quotient noise swamps any real gradient bug.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-6, 1e-3]")
    x.data = np.ascontiguousarray(x.data)  # flat view below must alias x.data
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("finite_difference_check requires a scalar-valued f")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * eps)
    fd = fd.reshape(x.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
    return float(np.max(np.abs(analytic - fd) / denom))
