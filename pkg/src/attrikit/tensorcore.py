"""Minimal dense-tensor core with reverse-mode autodiff on numpy arrays.

Covers exactly what the encoder/decoder stacks and their losses need:
matmul, elementwise arithmetic, layernorm, softmax, gelu, reductions,
concat/slice, attention, embedding lookup, plus AdamW, global-norm
gradient clipping and a small binary checkpoint format.

Broadcasting is deliberately restricted: operand shapes must be equal,
or one operand is a suffix of the other (leading-batch broadcast), or
shapes have equal rank with explicit size-1 axes. Rank promotion beyond
that is rejected so shape bugs fail loudly.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "ShapeMismatch", "NonFinite", "ChecksumMismatch",
    "no_grad", "is_grad_enabled",
    "matmul", "concat", "softmax", "layernorm", "gelu", "attention",
    "linear", "multihead_attention",
    "embedding", "cosine", "broadcast_to",
    "adam_init", "adam_step", "clip_grad_norm",
    "save_tensors", "load_tensors", "CHECKPOINT_MAGIC",
]


class ShapeMismatch(ValueError):
    """Operand shapes are not compatible under the restricted broadcast rules."""


class NonFinite(ArithmeticError):
    """A NaN or Inf showed up where the caller requires finite values."""


class ChecksumMismatch(ValueError):
    """Checkpoint bytes fail CRC or magic validation."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


def _broadcast_check(sa, sb):
    """Validate shapes under the restricted rules; return output shape."""
    if sa == sb:
        return sa
    if len(sa) == len(sb):
        out = []
        for a, b in zip(sa, sb):
            if a == b or a == 1 or b == 1:
                out.append(max(a, b))
            else:
                raise ShapeMismatch(f"incompatible shapes {sa} and {sb}")
        return tuple(out)
    # suffix broadcast: the smaller-rank operand must match the tail exactly
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeMismatch(f"incompatible shapes {sa} and {sb}")
    return big


def _reduce_grad(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus an optional reverse-mode gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- tape plumbing -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g, owned=False):
        """Add `g` into the stored gradient.

        owned=True promises `g` is a freshly allocated, writable array no one
        else aliases, letting it be adopted without the defensive copy.
        """
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
            owned = True
        if self.grad is None:
            self.grad = g if owned else g.copy()
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar; visits each graph node exactly once."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar loss")
        # iterative post-order topo sort (graphs can exceed the recursion limit)
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- basic properties ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ------------------------------------------

    @staticmethod
    def _coerce(x, like):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        _broadcast_check(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                ga = _reduce_grad(g, a.shape)
                a._accumulate(ga, owned=ga is not g)
            if b.requires_grad:
                gb = _reduce_grad(g, b.shape)
                b._accumulate(gb, owned=gb is not g)

        return Tensor._result(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        _broadcast_check(self.shape, other.shape)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                ga = _reduce_grad(g, a.shape)
                a._accumulate(ga, owned=ga is not g)
            if b.requires_grad:
                b._accumulate(-_reduce_grad(g, b.shape), owned=True)

        return Tensor._result(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return Tensor._coerce(other, self).__sub__(self)

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        _broadcast_check(self.shape, other.shape)
        a, b = self, other
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_reduce_grad(g * bd, a.shape), owned=True)
            if b.requires_grad:
                b._accumulate(_reduce_grad(g * ad, b.shape), owned=True)

        return Tensor._result(ad * bd, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        _broadcast_check(self.shape, other.shape)
        a, b = self, other
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(_reduce_grad(g / bd, a.shape), owned=True)
            if b.requires_grad:
                b._accumulate(_reduce_grad(-g * ad / (bd * bd), b.shape), owned=True)

        return Tensor._result(ad / bd, (a, b), bw)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self).__truediv__(self)

    def __neg__(self):
        a = self

        def bw(g):
            a._accumulate(-g, owned=True)

        return Tensor._result(-a.data, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            a._accumulate(g.reshape(old))

        return Tensor._result(a.data.reshape(shape), (a,), bw)

    def transpose(self, axes):
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def bw(g):
            a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes).copy(), (a,), bw)

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]
        if not isinstance(out_data, np.ndarray):
            out_data = np.asarray(out_data)

        def bw(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full, owned=True)

        return Tensor._result(out_data.copy(), (a,), bw)

    def astype(self, dtype):
        a = self
        dtype = np.dtype(dtype)
        src = a.data.dtype

        def bw(g):
            a._accumulate(g.astype(src))

        return Tensor._result(a.data.astype(dtype), (a,), bw)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out = out.astype(a.data.dtype)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy(), owned=True)

        return Tensor._result(out, (a,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- scalar nonlinearities ---------------------------------------------

    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            out = np.exp(a.data)
        if not np.all(np.isfinite(out)):
            raise NonFinite("exp overflow")

        def bw(g):
            a._accumulate(g * out, owned=True)

        return Tensor._result(out, (a,), bw)

    def log(self):
        a = self
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log(a.data)
        if not np.all(np.isfinite(out)):
            raise NonFinite("log of a non-positive value")

        def bw(g):
            a._accumulate(g / a.data, owned=True)

        return Tensor._result(out, (a,), bw)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bw(g):
            a._accumulate(g * (0.5 / out), owned=True)

        return Tensor._result(out, (a,), bw)

    def pow(self, p):
        a = self
        out = a.data ** p

        def bw(g):
            a._accumulate(g * (p * a.data ** (p - 1)), owned=True)

        return Tensor._result(out, (a,), bw)

    def tanh(self):
        a = self
        out = np.tanh(a.data)

        def bw(g):
            a._accumulate(g * (1.0 - out * out), owned=True)

        return Tensor._result(out, (a,), bw)


def constant(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def matmul(a, b):
    """(..., m, k) @ (k, n) or batch-matched (..., m, k) @ (..., k, n)."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner dims: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(bd, -1, -2)), owned=True)
        if b.requires_grad:
            if bd.ndim == 2:
                a2 = ad.reshape(-1, ad.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2, owned=True)
            else:
                b._accumulate(np.matmul(np.swapaxes(ad, -1, -2), g), owned=True)

    return Tensor._result(out, (a, b), bw)


def concat(tensors, axis):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return Tensor._result(out, tuple(tensors), bw)


def broadcast_to(t, shape):
    """Explicit broadcast; the only sanctioned way to grow a tensor's rank."""
    if not isinstance(t, Tensor):
        t = Tensor(t)
    shape = tuple(shape)
    _broadcast_check(t.shape, shape)
    a = t

    def bw(g):
        ga = _reduce_grad(g, a.shape)
        a._accumulate(ga, owned=ga is not g)

    return Tensor._result(np.broadcast_to(a.data, shape).copy(), (a,), bw)


def softmax(t, axis=-1):
    """Max-subtracted softmax; finite output for any finite input."""
    a = t
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        a._accumulate(out * (g - dot), owned=True)

    return Tensor._result(out, (a,), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis."""
    a, gm, bt = x, gamma, beta
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gm.data + bt.data
    d = a.data.shape[-1]

    def bw(g):
        if gm.requires_grad:
            gm._accumulate((g * xhat).reshape(-1, d).sum(axis=0), owned=True)
        if bt.requires_grad:
            bt._accumulate(g.reshape(-1, d).sum(axis=0), owned=True)
        if a.requires_grad:
            gg = g * gm.data
            m1 = np.mean(gg, axis=-1, keepdims=True)
            m2 = np.mean(gg * xhat, axis=-1, keepdims=True)
            a._accumulate((gg - m1 - xhat * m2) * inv, owned=True)

    return Tensor._result(out, (a, gm, bt), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 inputs in float32


def gelu(t):
    """Tanh-approximate GELU."""
    a = t
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du), owned=True)

    return Tensor._result(out, (a,), bw)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over (..., T, d) operands.

    `mask` is an additive numpy array broadcastable onto the score matrix
    (use large negatives to hide keys); it never receives gradients.
    """
    d = q.shape[-1]
    scores = matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * (1.0 / np.sqrt(d))
    if mask is not None:
        scores = scores + Tensor(np.asarray(mask, dtype=scores.dtype))
    return matmul(softmax(scores, axis=-1), v)


def linear(x, w, b):
    """Fused x @ w + b for (..., d_in) inputs; one tape node."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeMismatch(f"linear: {xd.shape} @ {wd.shape}")
    out = np.matmul(xd, wd)
    out += bd

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, wd.T), owned=True)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w._accumulate(xd.reshape(-1, xd.shape[-1]).T @ g2, owned=True)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0), owned=True)

    return Tensor._result(out, (x, w, b), bw)


def multihead_attention(q, k, v, heads, mask=None):
    """Fused multi-head scaled-dot-product attention over (B, T, D) streams.

    Splits D into `heads`, attends with an optional additive mask
    broadcastable to (B, heads, Tq, Tk), and re-merges. Single tape node with
    a hand-derived backward (validated by the finite-difference suite).
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def heads_first(arr, t):
        return arr.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    qh = heads_first(q.data, tq)
    kh = heads_first(k.data, tk)
    vh = heads_first(v.data, tk)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    scores *= scale
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores
    outh = np.matmul(probs, vh)
    out = outh.transpose(0, 2, 1, 3).reshape(b, tq, d)

    def bw(g):
        gh = g.reshape(b, tq, heads, dh).transpose(0, 2, 1, 3)
        if v.requires_grad:
            dv = np.matmul(probs.transpose(0, 1, 3, 2), gh)
            v._accumulate(dv.transpose(0, 2, 1, 3).reshape(b, tk, d), owned=True)
        dp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
        ds *= scale
        if q.requires_grad:
            dq = np.matmul(ds, kh)
            q._accumulate(dq.transpose(0, 2, 1, 3).reshape(b, tq, d), owned=True)
        if k.requires_grad:
            dk = np.matmul(ds.transpose(0, 1, 3, 2), qh)
            k._accumulate(dk.transpose(0, 2, 1, 3).reshape(b, tk, d), owned=True)

    return Tensor._result(out, (q, k, v), bw)


def embedding(table, ids):
    """Row lookup `table[ids]`; gradient scatters back into the table."""
    a = table
    ids = np.asarray(ids)
    out = a.data[ids]

    def bw(g):
        dt = np.zeros_like(a.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, a.data.shape[-1]))
        a._accumulate(dt, owned=True)

    return Tensor._result(out.copy(), (a,), bw)


def cosine(u, v, axis=-1):
    """Cosine similarity along `axis`, built from differentiable primitives."""
    uv = (u * v).sum(axis=axis)
    uu = (u * u).sum(axis=axis)
    vv = (v * v).sum(axis=axis)
    return uv * (uu * vv).pow(-0.5)


# -- optimization -----------------------------------------------------------


def adam_init(params):
    """Zeroed AdamW state for a list of parameter tensors."""
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.99), eps=1e-8,
              weight_decay=0.01, skip=None):
    """One decoupled-weight-decay Adam update, in place.

    `skip`, when given, is a boolean list marking parameters to leave
    untouched this step (their moments are not advanced either).
    Raises NonFinite if the aggregate update overflows.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    total = 0.0
    for i, (p, g) in enumerate(zip(params, grads)):
        if skip is not None and skip[i]:
            continue
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        total += float(np.dot(update.ravel(), update.ravel()))
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * update
    if not np.isfinite(total):
        raise NonFinite("non-finite Adam update")
    return state


def clip_grad_norm(grads, max_norm=1.0):
    """Scale `grads` in place so their global L2 norm is at most `max_norm`.

    Returns the pre-clip norm. Direction is preserved; inputs below the
    threshold pass through bitwise unchanged.
    """
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NonFinite("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g *= scale
    return norm


# -- checkpoint i/o ----------------------------------------------------------

CHECKPOINT_MAGIC = b"ATK1"
_U32 = np.dtype("<u4")


def save_tensors(path, named_arrays):
    """Write named float32 arrays to the ATK1 binary format.

    Layout (little-endian): magic "ATK1", u32 tensor count, then per tensor
    {u32 name length, utf-8 name, u32 rank, u32 extents..., raw float32 data},
    finally a u32 CRC32 of everything before it.
    """
    chunks = [CHECKPOINT_MAGIC, np.uint32(len(named_arrays)).astype(_U32).tobytes()]
    for name, arr in named_arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        chunks.append(np.uint32(len(nb)).astype(_U32).tobytes())
        chunks.append(nb)
        chunks.append(np.uint32(arr.ndim).astype(_U32).tobytes())
        chunks.append(np.asarray(arr.shape, dtype=_U32).tobytes())
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    crc = np.uint32(zlib.crc32(payload) & 0xFFFFFFFF).astype(_U32).tobytes()
    with open(path, "wb") as f:
        f.write(payload)
        f.write(crc)


def load_tensors(path):
    """Read an ATK1 file back into a dict of float32 arrays.

    Raises ChecksumMismatch on a bad magic or CRC.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise ChecksumMismatch(f"{path}: not an ATK1 checkpoint")
    payload, crc_bytes = blob[:-4], blob[-4:]
    crc = int(np.frombuffer(crc_bytes, dtype=_U32)[0])
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    off = 4
    count = int(np.frombuffer(payload, dtype=_U32, count=1, offset=off)[0])
    off += 4
    out = {}
    for _ in range(count):
        name_len = int(np.frombuffer(payload, dtype=_U32, count=1, offset=off)[0])
        off += 4
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        rank = int(np.frombuffer(payload, dtype=_U32, count=1, offset=off)[0])
        off += 4
        extents = np.frombuffer(payload, dtype=_U32, count=rank, offset=off)
        off += 4 * rank
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(extents)
        off += 4 * n
        out[name] = arr.copy()
    return out
