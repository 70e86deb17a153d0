"""Transformer building blocks shared by the attribute encoder and the decoder.

Everything is built on tensorcore primitives; parameters are registered in a
ParamStore so checkpoints and the optimizer see one flat, ordered name space.
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

MASK_HIDDEN = -1e9  # large enough that masked softmax weights underflow to exact zero


class ParamStore:
    """Ordered registry of named parameter tensors with seeded initialization."""

    def __init__(self, seed, dtype=np.float32):
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x11717]))
        self.dtype = np.dtype(dtype)
        self._params = {}

    def param(self, name, shape, scale=0.02, fill=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        if fill is not None:
            data = np.full(shape, fill, dtype=self.dtype)
        else:
            data = (self.rng.standard_normal(shape) * scale).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def named(self):
        return dict(self._params)

    def tensors(self):
        return list(self._params.values())

    def names(self):
        return list(self._params)


class Linear:
    def __init__(self, store, name, d_in, d_out, zero=False):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.w = store.param(f"{name}.w", (d_in, d_out), scale=scale, fill=0.0 if zero else None)
        self.b = store.param(f"{name}.b", (d_out,), fill=0.0)

    def __call__(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return tc.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store, name, dim):
        self.gamma = store.param(f"{name}.g", (dim,), fill=1.0)
        self.beta = store.param(f"{name}.b", (dim,), fill=0.0)

    def __call__(self, x):
        return tc.layernorm(x, self.gamma, self.beta)


def split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose((0, 2, 1, 3))


def merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, t, h * dh)


class SelfAttention:
    def __init__(self, store, name, dim, heads):
        self.heads = heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.wk = Linear(store, f"{name}.k", dim, dim)
        self.wv = Linear(store, f"{name}.v", dim, dim)
        self.wo = Linear(store, f"{name}.out", dim, dim)

    def __call__(self, x, mask=None):
        """`mask` is an additive array broadcastable to (B, H, T, T)."""
        h = tc.multihead_attention(self.wq(x), self.wk(x), self.wv(x), self.heads, mask=mask)
        return self.wo(h)


class CrossAttention:
    """Query projection over the stream, separate key/value per context source.

    Multiple contexts share the query and their attention outputs are summed
    before the output projection, so each context has its own key/value
    pathway into every block.
    """

    def __init__(self, store, name, dim, heads, sources):
        self.heads = heads
        self.wq = Linear(store, f"{name}.q", dim, dim)
        self.kv = {
            src: (Linear(store, f"{name}.{src}_k", dim, dim),
                  Linear(store, f"{name}.{src}_v", dim, dim))
            for src in sources
        }
        self.wo = Linear(store, f"{name}.out", dim, dim)

    def __call__(self, x, contexts):
        """contexts: {source: (tokens Tensor (B,Tc,D), additive mask or None)}."""
        q = self.wq(x)
        acc = None
        for src, (ctx, mask) in contexts.items():
            wk, wv = self.kv[src]
            h = tc.multihead_attention(q, wk(ctx), wv(ctx), self.heads, mask=mask)
            acc = h if acc is None else acc + h
        return self.wo(acc)


class Mlp:
    def __init__(self, store, name, dim, hidden_mult=4):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden_mult * dim)
        self.fc2 = Linear(store, f"{name}.fc2", hidden_mult * dim, dim)

    def __call__(self, x):
        return self.fc2(tc.gelu(self.fc1(x)))


class Block:
    """Pre-LN transformer block; cross-attention only if sources are given."""

    def __init__(self, store, name, dim, heads, cross_sources=()):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, heads)
        self.cross = None
        if cross_sources:
            self.ln_c = LayerNorm(store, f"{name}.lnc", dim)
            self.cross = CrossAttention(store, f"{name}.cross", dim, heads, cross_sources)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.mlp = Mlp(store, f"{name}.mlp", dim)

    def __call__(self, x, mask=None, contexts=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        if self.cross is not None:
            x = x + self.cross(self.ln_c(x), contexts)
        return x + self.mlp(self.ln2(x))


# -- fixed (non-learned) embeddings ---------------------------------------------


def sincos_1d(positions, dim, max_period=10000.0):
    """Standard interleaved sin/cos table for integer or real positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def sincos_2d(grid, dim):
    """2-D positions for a (grid x grid) patch layout; half the dim per axis."""
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    emb_y = sincos_1d(ys.reshape(-1), dim // 2)
    emb_x = sincos_1d(xs.reshape(-1), dim // 2)
    return np.concatenate([emb_y, emb_x], axis=1)


def time_features(t, dim):
    """Sinusoidal features of a continuous time in [0, 1]."""
    return sincos_1d(np.asarray(t, dtype=np.float64) * 1000.0, dim)


def patchify(images, patch):
    """(B, S, S, 3) -> (B, (S/patch)^2, patch*patch*3), row-major patches."""
    b, s, _, c = images.shape
    g = s // patch
    x = images.reshape(b, g, patch, g, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


def unpatchify(tokens, patch, side):
    b = tokens.shape[0]
    g = side // patch
    x = tokens.reshape(b, g, g, patch, patch, 3)
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape(b, side, side, 3)


def pad_token_batch(token_lists, pad_id=0):
    """Right-pad ragged id lists; returns (ids (B, T), key_mask (B, T) bool)."""
    width = max(1, max(len(t) for t in token_lists))
    ids = np.full((len(token_lists), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(token_lists), width), dtype=bool)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
        mask[i, : len(toks)] = True
    return ids, mask


def key_mask_to_additive(key_mask):
    """(B, T) visibility -> additive (B, 1, 1, T) mask for attention scores."""
    add = np.where(key_mask, 0.0, MASK_HIDDEN).astype(np.float32)
    return add[:, None, None, :]
