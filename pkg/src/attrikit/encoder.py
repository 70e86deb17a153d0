"""Attribute encoder: (image, attribute names) -> l embedding tokens + pooled head.

The input sequence is [attribute words | image patches | learned queries].
Attribute words carry a shared segment embedding and no positions, so the
attribute list is a set; the canonical-order sort below makes that exact at
the bit level. The first blocks attend jointly over everything, the final two
blocks refine the query tokens alone before the output projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, synthdata, tensorcore as tc
from .tensorcore import Tensor

__all__ = ["EncoderConfig", "AttrEmbedding", "AttrEncoder", "pool", "UnknownToken", "default_vocab"]


class UnknownToken(KeyError):
    """Attribute surface form contains a word outside the encoder vocabulary."""


def default_vocab():
    """[PAD] plus every word used by the attribute synonym table."""
    words = sorted({w for forms in synthdata.SYNONYMS.values() for f in forms for w in f.split()})
    return ("[PAD]", *words)


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    queries: int = 8
    image_side: int = 32
    vocab: tuple = field(default_factory=default_vocab)

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError("image side must be divisible by patch size")
        if self.queries < 1:
            raise ValueError("need at least one query token")


@dataclass
class AttrEmbedding:
    """l x d attribute tokens plus their mean-pooled 1-D form."""

    tokens: np.ndarray
    pooled: np.ndarray


def pool(tokens):
    """Arithmetic mean over the token axis; accepts arrays or tape tensors."""
    if isinstance(tokens, Tensor):
        return tokens.mean(axis=-2)
    return np.asarray(tokens).mean(axis=-2)


class AttrEncoder:
    def __init__(self, config=EncoderConfig(), seed=0, dtype=np.float32, store=None, prefix="enc"):
        self.config = config
        c = config
        self.store = store if store is not None else nn.ParamStore(seed, dtype)
        s, p = self.store, prefix
        self.word_emb = s.param(f"{p}.word_emb", (len(c.vocab), c.dim))
        self.attr_segment = s.param(f"{p}.attr_segment", (c.dim,))
        self.patch_proj = nn.Linear(s, f"{p}.patch", c.patch_size * c.patch_size * 3, c.dim)
        self.queries = s.param(f"{p}.queries", (c.queries, c.dim))
        self.joint_blocks = [
            nn.Block(s, f"{p}.blocks.{i}", c.dim, c.heads) for i in range(c.depth - 2)
        ]
        self.query_blocks = [
            nn.Block(s, f"{p}.blocks.{i}", c.dim, c.heads)
            for i in range(c.depth - 2, c.depth)
        ]
        self.out_ln = nn.LayerNorm(s, f"{p}.out_ln", c.dim)
        self.out_proj = nn.Linear(s, f"{p}.out_proj", c.dim, c.dim)
        grid = c.image_side // c.patch_size
        self.pos2d = nn.sincos_2d(grid, c.dim).astype(self.store.dtype)
        self._word_id = {w: i for i, w in enumerate(c.vocab)}

    # -- tokenization ------------------------------------------------------

    def attr_word_ids(self, attrs):
        """Canonically ordered word ids for an attribute set.

        Attributes are sorted by family then surface form before tokenizing,
        which is what makes encode() exactly order-invariant.
        """
        names = []
        for a in attrs:
            if isinstance(a, synthdata.AttributeName):
                names.append(a)
            else:
                names.append(synthdata.resolve_attribute(a))
        order = {aid: i for i, aid in enumerate(synthdata.ATTRIBUTE_IDS)}
        names.sort(key=lambda a: (order[a.canonical_id], a.surface_form))
        ids = []
        for a in names:
            for w in a.surface_form.split():
                if w not in self._word_id:
                    raise UnknownToken(w)
                ids.append(self._word_id[w])
        return ids

    # -- forward -----------------------------------------------------------

    def encode_batch(self, images, attr_lists):
        """Tape-connected forward pass.

        images: (B, S, S, 3) array in [-1, 1]; attr_lists: per-sample lists of
        attribute names/surface forms (nonempty). Returns a (B, l, d) Tensor.
        """
        c = self.config
        if len(attr_lists) != len(images):
            raise tc.ShapeMismatch("one attribute list per image")
        ids, keep = nn.pad_token_batch([self.attr_word_ids(a) for a in attr_lists])
        b, ta = ids.shape
        n_patch = self.pos2d.shape[0]
        total = ta + n_patch + c.queries

        words = tc.embedding(self.word_emb, ids) + self.attr_segment
        patches = nn.patchify(np.asarray(images, dtype=self.store.dtype), c.patch_size)
        ptok = self.patch_proj(Tensor(patches)) + Tensor(self.pos2d)
        qtok = tc.broadcast_to(self.queries.reshape(1, c.queries, c.dim), (b, c.queries, c.dim))
        x = tc.concat([words, ptok, qtok], axis=1)

        key_mask = np.ones((b, total), dtype=bool)
        key_mask[:, :ta] = keep
        mask = nn.key_mask_to_additive(key_mask).astype(self.store.dtype)
        for blk in self.joint_blocks:
            x = blk(x, mask=mask)
        x = x[:, ta + n_patch:, :]
        for blk in self.query_blocks:
            x = blk(x)
        return self.out_proj(self.out_ln(x))

    def encode(self, image, attrs):
        """Inference on one image; returns the AttrEmbedding (tokens + pooled)."""
        if not attrs:
            raise ValueError("attrs must be nonempty")
        with tc.no_grad():
            tokens = self.encode_batch(np.asarray(image)[None], [attrs]).data[0]
        return AttrEmbedding(tokens=tokens, pooled=pool(tokens))
