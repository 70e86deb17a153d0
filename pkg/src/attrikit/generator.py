"""Conditional flow-matching image decoder.

The decoder is a small DiT-style transformer over image patch tokens that
predicts a velocity field along the straight noise-to-image path
x_t = (1 - t) * x0 + t * x1 (target velocity x1 - x0). Conditioning enters
through two decoupled cross-attention channels per block: caption tokens
(the prompt channel) and attribute-embedding tokens (the adapter channel).
Each channel has a learned null replacement so unconditional branches are
trained and classifier-free guidance stays in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, synthdata, tensorcore as tc
from .tensorcore import Tensor

__all__ = [
    "PromptSpec", "FlowState", "NullCondition", "DecoderConfig", "Decoder",
    "default_caption_vocab", "flow_matching_loss", "sample", "integrate",
]


# -- prompt channel ----------------------------------------------------------

_STRUCTURE_WORDS = ("a", "at", "on", "background")


def default_caption_vocab():
    """[PAD], structural words, then every enum value word."""
    vocab = ["[PAD]", *_STRUCTURE_WORDS]
    for attr_id in synthdata.ATTRIBUTE_IDS:
        vocab.extend(synthdata.VALUES_FOR[attr_id])
    return tuple(vocab)


_VALUE_FIELD = {
    value: synthdata.ATTR_FIELDS[attr_id]
    for attr_id in synthdata.ATTRIBUTE_IDS
    for value in synthdata.VALUES_FOR[attr_id]
}


@dataclass(frozen=True)
class PromptSpec:
    """Subset of scene fields to verbalize as a caption.

    Serializes through a fixed template ("a {size} {color} {shape} at
    {position} on {bg} background, {brightness}") with absent fields simply
    dropped; parsing recovers the field set because every value word is
    globally unique.
    """

    shape: str | None = None
    fg_color: str | None = None
    size: str | None = None
    position: str | None = None
    bg_color: str | None = None
    brightness: str | None = None

    @classmethod
    def from_scene(cls, scene, exclude=()):
        exclude_fields = {synthdata.ATTR_FIELDS.get(e, e) for e in exclude}
        return cls(**{
            f: (None if f in exclude_fields else getattr(scene, f))
            for f in synthdata.ATTR_FIELDS.values()
        })

    def fields(self):
        return {f: v for f in synthdata.ATTR_FIELDS.values()
                if (v := getattr(self, f)) is not None}

    def to_tokens(self):
        toks = ["a"]
        for f in ("size", "fg_color", "shape"):
            if getattr(self, f) is not None:
                toks.append(getattr(self, f))
        if self.position is not None:
            toks += ["at", self.position]
        if self.bg_color is not None:
            toks += ["on", self.bg_color, "background"]
        if self.brightness is not None:
            toks.append(self.brightness)
        return toks

    def to_text(self):
        toks = self.to_tokens()
        if self.brightness is not None:
            toks[-1] = ", " + toks[-1]
        return " ".join(toks).replace(" , ", ", ")

    @classmethod
    def parse_text(cls, text):
        fields = {}
        for tok in text.replace(",", " ").split():
            if tok in _VALUE_FIELD:
                fields[_VALUE_FIELD[tok]] = tok
            elif tok not in _STRUCTURE_WORDS:
                raise ValueError(f"unknown caption word: {tok!r}")
        return cls(**fields)


@dataclass
class FlowState:
    """One point along a sampling trajectory."""

    x_t: np.ndarray
    t: float


@dataclass
class NullCondition:
    """Learned stand-ins used whenever a conditioning channel is absent."""

    attr_block: np.ndarray
    prompt_token: np.ndarray


# -- decoder -----------------------------------------------------------------


@dataclass(frozen=True)
class DecoderConfig:
    patch_size: int = 4
    dim: int = 64
    depth: int = 6
    heads: int = 4
    image_side: int = 32
    attr_tokens: int = 8
    caption_vocab: tuple = field(default_factory=default_caption_vocab)

    def __post_init__(self):
        if self.image_side % self.patch_size:
            raise ValueError("image side must be divisible by patch size")


class Decoder:
    def __init__(self, config=DecoderConfig(), seed=0, dtype=np.float32, store=None, prefix="dec"):
        self.config = config
        c = config
        self.store = store if store is not None else nn.ParamStore(seed + 1, dtype)
        s, p = self.store, prefix
        in_dim = c.patch_size * c.patch_size * 3
        self.patch_proj = nn.Linear(s, f"{p}.patch", in_dim, c.dim)
        self.time_fc1 = nn.Linear(s, f"{p}.time.fc1", c.dim, c.dim)
        self.time_fc2 = nn.Linear(s, f"{p}.time.fc2", c.dim, c.dim)
        self.cap_emb = s.param(f"{p}.cap_emb", (len(c.caption_vocab), c.dim))
        self.null_attr = s.param(f"{p}.null_attr", (c.attr_tokens, c.dim))
        self.null_prompt = s.param(f"{p}.null_prompt", (c.dim,))
        self.blocks = [
            nn.Block(s, f"{p}.blocks.{i}", c.dim, c.heads, cross_sources=("text", "ip"))
            for i in range(c.depth)
        ]
        self.out_ln = nn.LayerNorm(s, f"{p}.out_ln", c.dim)
        self.head = nn.Linear(s, f"{p}.head", c.dim, in_dim, zero=True)
        grid = c.image_side // c.patch_size
        self.pos2d = nn.sincos_2d(grid, c.dim).astype(self.store.dtype)
        self.cap_pos = nn.sincos_1d(np.arange(32), c.dim).astype(self.store.dtype)
        self._cap_id = {w: i for i, w in enumerate(c.caption_vocab)}

    @property
    def null_condition(self):
        return NullCondition(self.null_attr.data.copy(), self.null_prompt.data.copy())

    def caption_ids(self, prompt):
        return [self._cap_id[w] for w in prompt.to_tokens()]

    # -- conditioning assembly ------------------------------------------------

    def _attr_context(self, batch, attr_tokens, keep):
        l, d = self.config.attr_tokens, self.config.dim
        null = tc.broadcast_to(self.null_attr.reshape(1, l, d), (batch, l, d))
        if attr_tokens is None:
            return null, None
        if not isinstance(attr_tokens, Tensor):
            attr_tokens = Tensor(np.asarray(attr_tokens, dtype=self.store.dtype))
        if keep is None or bool(np.all(keep)):
            return attr_tokens, None
        ctx = tc.concat([null, attr_tokens], axis=1)
        key_mask = np.concatenate([~keep[:, None].repeat(l, 1), keep[:, None].repeat(l, 1)], axis=1)
        return ctx, nn.key_mask_to_additive(key_mask).astype(self.store.dtype)

    def _prompt_context(self, batch, prompt_ids, keep):
        d = self.config.dim
        null = tc.broadcast_to(self.null_prompt.reshape(1, 1, d), (batch, 1, d))
        if prompt_ids is None:
            return null, None
        ids, pad_keep = nn.pad_token_batch(list(prompt_ids))
        cap = tc.embedding(self.cap_emb, ids) + Tensor(self.cap_pos[: ids.shape[1]])
        if keep is None or bool(np.all(keep)):
            if bool(np.all(pad_keep)):
                return cap, None
            return cap, nn.key_mask_to_additive(pad_keep).astype(self.store.dtype)
        ctx = tc.concat([null, cap], axis=1)
        key_mask = np.concatenate([~keep[:, None], pad_keep & keep[:, None]], axis=1)
        return ctx, nn.key_mask_to_additive(key_mask).astype(self.store.dtype)

    # -- forward ----------------------------------------------------------------

    def velocity_batch(self, x_t, t, attr_tokens=None, prompt_ids=None,
                       attr_keep=None, prompt_keep=None):
        """Predicted velocity, same shape as x_t.

        attr_tokens: (B, l, d) attribute embeddings or None for the null
        branch; attr_keep/prompt_keep are per-sample booleans marking which
        rows keep their real conditioning (False routes to the learned null).
        """
        c = self.config
        x_np = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=self.store.dtype)
        b = x_np.shape[0]
        patches = nn.patchify(x_np.astype(self.store.dtype), c.patch_size)
        temb = nn.time_features(t, c.dim).astype(self.store.dtype)
        temb = self.time_fc2(tc.gelu(self.time_fc1(Tensor(temb))))
        x = self.patch_proj(Tensor(patches)) + Tensor(self.pos2d)
        x = x + temb.reshape(b, 1, c.dim)

        contexts = {
            "text": self._prompt_context(b, prompt_ids, prompt_keep),
            "ip": self._attr_context(b, attr_tokens, attr_keep),
        }
        for blk in self.blocks:
            x = blk(x, contexts=contexts)
        out = nn.unpatchify(self.head(self.out_ln(x)), c.patch_size, c.image_side)
        if not np.all(np.isfinite(out.data)):
            raise tc.NonFinite("non-finite velocity output")
        return out

    def velocity(self, state, attr=None, prompt=None):
        """Single-state convenience wrapper over velocity_batch (no tape)."""
        attr_tokens = None
        if attr is not None:
            tokens = attr.tokens if hasattr(attr, "tokens") else np.asarray(attr)
            attr_tokens = tokens[None]
        prompt_ids = [self.caption_ids(prompt)] if prompt is not None else None
        t = np.full((1,), float(state.t))
        with tc.no_grad():
            v = self.velocity_batch(state.x_t[None], t, attr_tokens, prompt_ids)
        return v.data[0]


# -- training loss --------------------------------------------------------------


def flow_matching_loss(model, x1, attr_tokens=None, prompt_ids=None, rng=None,
                       attr_keep=None, prompt_keep=None):
    """Velocity-regression loss along the straight path.

    Draws t ~ U(0,1) and x0 ~ N(0,I) from `rng`, forms
    x_t = (1 - t) x0 + t x1 and returns mean squared error between the
    predicted velocity and the target x1 - x0, as a float64 scalar tensor.
    """
    x1 = np.asarray(x1, dtype=np.float32)
    b = x1.shape[0]
    t = rng.random(b)
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    tt = t.astype(np.float32)[:, None, None, None]
    x_t = (1.0 - tt) * x0 + tt * x1
    target = x1 - x0
    v = model.velocity_batch(x_t, t, attr_tokens, prompt_ids, attr_keep, prompt_keep)
    diff = v - Tensor(target)
    return (diff * diff).mean().astype(np.float64)


# -- sampling ----------------------------------------------------------------------


def integrate(model, refs, prompt_ids, steps, text_cfg_scale, rng, batch=1):
    """Euler-integrate the composed velocity field from noise to images.

    refs: list of (attr_tokens (B, l, d), weight scalar or (B,)) pairs.
    Returns float32 images clamped to [-1, 1]. Raises NonFinite with the
    offending step index if the trajectory blows up.
    """
    from . import compose  # late import: compose builds on this module's decoder API

    side = model.config.image_side
    x = rng.standard_normal((batch, side, side, 3))
    dt = 1.0 / steps
    with tc.no_grad():
        for i in range(steps):
            t = np.full((batch,), i * dt)
            v = compose.composed_velocity_arrays(model, x, t, refs, prompt_ids, text_cfg_scale)
            if not np.all(np.isfinite(v)):
                raise tc.NonFinite(f"non-finite velocity at sampling step {i}")
            x = x + dt * v
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def sample(model, attr_sets, prompt, steps=20, guidance=None, rng=None):
    """Generate one image from weighted attribute references plus a prompt.

    attr_sets: list of (AttrEmbedding-or-(l,d)-array, weight). With an empty
    list this reduces to text-conditional sampling.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    scale = 1.0 if guidance is None else float(guidance.text_cfg_scale)
    refs = []
    for emb, w in attr_sets:
        tokens = emb.tokens if hasattr(emb, "tokens") else np.asarray(emb)
        if not np.isfinite(w):
            raise ValueError("reference weights must be finite")
        refs.append((tokens[None], float(w)))
    prompt_ids = [model.caption_ids(prompt)] if prompt is not None else None
    return integrate(model, refs, prompt_ids, steps, scale, rng, batch=1)[0]
