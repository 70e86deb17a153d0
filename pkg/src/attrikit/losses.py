"""Training objectives: generative reconstruction + pairwise contrastive term.

The generative side reconstructs one image of a pair from the other image's
positive-attribute embedding plus the target's full caption. The contrastive
side encodes both images under one sampled positive and one sampled negative
attribute and pushes the positive pair together while repelling the three
other pairings, through an exponentiated temperature-scaled cosine.

All loss arithmetic from the pooled embeddings onward runs in float64 and the
contrastive ratio is evaluated in log space, so small temperatures cannot
overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .encoder import pool
from .generator import PromptSpec, flow_matching_loss
from .synthdata import scene_image
from .tensorcore import Tensor

__all__ = ["LossConfig", "ZeroVector", "generative_loss", "similarity",
           "log_similarity", "contrastive_loss", "contrastive_from_pooled",
           "total_loss"]


class ZeroVector(ValueError):
    """A pooled embedding has (numerically) zero norm; cosine is undefined."""


@dataclass(frozen=True)
class LossConfig:
    gen_weight: float = 1.0
    con_weight: float = 0.01
    temperature: float = 0.1

    def __post_init__(self):
        if self.gen_weight <= 0 or self.con_weight < 0 or self.temperature <= 0:
            raise ValueError("weights must be positive (con_weight may be zero)")


def _norm_checked(pooled):
    """float64 cast with the zero-norm guard both loss paths share."""
    p64 = pooled.astype(np.float64) if isinstance(pooled, Tensor) else Tensor(pooled, dtype=np.float64)
    norms = np.sqrt((p64.data * p64.data).sum(axis=-1))
    if np.any(norms < 1e-12):
        raise ZeroVector("pooled embedding norm below 1e-12")
    return p64


# -- generative side -----------------------------------------------------------


def generative_loss_batch(bundle, ref_images, gt_images, positive_lists,
                          gt_caption_ids, rng, attr_keep=None, prompt_keep=None):
    """Batched reconstruction loss; every positive attribute is passed, never a subset."""
    attr_tokens = bundle.encoder.encode_batch(ref_images, positive_lists)
    return flow_matching_loss(bundle.decoder, gt_images, attr_tokens,
                              gt_caption_ids, rng, attr_keep, prompt_keep)


def generative_loss(bundle, pair, direction, rng):
    """Reconstruct one image of the pair from the other's positive embedding.

    direction: "x->y" makes x the reference and y the ground truth; "y->x"
    the reverse. The ground-truth caption always verbalizes the full scene.
    """
    if direction not in ("x->y", "y->x"):
        raise ValueError("direction must be 'x->y' or 'y->x'")
    if not pair.positives or not pair.negatives:
        raise ValueError("pair must carry at least one positive and one negative")
    side = bundle.dec_config.image_side
    ref_scene, gt_scene = (
        (pair.scene_x, pair.scene_y) if direction == "x->y" else (pair.scene_y, pair.scene_x))
    ref = scene_image(ref_scene, side)[None]
    gt = scene_image(gt_scene, side)[None]
    positives = [[a for a, _ in pair.positives]]
    caption = [bundle.decoder.caption_ids(PromptSpec.from_scene(gt_scene))]
    return generative_loss_batch(bundle, ref, gt, positives, caption, rng)


# -- contrastive side --------------------------------------------------------------


def contrastive_from_pooled(x_pos, x_neg, y_pos, y_neg, temperature):
    """Per-pair contrastive losses from four pooled-embedding tensors.

    Evaluates -log of the positive pair's share of the four-term similarity
    sum via log-sum-exp (shifted by the 1/temperature bound, which keeps
    every exponent in (-inf, 0]).
    """
    inv_t = 1.0 / temperature
    z_pp = tc.cosine(x_pos, y_pos) * inv_t
    z_pn = tc.cosine(x_pos, y_neg) * inv_t
    z_np = tc.cosine(x_neg, y_pos) * inv_t
    z_nn = tc.cosine(x_neg, y_neg) * inv_t
    total = None
    for z in (z_pp, z_pn, z_np, z_nn):
        e = (z - inv_t).exp()
        total = e if total is None else total + e
    lse = total.log() + inv_t
    return lse - z_pp  # == -log(exp(z_pp) / sum)


def contrastive_terms_batch(bundle, images_x, images_y, pos_attrs, neg_attrs,
                            temperature):
    """Per-pair contrastive losses as a (B,) float64 tensor.

    Encodes the cross product {x, y} x {positive, negative} in one batch,
    then scores it with contrastive_from_pooled.
    """
    b = len(images_x)
    stacked = np.concatenate([images_x, images_x, images_y, images_y], axis=0)
    attr_lists = (
        [[a] for a in pos_attrs] + [[a] for a in neg_attrs]
        + [[a] for a in pos_attrs] + [[a] for a in neg_attrs]
    )
    pooled = _norm_checked(pool(bundle.encoder.encode_batch(stacked, attr_lists)))
    return contrastive_from_pooled(
        pooled[0:b], pooled[b:2 * b], pooled[2 * b:3 * b], pooled[3 * b:4 * b],
        temperature)


def log_similarity(bundle, image_x, attr_x, image_y, attr_y, temperature=0.1):
    """cos(pooled_x, pooled_y) / temperature for two (image, attribute) inputs."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    px = _norm_checked(bundle.embed(image_x, [attr_x]).pooled)
    py = _norm_checked(bundle.embed(image_y, [attr_y]).pooled)
    return float(tc.cosine(px, py).data) / temperature


def similarity(bundle, image_x, attr_x, image_y, attr_y, temperature=0.1):
    """Exponentiated temperature-scaled cosine of two pooled attribute embeddings."""
    return float(np.exp(log_similarity(bundle, image_x, attr_x, image_y, attr_y, temperature)))


def contrastive_loss(bundle, pair, rng, temperature=0.1):
    """Sample one positive and one negative attribute and score the pair.

    Returns a float64 scalar tensor (differentiable when called under an
    active tape).
    """
    if not pair.positives or not pair.negatives:
        raise ValueError("pair must carry at least one positive and one negative")
    pos = pair.positives[rng.integers(len(pair.positives))][0]
    neg = pair.negatives[rng.integers(len(pair.negatives))][0]
    side = bundle.dec_config.image_side
    ix = scene_image(pair.scene_x, side)[None]
    iy = scene_image(pair.scene_y, side)[None]
    terms = contrastive_terms_batch(bundle, ix, iy, [pos], [neg], temperature)
    return terms.mean()


# -- combined objective ----------------------------------------------------------------


def total_loss(bundle, pair, cfg, rng):
    """Weighted sum of the two objectives plus a per-term numeric breakdown.

    With con_weight == 0 the contrastive branch is skipped entirely and the
    result equals gen_weight * generative_loss exactly.
    """
    direction = "x->y" if rng.integers(2) == 0 else "y->x"
    gen = generative_loss(bundle, pair, direction, rng)
    if cfg.con_weight == 0:
        total = gen * cfg.gen_weight if cfg.gen_weight != 1.0 else gen
        return total, {"gen": float(gen.data), "con": None, "total": float(total.data)}
    con = contrastive_loss(bundle, pair, rng, cfg.temperature)
    total = gen * cfg.gen_weight + con * cfg.con_weight
    return total, {"gen": float(gen.data), "con": float(con.data), "total": float(total.data)}
