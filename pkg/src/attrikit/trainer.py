"""Two-stage training loop with exact checkpoint/resume semantics.

Stage 1 optimizes the generative objective alone; stage 2 adds the
contrastive term. Every random draw for step s comes from a generator seeded
by (seed, s), so a run is a pure function of (seed, config, data) and
resuming from any checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import losses, tensorcore as tc
from .bundle import ModelBundle
from .encoder import pool
from .generator import PromptSpec, flow_matching_loss
from .losses import LossConfig
from .synthdata import scene_image

__all__ = ["TrainConfig", "train", "resume", "prepare_records", "load_log"]


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 8000
    stage2_steps: int = 2000
    batch: int = 16
    lr: float = 3e-4
    warmup_steps: int = 200          # linear warmup, restarted each stage
    clip_norm: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    attr_dropout: float = 0.1        # chance to swap conditioning for the learned null
    prompt_dropout: float = 0.1
    freeze_frac: float = 0.1         # encoder body frozen for this lead-in of stage 1
    checkpoint_every: int = 500
    betas: tuple = (0.9, 0.99)
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.stage1_steps <= 0 or self.stage2_steps < 0:
            raise ValueError("stage1_steps must be positive, stage2_steps non-negative")
        if self.warmup_steps > self.stage1_steps:
            raise ValueError("warmup exceeds stage length")

    @property
    def total_steps(self):
        return self.stage1_steps + self.stage2_steps


@dataclass
class _Prepared:
    images_x: np.ndarray
    images_y: np.ndarray
    positives: list        # per record: list of AttributeName
    negatives: list
    pos_surfaces: list     # per record: surface forms passed to the encoder
    captions_x: list       # full-scene caption ids
    captions_y: list


def prepare_records(records, bundle):
    """Materialize quantized images and caption ids once, up front."""
    side = bundle.dec_config.image_side
    images_x = np.stack([scene_image(r.scene_x, side) for r in records])
    images_y = np.stack([scene_image(r.scene_y, side) for r in records])
    return _Prepared(
        images_x=images_x,
        images_y=images_y,
        positives=[[a for a, _ in r.positives] for r in records],
        negatives=[[a for a, _ in r.negatives] for r in records],
        pos_surfaces=[[a for a, _ in r.positives] for r in records],
        captions_x=[bundle.decoder.caption_ids(PromptSpec.from_scene(r.scene_x)) for r in records],
        captions_y=[bundle.decoder.caption_ids(PromptSpec.from_scene(r.scene_y)) for r in records],
    )


def _step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x57E9, int(step)]))


def _frozen_mask(bundle):
    """True for encoder-body parameters (frozen during the stage-1 lead-in).

    The final two encoder blocks and the output projection play the
    connector role and stay trainable throughout, as does the decoder.
    """
    depth = bundle.enc_config.depth
    live = tuple(f"enc.blocks.{i}." for i in range(depth - 2, depth)) + ("enc.out_ln", "enc.out_proj")
    mask = []
    for name in bundle.param_names():
        frozen = name.startswith("enc.") and not name.startswith(live)
        mask.append(frozen)
    return mask


def _step_loss(bundle, prep, cfg, step, stage):
    """One optimization step's loss; consumes randomness in a fixed order."""
    rng = _step_rng(cfg.seed, step)
    n = len(prep.positives)
    idx = rng.integers(0, n, cfg.batch)
    dirs = rng.integers(0, 2, cfg.batch)
    attr_keep = rng.random(cfg.batch) >= cfg.attr_dropout
    prompt_keep = rng.random(cfg.batch) >= cfg.prompt_dropout

    ref_imgs = np.where(dirs[:, None, None, None] == 0,
                        prep.images_x[idx], prep.images_y[idx])
    gt_imgs = np.where(dirs[:, None, None, None] == 0,
                       prep.images_y[idx], prep.images_x[idx])
    gen_lists = [prep.pos_surfaces[i] for i in idx]
    captions = [prep.captions_y[i] if d == 0 else prep.captions_x[i]
                for i, d in zip(idx, dirs)]

    if stage == 1 or cfg.loss.con_weight == 0:
        tokens = bundle.encoder.encode_batch(ref_imgs, gen_lists)
        gen = flow_matching_loss(bundle.decoder, gt_imgs, tokens, captions, rng,
                                 attr_keep, prompt_keep)
        total = gen * cfg.loss.gen_weight if cfg.loss.gen_weight != 1.0 else gen
        return total, {"L_gen": float(gen.data), "total": float(total.data)}

    pos_pick = [prep.positives[i][rng.integers(len(prep.positives[i]))] for i in idx]
    neg_pick = [prep.negatives[i][rng.integers(len(prep.negatives[i]))] for i in idx]
    b = cfg.batch
    stacked = np.concatenate([
        ref_imgs, prep.images_x[idx], prep.images_x[idx],
        prep.images_y[idx], prep.images_y[idx]], axis=0)
    attr_lists = (gen_lists + [[a] for a in pos_pick] + [[a] for a in neg_pick]
                  + [[a] for a in pos_pick] + [[a] for a in neg_pick])
    tokens = bundle.encoder.encode_batch(stacked, attr_lists)
    gen = flow_matching_loss(bundle.decoder, gt_imgs, tokens[0:b], captions, rng,
                             attr_keep, prompt_keep)
    pooled = losses._norm_checked(pool(tokens[b:]))
    con = losses.contrastive_from_pooled(
        pooled[0:b], pooled[b:2 * b], pooled[2 * b:3 * b], pooled[3 * b:4 * b],
        cfg.loss.temperature).mean()
    total = gen * cfg.loss.gen_weight + con * cfg.loss.con_weight
    return total, {"L_gen": float(gen.data), "L_con": float(con.data),
                   "total": float(total.data)}


def _save_checkpoint(bundle, opt_state, step, path):
    names = bundle.param_names()
    arrays = {name: t.data for name, t in bundle.named_params().items()}
    for name, m, v in zip(names, opt_state["m"], opt_state["v"]):
        arrays[f"adam.m.{name}"] = m
        arrays[f"adam.v.{name}"] = v
    arrays["meta.step"] = np.array([float(step)], dtype=np.float32)
    arrays["meta.adam_step"] = np.array([float(opt_state["step"])], dtype=np.float32)
    from .bundle import SCHEMA_VERSION
    arrays["meta.schema_version"] = np.array([float(SCHEMA_VERSION)], dtype=np.float32)
    tc.save_tensors(path, arrays)


def load_checkpoint(bundle, path):
    """Restore weights + optimizer state; returns (opt_state, step)."""
    arrays = tc.load_tensors(path)
    names = bundle.param_names()
    opt_state = {"m": [], "v": [], "step": int(arrays["meta.adam_step"][0])}
    for name, t in bundle.named_params().items():
        for key in (name, f"adam.m.{name}", f"adam.v.{name}"):
            if key not in arrays:
                raise tc.ShapeMismatch(f"checkpoint missing tensor {key}")
            if arrays[key].shape != t.data.shape:
                raise tc.ShapeMismatch(
                    f"{key}: checkpoint shape {arrays[key].shape} != model {t.data.shape}")
        t.data = arrays[name].copy()
    for name in names:
        opt_state["m"].append(arrays[f"adam.m.{name}"].copy())
        opt_state["v"].append(arrays[f"adam.v.{name}"].copy())
    return opt_state, int(arrays["meta.step"][0])


def train(records, cfg=TrainConfig(), out_dir=None, bundle=None, start_step=0,
          opt_state=None, log_hook=None):
    """Run (or continue) the two-stage schedule; returns (bundle, log rows).

    Checkpoints land in out_dir every cfg.checkpoint_every steps, at the
    stage boundary, and at the end; per-step metrics are appended to
    out_dir/train_log.jsonl. A non-finite loss or gradient aborts with
    NonFinite; the last checkpoint on disk stays good.
    """
    if len(records) < cfg.batch:
        raise ValueError("dataset smaller than one batch")
    if bundle is None:
        bundle = ModelBundle(seed=cfg.seed)
    prep = records if isinstance(records, _Prepared) else prepare_records(records, bundle)
    params = bundle.params()
    if opt_state is None:
        opt_state = tc.adam_init(params)
    frozen = _frozen_mask(bundle)
    freeze_until = int(cfg.freeze_frac * cfg.stage1_steps)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))
        log_file = open(out_dir / "train_log.jsonl", "a")

    logs = []
    try:
        for step in range(start_step + 1, cfg.total_steps + 1):
            stage = 1 if step <= cfg.stage1_steps else 2
            step_in_stage = step if stage == 1 else step - cfg.stage1_steps
            lr = cfg.lr * min(1.0, step_in_stage / cfg.warmup_steps) if cfg.warmup_steps else cfg.lr

            bundle.zero_grads()
            loss, metrics = _step_loss(bundle, prep, cfg, step, stage)
            if not np.isfinite(loss.data):
                raise tc.NonFinite(f"non-finite loss at step {step}")
            loss.backward()
            grads = [p.grad if p.grad is not None else None for p in params]
            live = [g for g in grads if g is not None]
            grad_norm = tc.clip_grad_norm(live, cfg.clip_norm)
            tc.adam_step(params, grads, opt_state, lr, betas=cfg.betas,
                         weight_decay=cfg.weight_decay,
                         skip=frozen if step <= freeze_until else None)

            row = {"step": step, "stage": stage, "lr": lr, **metrics,
                   "grad_norm": grad_norm}
            logs.append(row)
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
            if log_hook is not None:
                log_hook(row)

            boundary = step == cfg.stage1_steps or step == cfg.total_steps
            if out_dir is not None and (step % cfg.checkpoint_every == 0 or boundary):
                _save_checkpoint(bundle, opt_state, step, out_dir / f"ckpt_{step:06d}.atk")
    finally:
        if log_file is not None:
            log_file.close()
    return bundle, logs


def resume(checkpoint_path, records, cfg, out_dir=None, bundle=None, log_hook=None):
    """Continue a run from a checkpoint; bitwise-identical to never stopping."""
    if bundle is None:
        bundle = ModelBundle(seed=cfg.seed)
    opt_state, step = load_checkpoint(bundle, checkpoint_path)
    return train(records, cfg, out_dir=out_dir, bundle=bundle,
                 start_step=step, opt_state=opt_state, log_hook=log_hook)


def config_to_dict(cfg):
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def config_from_dict(d):
    d = dict(d)
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    if "loss" in d and isinstance(d["loss"], dict):
        lknown = set(LossConfig.__dataclass_fields__)
        lunknown = set(d["loss"]) - lknown
        if lunknown:
            raise ValueError(f"unknown loss config keys: {sorted(lunknown)}")
        d["loss"] = LossConfig(**d["loss"])
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def load_log(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
