"""Command-line interface: one executable, JSON run configs.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every subcommand is
seeded (default 0, never wall-clock). ATTRIKIT_THREADS caps worker
parallelism for data generation; 0 or unset means single-threaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, synthdata, trainer
from .bundle import SCHEMA_VERSION, ModelBundle
from .compose import GuidanceConfig, compose_generate
from .encoder import EncoderConfig
from .generator import DecoderConfig, PromptSpec
from .losses import LossConfig
from .trainer import TrainConfig

__all__ = ["main", "RunConfig"]


class UsageError(Exception):
    pass


# -- run configuration ------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    count: int = 5000
    seed: int = 0
    min_positives: int = 1
    side: int = 32


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    patch_size: int = 4
    heads: int = 4
    queries: int = 8
    encoder_depth: int = 4
    decoder_depth: int = 6
    image_side: int = 32
    seed: int = 0

    def build(self):
        enc = EncoderConfig(patch_size=self.patch_size, dim=self.dim,
                            depth=self.encoder_depth, heads=self.heads,
                            queries=self.queries, image_side=self.image_side)
        dec = DecoderConfig(patch_size=self.patch_size, dim=self.dim,
                            depth=self.decoder_depth, heads=self.heads,
                            image_side=self.image_side, attr_tokens=self.queries)
        return ModelBundle(enc, dec, seed=self.seed)


@dataclass(frozen=True)
class ComposeConfig:
    steps: int = 20
    text_cfg: float = 3.0
    ref_weight: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    val_pairs: int = 1000
    val_seed: int = 1_000_001
    gallery_size: int = 500
    gallery_seed: int = 77
    personalization_cases: int = 20
    steps: int = 20
    text_cfg: float = 3.0


def _from_dict(cls, d, path):
    known = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class RunConfig:
    """All command sections with defaults embedded; dump/reload is lossless."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        d = asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise UsageError(f"config schema version {version} != {SCHEMA_VERSION}")
        unknown = set(d) - {"data", "model", "train", "compose", "eval"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        if "data" in d:
            kwargs["data"] = DataConfig(**_from_dict(DataConfig, d["data"], "data"))
        if "model" in d:
            kwargs["model"] = ModelConfig(**_from_dict(ModelConfig, d["model"], "model"))
        if "train" in d:
            t = dict(_from_dict(TrainConfig, d["train"], "train"))
            if "loss" in t and isinstance(t["loss"], dict):
                t["loss"] = LossConfig(**_from_dict(LossConfig, t["loss"], "train.loss"))
            if "betas" in t:
                t["betas"] = tuple(t["betas"])
            kwargs["train"] = TrainConfig(**t)
        if "compose" in d:
            kwargs["compose"] = ComposeConfig(**_from_dict(ComposeConfig, d["compose"], "compose"))
        if "eval" in d:
            kwargs["eval"] = EvalConfig(**_from_dict(EvalConfig, d["eval"], "eval"))
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _worker_threads():
    raw = os.environ.get("ATTRIKIT_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _load_bundle(ckpt_path, model_cfg=None):
    bundle = (model_cfg or ModelConfig()).build()
    bundle.load(ckpt_path)
    return bundle


# -- subcommands ----------------------------------------------------------------


def _cmd_gen_data(args):
    records = synthdata.generate_pairs(args.count, args.seed, args.min_positives)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = _worker_threads()
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    names = [(f"images/pair{i:06d}_x.ppm", f"images/pair{i:06d}_y.ppm")
             for i in range(len(records))]

    def write_pair(item):
        i, rec = item
        synthdata.write_ppm(out / names[i][0], rec.image_x(args.side))
        synthdata.write_ppm(out / names[i][1], rec.image_y(args.side))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(write_pair, enumerate(records)))
    else:
        for item in enumerate(records):
            write_pair(item)
    lines = []
    for i, rec in enumerate(records):
        lines.append(json.dumps({
            "image_x": names[i][0],
            "image_y": names[i][1],
            "positive": [{"name": a.surface_form, "desc": d} for a, d in rec.positives],
            "negative": [{"name": a.surface_form, "desc": d} for a, d in rec.negatives],
        }))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(records)} pairs to {out}")
    return 0


def _cmd_train(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_cfg = cfg.train
    if args.seed is not None:
        from dataclasses import replace
        train_cfg = replace(train_cfg, seed=args.seed)
    records = synthdata.load_dataset(args.data_dir)
    bundle = cfg.model.build()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    if args.resume:
        bundle, logs = trainer.resume(args.resume, records, train_cfg,
                                      out_dir=out_dir, bundle=bundle)
    else:
        bundle, logs = trainer.train(records, train_cfg, out_dir=out_dir, bundle=bundle)
    final = out_dir / f"ckpt_{train_cfg.total_steps:06d}.atk"
    print(f"trained {len(logs)} steps; final checkpoint {final}")
    return 0


def _cmd_eval(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    ev = cfg.eval
    bundle = _load_bundle(args.ckpt, cfg.model)
    report = {}

    val_pairs = synthdata.generate_pairs(ev.val_pairs, ev.val_seed)
    gap = evalkit.cosine_gap(bundle, val_pairs, seed=args.seed)
    report["delta"] = gap.delta
    report["mean_pos_cos"] = gap.mean_pos_cos
    report["mean_neg_cos"] = gap.mean_neg_cos

    images, _ = evalkit.make_gallery(ev.gallery_seed, ev.gallery_size,
                                     bundle.dec_config.image_side)
    index = evalkit.build_index(bundle, images)
    report["retrieval_top1"] = {
        attr: evalkit.retrieval_accuracy(index, attr) for attr in synthdata.ATTRIBUTE_IDS}
    report["retrieval_random_baseline"] = {
        attr: evalkit.random_retrieval_baseline(index, attr)
        for attr in synthdata.ATTRIBUTE_IDS}

    cases = evalkit.make_personalization_cases(args.seed, ev.personalization_cases)
    guidance = GuidanceConfig(text_cfg_scale=ev.text_cfg)
    report["personalization"] = evalkit.personalization_score(
        bundle, cases, steps=ev.steps, guidance=guidance, seed=args.seed)

    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_compose(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    bundle = _load_bundle(args.ckpt, cfg.model)
    references = []
    for spec in args.ref:
        path, _, attr = spec.partition(":")
        if not attr:
            raise UsageError(f"--ref must be <image.ppm>:<attribute>, got {spec!r}")
        references.append((synthdata.read_ppm(path), attr))
    weights = tuple(args.w) if args.w else ()
    if weights and len(weights) != len(references):
        raise UsageError("--w must be given once per --ref")
    guidance = GuidanceConfig(weights=weights, text_cfg_scale=args.text_cfg)
    prompt = PromptSpec.parse_text(args.prompt) if args.prompt else None
    image = compose_generate(bundle, references, prompt, guidance,
                             steps=args.steps, seed=args.seed)
    synthdata.write_ppm(args.out, image)
    print(f"wrote {args.out}")
    return 0


def _cmd_retrieve(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    bundle = _load_bundle(args.ckpt, cfg.model)
    images, _ = evalkit.make_gallery(args.gallery_seed, args.gallery_size,
                                     bundle.dec_config.image_side)
    attr_id = synthdata.resolve_attribute(args.attr).canonical_id
    index = evalkit.build_index(bundle, images, attr_ids=(attr_id,))
    query = synthdata.read_ppm(args.query)
    hits = evalkit.retrieve(bundle, index, query, args.attr, args.k)
    for rank, (img_id, cos) in enumerate(hits, start=1):
        print(json.dumps({"rank": rank, "image_id": img_id, "cosine": cos}))
    return 0


def _cmd_project(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    bundle = _load_bundle(args.ckpt, cfg.model)
    images, scenes = evalkit.make_gallery(args.gallery_seed, args.gallery_size,
                                          bundle.dec_config.image_side)
    attr_id = synthdata.resolve_attribute(args.attr).canonical_id
    pooled = bundle.pooled_batch(images, [[attr_id]] * len(images))
    labels = [s.value(attr_id) for s in scenes]
    lines = ["x,y,label,image_id"]
    try:
        points = evalkit.project2d(pooled)
        for i, (p, lab) in enumerate(zip(points, labels)):
            lines.append(f"{p[0]:.8f},{p[1]:.8f},{lab},{i}")
    except evalkit.DegenerateRank as err:
        print("warning: rank-deficient embeddings, writing 1-D layout", file=sys.stderr)
        lines = ["x,label,image_id"]
        for i, (p, lab) in enumerate(zip(err.points_1d, labels)):
            lines.append(f"{p:.8f},{lab},{i}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def _tiny_bundle(seed, dtype=np.float32):
    return ModelBundle(
        EncoderConfig(patch_size=8, dim=16, depth=2, heads=2, queries=2, image_side=16),
        DecoderConfig(patch_size=8, dim=16, depth=1, heads=2, image_side=16, attr_tokens=2),
        seed=seed, dtype=dtype)


def _cmd_selftest(args):
    """Fast numeric gate: gradient checks plus the closed-form loss identities."""
    from . import losses, tensorcore as tc
    from .tensorcore import Tensor

    failures = []

    def check(name, ok):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(args.seed)

    # composite-op gradients against central differences, float64
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.standard_normal((5, 4)) * 0.5, requires_grad=True, dtype=np.float64)

    def f():
        return (tc.gelu(tc.matmul(x, w)) * tc.softmax(x @ w)).mean()

    x.zero_grad()
    w.zero_grad()
    f().backward()
    worst = 0.0
    for t in (x, w):
        num = np.zeros_like(t.data)
        flat, nf = t.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + 1e-3
            up = float(f().data)
            flat[i] = keep - 1e-3
            dn = float(f().data)
            flat[i] = keep
            nf[i] = (up - dn) / 2e-3
        worst = max(worst, float(np.max(np.abs(t.grad - num) / np.maximum(np.abs(num), 1e-3))))
    check(f"composite-op gradients vs finite differences (rel err {worst:.1e})", worst < 1e-4)

    # end-to-end combined-loss gradient probe on a float64 tiny model
    bundle = _tiny_bundle(args.seed, dtype=np.float64)
    pair = synthdata.sample_pair(args.seed)
    cfg = LossConfig()

    def run_loss():
        return losses.total_loss(bundle, pair, cfg, np.random.default_rng(0))[0]

    bundle.zero_grads()
    run_loss().backward()
    probe = [p for p in bundle.params() if p.grad is not None and np.abs(p.grad).max() > 1e-5][:4]
    worst = 0.0
    for p in probe:
        flat = p.data.reshape(-1)
        i = int(np.argmax(np.abs(p.grad)))
        keep = flat[i]
        flat[i] = keep + 1e-3
        up = float(run_loss().data)
        flat[i] = keep - 1e-3
        dn = float(run_loss().data)
        flat[i] = keep
        num = (up - dn) / 2e-3
        worst = max(worst, abs(float(p.grad.reshape(-1)[i]) - num) / max(abs(num), 1e-3))
    check(f"end-to-end loss gradient probes (rel err {worst:.1e})", worst < 1e-4)

    # forced-equal similarity terms give exactly ln 4
    same = Tensor(rng.standard_normal((2, 16)), dtype=np.float64)
    ln4 = losses.contrastive_from_pooled(same, same, same, same, 0.1)
    check("contrastive loss is ln 4 under equal terms",
          bool(np.all(np.abs(ln4.data - np.log(4.0)) < 1e-9)))

    # self-similarity: exp(1/temperature), exact in log space
    img = synthdata.scene_image(pair.scene_x, 16)
    logsim = losses.log_similarity(bundle, img, "object color", img, "object color", 0.1)
    sim = losses.similarity(bundle, img, "object color", img, "object color", 0.1)
    check("self-similarity log-space value 10", abs(logsim - 10.0) < 1e-9)
    check("self-similarity value exp(10)", abs(sim - float(np.exp(10.0))) < 1e-6)

    # zero contrastive weight reduces identically to the generative term
    total, parts = losses.total_loss(bundle, pair, LossConfig(con_weight=0.0),
                                     np.random.default_rng(1))
    check("zero contrastive weight reduces to generative loss",
          parts["total"] == parts["gen"] and parts["con"] is None)

    # guidance algebra on a random-init decoder
    from .compose import composed_velocity_arrays
    dec = bundle.decoder
    xs = rng.standard_normal((1, 16, 16, 3))
    ts = np.array([0.3])
    pid = [dec.caption_ids(PromptSpec(fg_color="red"))]
    v_text = composed_velocity_arrays(dec, xs, ts, [], pid, 1.0)
    with tc.no_grad():
        v_direct = dec.velocity_batch(xs, ts, None, pid).data.astype(np.float64)
    check("text-only composition equals direct conditional velocity",
          np.array_equal(v_text, v_direct))
    emb = rng.standard_normal((1, 2, 16)).astype(np.float32)
    v0 = composed_velocity_arrays(dec, xs, ts, [(emb, 0.0)], pid, 3.0)
    vb = composed_velocity_arrays(dec, xs, ts, [], pid, 3.0)
    check("zero-weight reference is a no-op", np.array_equal(v0, vb))
    v1 = composed_velocity_arrays(dec, xs, ts, [(emb, 1.0)], pid, 3.0)
    v2 = composed_velocity_arrays(dec, xs, ts, [(emb, 2.0)], pid, 3.0)
    check("doubling the weight doubles the conditional flow",
          bool(np.max(np.abs((v2 - vb) - 2.0 * (v1 - vb))) < 1e-12))

    return 2 if failures else 0


# -- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="attrikit", description=__doc__)
    p.add_argument("--version", action="store_true", help="print config-schema version")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate an annotated pair dataset")
    g.add_argument("--count", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-positives", type=int, default=1)
    g.add_argument("--side", type=int, default=32)
    g.add_argument("--out-dir", required=True)

    t = sub.add_parser("train", help="run the two-stage training schedule")
    t.add_argument("--config", default=None, help="RunConfig JSON path")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="emit the JSON evaluation report")
    e.add_argument("--config", default=None)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("compose", help="generate from weighted attribute references")
    c.add_argument("--config", default=None)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--ref", action="append", default=[],
                   help="<image.ppm>:<attribute>, repeatable")
    c.add_argument("--prompt", default=None)
    c.add_argument("--w", action="append", type=float, default=None,
                   help="per-reference weight, repeatable")
    c.add_argument("--text-cfg", type=float, default=3.0)
    c.add_argument("--steps", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    r = sub.add_parser("retrieve", help="attribute-conditioned nearest images")
    r.add_argument("--config", default=None)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--query", required=True, help="query image (PPM)")
    r.add_argument("--attr", required=True)
    r.add_argument("--k", type=int, default=5)
    r.add_argument("--gallery-size", type=int, default=500)
    r.add_argument("--gallery-seed", type=int, default=77)
    r.add_argument("--seed", type=int, default=0)

    j = sub.add_parser("project", help="2-D embedding projection to CSV")
    j.add_argument("--config", default=None)
    j.add_argument("--ckpt", required=True)
    j.add_argument("--attr", required=True)
    j.add_argument("--out", required=True)
    j.add_argument("--gallery-size", type=int, default=300)
    j.add_argument("--gallery-seed", type=int, default=77)
    j.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("selftest", help="fast numeric sanity suite")
    s.add_argument("--seed", type=int, default=0)
    return p


_DISPATCH = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compose": _cmd_compose,
    "retrieve": _cmd_retrieve,
    "project": _cmd_project,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(f"attrikit config schema version {SCHEMA_VERSION}")
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required")
        return _DISPATCH[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure contract: exit code 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
