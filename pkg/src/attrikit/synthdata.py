"""Procedural shape-scene dataset: rendering, pair annotation, exact oracle.

Every image is a flat-shaded shape on a flat background, so a scene is
recoverable from pixels by nearest-template matching. Pairs of scenes are
annotated with the attributes they share (positives) and the attributes
they differ on (negatives), which is the supervision the encoder trains on.

Color palettes are chosen with two properties in mind:
  * every (color, brightness) combination is a distinct pixel class, and
    foreground/background classes never collide, so clean renders classify
    exactly;
  * within each palette the colors are channel permutations of one another,
    so a constant gray image ties several templates exactly and the oracle
    reports low confidence instead of guessing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AttrScene", "AttributeName", "PairRecord", "ClassifyResult",
    "UnknownAttribute",
    "SHAPES", "SIZES", "POSITIONS", "BRIGHTNESS", "FG_COLORS", "BG_COLORS",
    "ATTRIBUTE_IDS", "ATTR_FIELDS", "SYNONYMS", "VALUES_FOR",
    "resolve_attribute", "random_scene", "render", "sample_pair",
    "oracle_classify", "classify_scene", "generate_pairs",
    "write_ppm", "read_ppm", "quantize_roundtrip",
    "write_dataset", "load_dataset", "scene_image",
]


class UnknownAttribute(KeyError):
    """Surface form or attribute id not covered by the vocabulary."""


# -- enums and palettes -------------------------------------------------------

SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "medium", "large")
POSITIONS = ("center", "top-left", "top-right", "bottom-left", "bottom-right")
BRIGHTNESS = ("dim", "normal", "bright")

# base colors in [0, 1]; max component 0.7 so the 1.4x bright multiplier never clips
FG_COLORS = {
    "red": (0.7, 0.2, 0.2),
    "green": (0.2, 0.7, 0.2),
    "blue": (0.2, 0.2, 0.7),
    "yellow": (0.7, 0.7, 0.2),
    "magenta": (0.7, 0.2, 0.7),
    "cyan": (0.2, 0.7, 0.7),
}
BG_COLORS = {
    "orange": (0.7, 0.45, 0.15),
    "violet": (0.45, 0.15, 0.7),
    "spring": (0.15, 0.7, 0.45),
    "sky": (0.15, 0.45, 0.7),
    "rose": (0.7, 0.15, 0.45),
    "lime": (0.45, 0.7, 0.15),
}

BRIGHTNESS_FACTOR = {"dim": 0.6, "normal": 1.0, "bright": 1.4}
SIZE_RADIUS = {"small": 0.10, "medium": 0.17, "large": 0.26}
POSITION_CENTER = {
    "center": (0.5, 0.5),
    "top-left": (0.3, 0.3),
    "top-right": (0.7, 0.3),
    "bottom-left": (0.3, 0.7),
    "bottom-right": (0.7, 0.7),
}

ATTRIBUTE_IDS = (
    "object shape", "object color", "object size",
    "object position", "background color", "image brightness",
)
ATTR_FIELDS = {
    "object shape": "shape",
    "object color": "fg_color",
    "object size": "size",
    "object position": "position",
    "background color": "bg_color",
    "image brightness": "brightness",
}
VALUES_FOR = {
    "object shape": SHAPES,
    "object color": tuple(FG_COLORS),
    "object size": SIZES,
    "object position": POSITIONS,
    "background color": tuple(BG_COLORS),
    "image brightness": BRIGHTNESS,
}

SYNONYMS = {
    "object shape": ("object shape", "shape of the object", "foreground shape"),
    "object color": ("object color", "color of the object", "foreground hue"),
    "object size": ("object size", "size of the object", "foreground scale"),
    "object position": ("object position", "position of the object", "object placement"),
    "background color": ("background color", "color of the background", "backdrop hue"),
    "image brightness": ("image brightness", "overall brightness", "lighting level"),
}
_SURFACE_TO_ID = {s: cid for cid, forms in SYNONYMS.items() for s in forms}


@dataclass(frozen=True)
class AttributeName:
    """One attribute family plus the surface form it was referred to by."""

    canonical_id: str
    surface_form: str

    def __post_init__(self):
        if self.canonical_id not in ATTRIBUTE_IDS:
            raise UnknownAttribute(self.canonical_id)
        if _SURFACE_TO_ID.get(self.surface_form) != self.canonical_id:
            raise UnknownAttribute(self.surface_form)


def resolve_attribute(surface_form):
    """Map any known surface form (or canonical id) to an AttributeName."""
    cid = _SURFACE_TO_ID.get(surface_form)
    if cid is None:
        raise UnknownAttribute(surface_form)
    return AttributeName(cid, surface_form)


@dataclass(frozen=True)
class AttrScene:
    """Symbolic ground truth for one image."""

    shape: str
    fg_color: str
    size: str
    position: str
    bg_color: str
    brightness: str

    def __post_init__(self):
        for attr_id, fld in ATTR_FIELDS.items():
            if getattr(self, fld) not in VALUES_FOR[attr_id]:
                raise ValueError(f"invalid {fld}: {getattr(self, fld)!r}")

    def value(self, attr_id):
        return getattr(self, ATTR_FIELDS[attr_id])

    def to_dict(self):
        return {f: getattr(self, f) for f in ATTR_FIELDS.values()}


def random_scene(rng):
    return AttrScene(
        shape=SHAPES[rng.integers(len(SHAPES))],
        fg_color=tuple(FG_COLORS)[rng.integers(len(FG_COLORS))],
        size=SIZES[rng.integers(len(SIZES))],
        position=POSITIONS[rng.integers(len(POSITIONS))],
        bg_color=tuple(BG_COLORS)[rng.integers(len(BG_COLORS))],
        brightness=BRIGHTNESS[rng.integers(len(BRIGHTNESS))],
    )


def _all_scenes():
    for sh in SHAPES:
        for fc in FG_COLORS:
            for sz in SIZES:
                for pos in POSITIONS:
                    for bc in BG_COLORS:
                        for br in BRIGHTNESS:
                            yield AttrScene(sh, fc, sz, pos, bc, br)


# -- rendering ----------------------------------------------------------------


def _shape_mask(shape, size, position, side):
    """Boolean foreground mask; pixel centers tested exactly, no anti-aliasing."""
    r = SIZE_RADIUS[size]
    cx, cy = POSITION_CENTER[position]
    coords = (np.arange(side, dtype=np.float64) + 0.5) / side
    x = coords[None, :] - cx
    y = coords[:, None] - cy
    if shape == "circle":
        return x * x + y * y <= r * r
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= r
    # equilateral triangle pointing up, vertices on the radius-r circle
    v = np.array([(0.0, -r), (-r * np.sqrt(3) / 2, r / 2), (r * np.sqrt(3) / 2, r / 2)])
    inside = np.ones((side, side), dtype=bool)
    for i in range(3):
        ax, ay = v[i]
        bx, by = v[(i + 1) % 3]
        cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        inside &= cross <= 0  # y grows downward, so this winding is clockwise
    return inside


def render(scene, side=32):
    """Rasterize a scene to float32 pixels in [-1, 1], deterministically.

    Brightness multiplies the base colors in [0, 1] space before the final
    remap, so a dim render is exactly 0.6x its normal-brightness sibling.
    """
    if side < 16:
        raise ValueError("side must be >= 16")
    mask = _shape_mask(scene.shape, scene.size, scene.position, side)
    kappa = BRIGHTNESS_FACTOR[scene.brightness]
    fg = np.asarray(FG_COLORS[scene.fg_color], dtype=np.float32) * np.float32(kappa)
    bg = np.asarray(BG_COLORS[scene.bg_color], dtype=np.float32) * np.float32(kappa)
    img01 = np.where(mask[:, :, None], fg, bg)
    return (img01 * np.float32(2.0) - np.float32(1.0)).astype(np.float32)


# -- pair sampling --------------------------------------------------------------


@dataclass
class PairRecord:
    """Two linked scenes plus their positive/negative attribute annotations.

    `positives` lists (attribute, rationale) for every field the scenes agree
    on, `negatives` for every field they differ on; together they always cover
    all six attribute families.
    """

    scene_x: AttrScene
    scene_y: AttrScene
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    image_x_path: str | None = None
    image_y_path: str | None = None

    def image_x(self, side=32):
        return render(self.scene_x, side)

    def image_y(self, side=32):
        return render(self.scene_y, side)

    def positive_ids(self):
        return [a.canonical_id for a, _ in self.positives]

    def negative_ids(self):
        return [a.canonical_id for a, _ in self.negatives]


def _annotate(scene_x, scene_y, rng):
    positives, negatives = [], []
    for attr_id in ATTRIBUTE_IDS:
        forms = SYNONYMS[attr_id]
        attr = AttributeName(attr_id, forms[rng.integers(len(forms))])
        vx, vy = scene_x.value(attr_id), scene_y.value(attr_id)
        if vx == vy:
            positives.append((attr, f"both have {vx}"))
        else:
            negatives.append((attr, f"{vx} vs {vy}"))
    return positives, negatives


def sample_pair(rng_seed, min_positives=1):
    """Draw one annotated pair whose scenes share at least `min_positives` fields.

    Always leaves at least one differing field, so both annotation lists are
    nonempty. Deterministic in (rng_seed, min_positives).
    """
    if not 1 <= min_positives <= 5:
        raise ValueError("min_positives must be in 1..5")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), 0x9A1]))
    return _sample_pair_rng(rng, min_positives)


def _sample_pair_rng(rng, min_positives):
    scene_x = random_scene(rng)
    n_shared = int(rng.integers(min_positives, 6))  # 6 exclusive: keep >= 1 negative
    shared = list(rng.choice(len(ATTRIBUTE_IDS), size=n_shared, replace=False))
    fields = {}
    for idx, attr_id in enumerate(ATTRIBUTE_IDS):
        fld = ATTR_FIELDS[attr_id]
        vx = scene_x.value(attr_id)
        if idx in shared:
            fields[fld] = vx
        else:
            values = VALUES_FOR[attr_id]
            v = values[rng.integers(len(values))]
            while v == vx:  # resample until the field actually differs
                v = values[rng.integers(len(values))]
            fields[fld] = v
    scene_y = AttrScene(**fields)
    positives, negatives = _annotate(scene_x, scene_y, rng)
    return PairRecord(scene_x, scene_y, positives, negatives)


def generate_pairs(count, seed, min_positives=1):
    """Deterministic list of pairs; record i depends only on (seed, i)."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A1, i]))
        out.append(_sample_pair_rng(rng, min_positives))
    return out


# -- oracle classifier -----------------------------------------------------------


@dataclass
class ClassifyResult:
    value: str
    low_confidence: bool
    best_distance: float
    runner_up_distance: float


class _OracleCache:
    """Per-side precomputation for closed-form nearest-template matching."""

    def __init__(self, side):
        self.side = side
        geoms = [(sh, sz, pos) for sh in SHAPES for sz in SIZES for pos in POSITIONS]
        self.geoms = geoms
        masks = np.stack([
            _shape_mask(sh, sz, pos, side).reshape(-1) for sh, sz, pos in geoms
        ]).astype(np.float64)                     # (G, P)
        self.mask_matrix = masks
        self.fg_count = masks.sum(axis=1)         # (G,)
        self.total = float(side * side)
        # template pixel classes in [-1, 1]: value = 2 * kappa * base - 1
        kappas = np.array([BRIGHTNESS_FACTOR[b] for b in BRIGHTNESS])
        fg = np.array([FG_COLORS[c] for c in FG_COLORS])  # (6, 3)
        bg = np.array([BG_COLORS[c] for c in BG_COLORS])
        self.fg_class = 2.0 * kappas[None, :, None] * fg[:, None, :] - 1.0  # (6, 3k, 3ch)
        self.bg_class = 2.0 * kappas[None, :, None] * bg[:, None, :] - 1.0

    def region_sums(self, image):
        """Per-geometry channel sums of the image and its square over fg/bg."""
        flat = image.reshape(-1, 3).astype(np.float64)
        s_fg = self.mask_matrix @ flat                    # (G, 3)
        q_fg = self.mask_matrix @ (flat * flat)
        s_all = flat.sum(axis=0)
        q_all = (flat * flat).sum(axis=0)
        return s_fg, q_fg, s_all - s_fg, q_all - q_fg

    def distances(self, image):
        """Sum of squared errors against every template, split by region.

        Returns (fg_sse[G, 6, 3], bg_sse[G, 6, 3]) over geometry x color x
        brightness; full-image SSE is fg_sse[g, cf, k] + bg_sse[g, cb, k].
        """
        s_fg, q_fg, s_bg, q_bg = self.region_sums(image)
        n_fg = self.fg_count
        n_bg = self.total - n_fg
        tf = self.fg_class                                # (6, 3, 3)
        tb = self.bg_class
        fg_sse = (
            q_fg.sum(axis=1)[:, None, None]
            - 2.0 * np.einsum("gc,vkc->gvk", s_fg, tf)
            + n_fg[:, None, None] * (tf * tf).sum(axis=2)[None, :, :]
        )
        bg_sse = (
            q_bg.sum(axis=1)[:, None, None]
            - 2.0 * np.einsum("gc,vkc->gvk", s_bg, tb)
            + n_bg[:, None, None] * (tb * tb).sum(axis=2)[None, :, :]
        )
        return fg_sse, bg_sse


_ORACLE_CACHES = {}


def _oracle(side):
    if side not in _ORACLE_CACHES:
        _ORACLE_CACHES[side] = _OracleCache(side)
    return _ORACLE_CACHES[side]


def _candidate_distances(image, attr_id):
    """Best normalized distance per candidate value of one attribute.

    Geometry and brightness attributes compare whole images; color attributes
    compare only the region where the color lives, each time minimizing over
    every other field.
    """
    side = image.shape[0]
    cache = _oracle(side)
    fg_sse, bg_sse = cache.distances(image)
    geoms = cache.geoms
    n_fg = cache.fg_count

    values = VALUES_FOR[attr_id]
    if attr_id == "object color":
        per_pix = fg_sse / (3.0 * n_fg[:, None, None])       # (G, 6, 3)
        return values, per_pix.min(axis=(0, 2))
    if attr_id == "background color":
        per_pix = bg_sse / (3.0 * (cache.total - n_fg)[:, None, None])
        return values, per_pix.min(axis=(0, 2))
    full = fg_sse[:, :, None, :] + bg_sse[:, None, :, :]     # (G, 6, 6, 3)
    per_pix = full / (3.0 * cache.total)
    if attr_id == "image brightness":
        return values, per_pix.min(axis=(0, 1, 2))
    geom_field = {"object shape": 0, "object size": 1, "object position": 2}[attr_id]
    best = per_pix.min(axis=(1, 2, 3))                       # (G,)
    dists = np.array([
        min(b for g, b in zip(geoms, best) if g[geom_field] == v) for v in values
    ])
    return values, dists


def oracle_classify(image, attr):
    """Classify one attribute of an image by nearest-template distance.

    Exact on clean renders (the true value sits at distance zero). The
    low_confidence flag trips when the runner-up value's best template is
    within 5% of the winner's.
    """
    if isinstance(attr, AttributeName):
        attr_id = attr.canonical_id
    else:
        attr_id = _SURFACE_TO_ID.get(attr)
        if attr_id is None:
            raise UnknownAttribute(attr)
    values, dists = _candidate_distances(np.asarray(image), attr_id)
    order = np.argsort(dists, kind="stable")
    best, second = float(dists[order[0]]), float(dists[order[1]])
    low = second <= best * 1.05 + 1e-12
    return ClassifyResult(values[order[0]], low, best, second)


def classify_scene(image):
    """Recover the full scene of an image; returns (scene, per-pixel residual)."""
    image = np.asarray(image)
    cache = _oracle(image.shape[0])
    fg_sse, bg_sse = cache.distances(image)
    full = fg_sse[:, :, None, :] + bg_sse[:, None, :, :]
    g, cf, cb, k = np.unravel_index(np.argmin(full), full.shape)
    sh, sz, pos = cache.geoms[g]
    scene = AttrScene(sh, tuple(FG_COLORS)[cf], sz, pos, tuple(BG_COLORS)[cb], BRIGHTNESS[k])
    return scene, float(full[g, cf, cb, k] / (3.0 * cache.total))


# -- ppm / jsonl interchange ------------------------------------------------------


def write_ppm(path, image):
    """Binary P6, [-1, 1] mapped linearly onto [0, 255]."""
    image = np.asarray(image)
    u8 = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(tok) for tok in parts[1].split())
    u8 = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return (u8.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def quantize_roundtrip(image):
    """The exact value transform a PPM write/read applies."""
    u8 = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return (u8.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def scene_image(scene, side=32):
    """Render quantized to 8-bit levels, i.e. what a PPM consumer sees."""
    return quantize_roundtrip(render(scene, side))


def write_dataset(records, out_dir, side=32):
    """Write PPM pairs plus an annotations JSONL mirroring the pair schema."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    lines = []
    for i, rec in enumerate(records):
        px = f"images/pair{i:06d}_x.ppm"
        py = f"images/pair{i:06d}_y.ppm"
        write_ppm(out_dir / px, rec.image_x(side))
        write_ppm(out_dir / py, rec.image_y(side))
        row = {
            "image_x": px,
            "image_y": py,
            "positive": [{"name": a.surface_form, "desc": d} for a, d in rec.positives],
            "negative": [{"name": a.surface_form, "desc": d} for a, d in rec.negatives],
        }
        lines.append(json.dumps(row))
    (out_dir / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    return out_dir / "annotations.jsonl"


def load_dataset(data_dir):
    """Load a written dataset; scenes are recovered through the oracle."""
    data_dir = Path(data_dir)
    records = []
    with open(data_dir / "annotations.jsonl") as f:
        for line in f:
            row = json.loads(line)
            img_x = read_ppm(data_dir / row["image_x"])
            img_y = read_ppm(data_dir / row["image_y"])
            scene_x, _ = classify_scene(img_x)
            scene_y, _ = classify_scene(img_y)
            rec = PairRecord(
                scene_x, scene_y,
                positives=[(resolve_attribute(p["name"]), p["desc"]) for p in row["positive"]],
                negatives=[(resolve_attribute(p["name"]), p["desc"]) for p in row["negative"]],
                image_x_path=row["image_x"], image_y_path=row["image_y"],
            )
            records.append(rec)
    return records
