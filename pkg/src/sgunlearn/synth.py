"""Procedural (image, scene graph) pairs standing in for identity-bearing photos.

Every scene holds at least one person-like object.  Person-like objects draw
their ``identity_key`` from a small per-category pool, so the same "person"
recurs across images while two same-category objects can still look
different.  Identity is carried by a smooth two-colour stripe texture.

Generation of sample ``i`` depends only on ``(seed, i)``.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .imageops import read_ppm, write_ppm
from .scene_graph import (
    DEFAULT_PAD_SIZE,
    ObjectNode,
    RelationshipTriple,
    SceneGraph,
    Vocabulary,
    deserialize,
    pad_graph,
    roi_of,
    serialize,
    validate_graph,
)

PERSON_LIKE = ("man", "woman", "boy", "girl", "child", "person", "kid", "people", "face")
OTHER_CATEGORIES = ("tree", "car", "dog", "ball")
SHAPES = ("circle", "square", "triangle", "ring", "cross")  # non-person categories; people use "figure"

DEFAULT_VOCAB = Vocabulary(
    categories=PERSON_LIKE + OTHER_CATEGORIES,
    attributes=("small", "large", "bright", "dark"),
    predicates=("left-of", "above", "inside", "overlaps"),
    generalization_map={
        "man": "person",
        "woman": "person",
        "people": "person",
        "face": "person",
        "child": "person",
        "boy": "child",
        "girl": "child",
        "kid": "child",
    },
)


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 200
    image_size: int = 32
    objects_per_scene: tuple[int, int] = (3, 6)
    category_weights: Mapping[str, float] | None = None
    identity_pool: int = 4
    seed: int = 7
    pad_target: int = DEFAULT_PAD_SIZE
    edge_prob: float = 0.6
    bbox_extent: tuple[float, float] = (0.22, 0.42)
    max_overlap: float = 0.05  # intersection / smaller box area, per pair

    def validate(self, vocab: Vocabulary = DEFAULT_VOCAB) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.image_size not in (16, 32, 64):
            raise ConfigError(f"image_size must be 16, 32 or 64, got {self.image_size}")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad objects_per_scene range {self.objects_per_scene}")
        if hi > self.pad_target:
            raise ConfigError(f"objects_per_scene max {hi} exceeds pad target {self.pad_target}")
        if self.identity_pool < 1:
            raise ConfigError("identity_pool must be >= 1")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ConfigError("edge_prob must lie in [0, 1]")
        a, b = self.bbox_extent
        if not 0.0 < a <= b <= 1.0:
            raise ConfigError(f"bad bbox_extent {self.bbox_extent}")
        if not 0.0 <= self.max_overlap <= 1.0:
            raise ConfigError("max_overlap must lie in [0, 1]")
        w = self.weights(vocab)
        if any(v < 0 for v in w.values()):
            raise ConfigError("category weights must be non-negative")
        if sum(w[c] for c in PERSON_LIKE if c in w) <= 0:
            raise ConfigError("at least one person-like category needs positive weight")

    def weights(self, vocab: Vocabulary = DEFAULT_VOCAB) -> dict[str, float]:
        if self.category_weights is None:
            return {c: 1.0 for c in vocab.categories}
        unknown = set(self.category_weights) - set(vocab.categories)
        if unknown:
            raise ConfigError(f"weights for unknown categories {sorted(unknown)}")
        return {c: float(self.category_weights.get(c, 0.0)) for c in vocab.categories}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_scene"] = list(self.objects_per_scene)
        d["bbox_extent"] = list(self.bbox_extent)
        d["category_weights"] = None if self.category_weights is None else dict(sorted(self.category_weights.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetConfig":
        d = dict(d)
        d["objects_per_scene"] = tuple(d["objects_per_scene"])
        if "bbox_extent" in d:
            d["bbox_extent"] = tuple(d["bbox_extent"])
        return cls(**d)


@dataclass(frozen=True)
class RenderedSample:
    index: int
    image: np.ndarray  # HxWx3 uint8
    graph: SceneGraph
    seed: int
    split: str = "train"


@dataclass
class Dataset:
    samples: list[RenderedSample]
    vocab: Vocabulary = DEFAULT_VOCAB
    config: DatasetConfig | None = None
    _objects: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._objects = {}
        for s in self.samples:
            for j, n in enumerate(s.graph.nodes):
                if not n.is_pad:
                    self._objects[n.id] = (s.index, j)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_size(self) -> int:
        return self.samples[0].image.shape[0]

    @property
    def train_indices(self) -> list[int]:
        return [s.index for s in self.samples if s.split == "train"]

    @property
    def eval_indices(self) -> list[int]:
        return [s.index for s in self.samples if s.split == "eval"]

    def locate(self, object_id: str) -> tuple[int, int]:
        """(sample index, node position) of an object id; KeyError if absent."""
        return self._objects[object_id]

    def has_object(self, object_id: str) -> bool:
        return object_id in self._objects

    def node(self, object_id: str) -> ObjectNode:
        i, j = self._objects[object_id]
        return self.samples[i].graph.nodes[j]


# rendering ---------------------------------------------------------------


def category_style(category: str, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[str, tuple[float, float, float]]:
    """Shape and base colour.  Person-like categories share one silhouette and
    a narrow warm hue band; other categories are spread round the hue circle."""
    i = vocab.category_index(category)
    if person_like(category):
        return "figure", colorsys.hsv_to_rgb(0.02 + 0.015 * PERSON_LIKE.index(category), 0.7, 0.95)
    hue = (i * 0.381966) % 1.0
    return SHAPES[i % len(SHAPES)], colorsys.hsv_to_rgb(hue, 0.8, 0.95)


def rendered_category(category: str, identity_key: int, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Category whose look an object takes on.

    A general label ("person") covers instances of its specific labels, so a
    "person" object is drawn as one of man/woman/people/face/child, picked by
    its identity key, recursively.
    """
    gmap = vocab.generalization_map
    seen = set()
    while category not in seen:
        seen.add(category)
        specific = sorted(k for k, v in gmap.items() if v == category)
        if not specific:
            break
        category = specific[identity_key % len(specific)]
        identity_key //= len(specific)
    return category


def object_style(node: ObjectNode, vocab: Vocabulary = DEFAULT_VOCAB) -> tuple[str, tuple[float, float, float]]:
    return category_style(rendered_category(node.category, node.identity_key, vocab), vocab)


def _identity_palette(identity_key: int, base_rgb) -> tuple[np.ndarray, np.ndarray, float, float, float]:
    rng = np.random.default_rng(identity_key)
    h, s, v = colorsys.rgb_to_hsv(*base_rgb)
    col_a = np.array(colorsys.hsv_to_rgb((h + rng.uniform(-0.06, 0.06)) % 1.0, s, rng.uniform(0.65, 1.0)))
    col_b = np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.4, 0.9), rng.uniform(0.55, 1.0)))
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(1.2, 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    return col_a, col_b, angle, period, phase


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    r2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
    if shape == "circle":
        m = r2 <= 0.25
    elif shape == "ring":
        m = (r2 <= 0.25) & (r2 >= 0.09)
    elif shape == "square":
        m = (u >= 0.1) & (u <= 0.9) & (v >= 0.1) & (v <= 0.9)
    elif shape == "triangle":
        m = (v >= 0.1) & (v <= 0.95) & (np.abs(u - 0.5) <= 0.5 * (v - 0.1) / 0.85)
    elif shape == "cross":
        m = (np.abs(u - 0.5) <= 0.17) | (np.abs(v - 0.5) <= 0.17)
    elif shape == "figure":  # head over a widening body
        head = (u - 0.5) ** 2 + (v - 0.2) ** 2 <= 0.02
        m = head | ((v >= 0.36) & (v <= 0.98) & (np.abs(u - 0.5) <= 0.18 + 0.25 * (v - 0.36)))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside & m


BG_TOP = np.array([0.20, 0.24, 0.32])
BG_BOTTOM = np.array([0.34, 0.31, 0.24])


def background(size: int, palette_seed: int) -> np.ndarray:
    """Shared vertical gradient with a small per-image tint (+-0.02)."""
    rng = np.random.default_rng(palette_seed)
    tint = rng.uniform(-0.02, 0.02, size=3)
    t = (np.arange(size) + 0.5) / size
    col = BG_TOP + (BG_BOTTOM - BG_TOP) * t[:, None] + tint
    return np.broadcast_to(col[:, None, :], (size, size, 3)).copy()


def render_scene(g: SceneGraph, size: int, palette_seed: int, vocab: Vocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """Painter's-algorithm rendering in node order; returns uint8 HxWx3."""
    img = background(size, palette_seed)
    for node in g.objects:
        x0, y0, x1, y1 = roi_of(node, size, size)
        shape, base = object_style(node, vocab)
        col_a, col_b, angle, period, phase = _identity_palette(node.identity_key, base)
        bx0, by0, bx1, by1 = (c * size for c in node.bbox)
        ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
        u = (xs - bx0) / (bx1 - bx0)
        v = (ys - by0) / (by1 - by0)
        mask = _shape_mask(shape, u, v)
        s = 0.5 + 0.5 * np.sin(2 * np.pi * (u * np.cos(angle) + v * np.sin(angle)) / period + phase)
        tex = col_a * s[..., None] + col_b * (1 - s[..., None])
        region = img[y0:y1, x0:x1]
        region[mask] = tex[mask]
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


# generation --------------------------------------------------------------


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def identity_key_for(category: str, slot: int) -> int:
    digest = hashlib.sha256(f"{category}/{slot}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def relation(a: ObjectNode, b: ObjectNode) -> tuple[ObjectNode, str, ObjectNode]:
    """Geometrically true (subject, predicate, object) for an unordered pair."""
    ax0, ay0, ax1, ay1 = a.bbox
    bx0, by0, bx1, by1 = b.bbox
    if ax0 >= bx0 and ay0 >= by0 and ax1 <= bx1 and ay1 <= by1:
        return a, "inside", b
    if bx0 >= ax0 and by0 >= ay0 and bx1 <= ax1 and by1 <= ay1:
        return b, "inside", a
    if min(ax1, bx1) > max(ax0, bx0) and min(ay1, by1) > max(ay0, by0):
        return a, "overlaps", b
    (acx, acy), (bcx, bcy) = a.center, b.center
    if abs(acx - bcx) >= abs(acy - bcy):
        return (a, "left-of", b) if acx < bcx else (b, "left-of", a)
    return (a, "above", b) if acy < bcy else (b, "above", a)


def predicate_holds(subj: ObjectNode, pred: str, obj: ObjectNode) -> bool:
    sx0, sy0, sx1, sy1 = subj.bbox
    ox0, oy0, ox1, oy1 = obj.bbox
    if pred == "inside":
        return sx0 >= ox0 and sy0 >= oy0 and sx1 <= ox1 and sy1 <= oy1
    if pred == "overlaps":
        return min(sx1, ox1) > max(sx0, ox0) and min(sy1, oy1) > max(sy0, oy0)
    if pred == "left-of":
        return subj.center[0] < obj.center[0]
    if pred == "above":
        return subj.center[1] < obj.center[1]
    raise ValueError(f"unknown predicate {pred!r}")


PLACEMENT_TRIES = 50


def overlap_fraction(a, b) -> float:
    """Intersection area over the smaller box's area."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    return ix * iy / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def _place(rng: np.random.Generator, emin: float, emax: float, placed: list, cap: float):
    """Rejection-sample a box whose overlap with every placed box is at most ``cap``;
    after PLACEMENT_TRIES draws the least-overlapping candidate wins."""
    best, best_ov = None, np.inf
    for _ in range(PLACEMENT_TRIES):
        w, h = rng.uniform(emin, emax, size=2)
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        ov = max((overlap_fraction((x0, y0, x0 + w, y0 + h), b) for b in placed), default=0.0)
        if ov < best_ov:
            best, best_ov = (x0, y0, w, h), ov
        if ov <= cap:
            break
    return best


def _make_graph(cfg: DatasetConfig, vocab: Vocabulary, index: int, rng: np.random.Generator) -> SceneGraph:
    weights = cfg.weights(vocab)
    cats = list(vocab.categories)
    p_all = np.array([weights[c] for c in cats])
    person = [c for c in cats if c in PERSON_LIKE]
    p_person = np.array([weights[c] for c in person])

    lo, hi = cfg.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    emin, emax = cfg.bbox_extent
    nodes = []
    for k in range(n_obj):
        if k == 0:
            cat = person[int(rng.choice(len(person), p=p_person / p_person.sum()))]
        else:
            cat = cats[int(rng.choice(len(cats), p=p_all / p_all.sum()))]
        x0, y0, w, h = _place(rng, emin, emax, [n.bbox for n in nodes], cfg.max_overlap)
        if cat in PERSON_LIKE:
            ident = identity_key_for(cat, int(rng.integers(cfg.identity_pool)))
        else:
            ident = identity_key_for(cat, 0)
        _, base = category_style(rendered_category(cat, ident, vocab), vocab)
        bright = _identity_palette(ident, base)[0].max() >= 0.82
        attrs = ("small" if w * h < 0.09 else "large", "bright" if bright else "dark")
        nodes.append(
            ObjectNode(
                id=f"s{index:04d}o{k}",
                category=cat,
                attributes=attrs,
                identity_key=ident,
                bbox=(float(x0), float(y0), float(x0 + w), float(y0 + h)),
            )
        )
    edges = []
    for k in range(1, n_obj):
        if rng.uniform() < cfg.edge_prob:
            j = int(rng.integers(k))
            s, p, o = relation(nodes[j], nodes[k])
            edges.append(RelationshipTriple(s.id, p, o.id))
    return pad_graph(SceneGraph(tuple(nodes), tuple(edges), 0), cfg.pad_target)


def generate_sample(cfg: DatasetConfig, index: int, vocab: Vocabulary = DEFAULT_VOCAB) -> RenderedSample:
    seed = sample_seed(cfg.seed, index)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    g = _make_graph(cfg, vocab, index, rng)
    validate_graph(g, vocab)
    img = render_scene(g, cfg.image_size, seed, vocab)
    split = "train" if index < n_train(cfg.n_samples) else "eval"
    return RenderedSample(index=index, image=img, graph=g, seed=seed, split=split)


def n_train(n_samples: int) -> int:
    return max(1, (9 * n_samples) // 10)


def generate_dataset(cfg: DatasetConfig, vocab: Vocabulary = DEFAULT_VOCAB) -> Dataset:
    cfg.validate(vocab)
    return Dataset([generate_sample(cfg, i, vocab) for i in range(cfg.n_samples)], vocab, cfg)


# on-disk layout ---------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(ds: Dataset, out_dir) -> tuple[dict, str]:
    """Write PPM images, graph JSON and the manifest; returns (manifest, sha256)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        img_rel = f"images/s{s.index:04d}.ppm"
        g_rel = f"graphs/s{s.index:04d}.json"
        write_ppm(out / img_rel, s.image)
        g_bytes = serialize(s.graph).encode("utf-8")
        (out / g_rel).write_bytes(g_bytes)
        entries.append(
            {
                "index": s.index,
                "image": img_rel,
                "graph": g_rel,
                "seed": s.seed,
                "split": s.split,
                "image_sha256": _sha256((out / img_rel).read_bytes()),
                "graph_sha256": _sha256(g_bytes),
            }
        )
    manifest = {
        "config": ds.config.to_dict() if ds.config else None,
        "vocabulary": ds.vocab.to_dict(),
        "samples": entries,
    }
    blob = manifest_bytes(manifest)
    (out / "manifest.json").write_bytes(blob)
    return manifest, _sha256(blob)


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    vocab = Vocabulary.from_dict(manifest["vocabulary"])
    cfg = DatasetConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    samples = []
    for e in manifest["samples"]:
        g = deserialize((root / e["graph"]).read_text(encoding="utf-8"))
        samples.append(RenderedSample(e["index"], read_ppm(root / e["image"]), g, int(e["seed"]), e["split"]))
    return Dataset(samples, vocab, cfg)


def person_like(category: str) -> bool:
    return category in PERSON_LIKE


def subset(ds: Dataset, indices: Sequence[int]) -> list[RenderedSample]:
    return [ds.samples[i] for i in indices]
