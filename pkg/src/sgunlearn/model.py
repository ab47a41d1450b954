"""Scene-graph-to-image generator: visual encoder, embedders, GRL, layout, decoder.

Per object the fused embedding is ``z_s = [z_v | z_b | z_o]``.  The graph
representation learner (GRL) runs two rounds of triple message passing, the
layout step paints each refined embedding into its box on a coarse canvas,
and the decoder upsamples that canvas to the image.

Reconstruction feeds the true visual embedding ``z_v`` of every object.
Synthesis replaces it with a learned per-category "unknown" vector; training
drops ``z_v`` to that vector at random so both pathways are usable.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .errors import NonFiniteLoss
from .imageops import crop, resize_bilinear
from .scene_graph import ObjectNode, SceneGraph, Vocabulary, roi_of
from .synth import Dataset, RenderedSample

TASKS = ("reconstruction", "synthesis")


@dataclass(frozen=True)
class ModelConfig:
    n_categories: int
    n_attributes: int
    n_predicates: int
    image_size: int = 32
    pad_size: int = 10
    d_v: int = 32
    d_o: int = 16
    d_b: int = 8
    d_p: int = 8
    grl_hidden: int = 64
    grl_dim: int = 48
    grl_rounds: int = 2
    layout_channels: int = 32
    decoder_channels: tuple[int, int, int] = (24, 16, 8)
    patch_size: int = 8
    enc_channels: int = 8
    leak: float = 0.2

    @property
    def d_s(self) -> int:
        return self.d_v + self.d_b + self.d_o

    @property
    def feature_size(self) -> int:
        return self.image_size // 4

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, image_size: int = 32, pad_size: int = 10, **kw) -> "ModelConfig":
        return cls(len(vocab.categories), len(vocab.attributes), len(vocab.predicates), image_size, pad_size, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


# parameters ----------------------------------------------------------------


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    p = ParameterStore()
    ce, ps = cfg.enc_channels, cfg.patch_size
    # visual encoder and object/bbox embedders
    p.add("encoder", "enc.conv1.w", _he(rng, (3, 3, 3, ce), 27))
    p.add("encoder", "enc.conv1.b", np.zeros(ce))
    p.add("encoder", "enc.conv2.w", _he(rng, (3, 3, ce, ce), 9 * ce))
    p.add("encoder", "enc.conv2.b", np.zeros(ce))
    p.add("encoder", "enc.fc.w", _he(rng, (ps * ps * ce, cfg.d_v), ps * ps * ce, 1.0))
    p.add("encoder", "enc.fc.b", np.zeros(cfg.d_v))
    p.add("encoder", "emb.category", rng.normal(0.0, 0.5, size=(cfg.n_categories, cfg.d_o)))
    p.add("encoder", "emb.attribute", rng.normal(0.0, 0.2, size=(cfg.n_attributes, cfg.d_o)))
    p.add("encoder", "emb.bbox.w", _he(rng, (4, cfg.d_b), 4, 1.0))
    p.add("encoder", "emb.bbox.b", np.zeros(cfg.d_b))
    p.add("encoder", "emb.unknown", rng.normal(0.0, 0.1, size=(cfg.n_categories, cfg.d_v)))
    # graph representation learner
    p.add("grl", "grl.predicate", rng.normal(0.0, 0.5, size=(cfg.n_predicates, cfg.d_p)))
    d_in = cfg.d_s
    for r in range(cfg.grl_rounds):
        d_out = cfg.grl_dim
        e_in = 2 * d_in + cfg.d_p
        p.add("grl", f"grl.r{r}.edge1.w", _he(rng, (e_in, cfg.grl_hidden), e_in))
        p.add("grl", f"grl.r{r}.edge1.b", np.zeros(cfg.grl_hidden))
        p.add("grl", f"grl.r{r}.edge2.w", _he(rng, (cfg.grl_hidden, 2 * d_out), cfg.grl_hidden, 1.0))
        p.add("grl", f"grl.r{r}.edge2.b", np.zeros(2 * d_out))
        n_in = d_in + d_out
        p.add("grl", f"grl.r{r}.node1.w", _he(rng, (n_in, cfg.grl_hidden), n_in))
        p.add("grl", f"grl.r{r}.node1.b", np.zeros(cfg.grl_hidden))
        p.add("grl", f"grl.r{r}.node2.w", _he(rng, (cfg.grl_hidden, d_out), cfg.grl_hidden, 1.0))
        p.add("grl", f"grl.r{r}.node2.b", np.zeros(d_out))
        d_in = d_out
    # layout projection
    p.add("layout", "layout.proj.w", _he(rng, (cfg.grl_dim, cfg.layout_channels), cfg.grl_dim, 1.0))
    p.add("layout", "layout.proj.b", np.zeros(cfg.layout_channels))
    # decoder
    chans = [cfg.layout_channels + 1, *cfg.decoder_channels]
    for k in range(len(chans) - 1):
        p.add("decoder", f"dec.conv{k}.w", _he(rng, (3, 3, chans[k], chans[k + 1]), 9 * chans[k]))
        p.add("decoder", f"dec.conv{k}.b", np.zeros(chans[k + 1]))
    p.add("decoder", "dec.out.w", _he(rng, (3, 3, chans[-1], 3), 9 * chans[-1], 1.0))
    p.add("decoder", "dec.out.b", np.zeros(3))
    return p


class SG2IGenerator:
    def __init__(self, cfg: ModelConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "SG2IGenerator":
        return cls(cfg, init_params(cfg, seed))

    def copy(self) -> "SG2IGenerator":
        return SG2IGenerator(self.cfg, self.params.copy())

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        Path(str(path) + ".json").write_text(json.dumps(self.cfg.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SG2IGenerator":
        cfg = ModelConfig.from_dict(json.loads(Path(str(path) + ".json").read_text()))
        return cls(cfg, ParameterStore.load(path))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


# sample preparation ------------------------------------------------------------


@dataclass
class Prepared:
    """Model-ready constant arrays for one (image, graph) pair."""

    index: int
    graph: SceneGraph
    image: np.ndarray  # H,W,3 float in [0,1]
    patches: np.ndarray  # N,P,P,3
    node_mask: np.ndarray  # N
    cat: np.ndarray  # N,n_cat one-hot (zero rows for padding)
    attr: np.ndarray  # N,n_attr multi-hot
    bbox: np.ndarray  # N,4
    layout: np.ndarray  # N,h*w
    edges: np.ndarray  # E,3 (subject, predicate, object) local indices
    rois: tuple  # pixel ROI per node, None for padding


def as_unit_float(image) -> np.ndarray:
    """uint8 images are rescaled to [0, 1]; float images are taken as-is."""
    arr = np.asarray(image)
    return arr / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)


def object_patch(image01: np.ndarray, node: ObjectNode, patch: int = 8) -> np.ndarray:
    h, w = image01.shape[:2]
    return resize_bilinear(crop(image01, roi_of(node, w, h)), patch, patch)


def layout_masks(graph: SceneGraph, size: int) -> np.ndarray:
    m = np.zeros((len(graph.nodes), size * size))
    for j, n in enumerate(graph.nodes):
        if n.is_pad:
            continue
        x0, y0, x1, y1 = roi_of(n, size, size)
        cell = np.zeros((size, size))
        cell[y0:y1, x0:x1] = 1.0
        m[j] = cell.ravel()
    return m


def prepare(
    index: int,
    graph: SceneGraph,
    image,
    vocab: Vocabulary,
    cfg: ModelConfig,
) -> Prepared:
    n = len(graph.nodes)
    img = as_unit_float(image)
    ps = cfg.patch_size
    patches = np.zeros((n, ps, ps, 3))
    node_mask = np.zeros(n)
    cat = np.zeros((n, cfg.n_categories))
    attr = np.zeros((n, cfg.n_attributes))
    bbox = np.zeros((n, 4))
    rois = []
    pos = {}
    size = img.shape[0]
    for j, node in enumerate(graph.nodes):
        if node.is_pad:
            rois.append(None)
            continue
        pos[node.id] = j
        node_mask[j] = 1.0
        cat[j, vocab.category_index(node.category)] = 1.0
        for a in node.attributes:
            attr[j, vocab.attributes.index(a)] = 1.0
        bbox[j] = node.bbox
        rois.append(roi_of(node, size, size))
        patches[j] = object_patch(img, node, ps)
    edges = np.array(
        [(pos[e.subject_id], vocab.predicates.index(e.predicate), pos[e.object_id]) for e in graph.edges],
        dtype=np.intp,
    ).reshape(-1, 3)
    return Prepared(
        index, graph, img, patches, node_mask, cat, attr, bbox, layout_masks(graph, cfg.feature_size), edges, tuple(rois)
    )


def prepare_sample(s: RenderedSample, vocab: Vocabulary, cfg: ModelConfig, image=None) -> Prepared:
    return prepare(s.index, s.graph, s.image if image is None else image, vocab, cfg)


def prepare_dataset(ds: Dataset, cfg: ModelConfig) -> list[Prepared]:
    return [prepare_sample(s, ds.vocab, cfg) for s in ds.samples]


@dataclass
class Batch:
    items: list[Prepared]
    images: np.ndarray  # B,H,W,3
    patches: np.ndarray  # B*N,P,P,3
    node_mask: np.ndarray  # B*N
    cat: np.ndarray
    attr: np.ndarray
    bbox: np.ndarray
    layout: np.ndarray  # B,N,h*w
    edge_s: np.ndarray
    edge_o: np.ndarray
    edge_p: np.ndarray  # E,n_pred one-hot
    inv_deg: np.ndarray  # B*N
    n_nodes: int

    @property
    def size(self) -> int:
        return len(self.items)


def collate(items: Sequence[Prepared], n_predicates: int) -> Batch:
    n = len(items[0].node_mask)
    es, eo, ep = [], [], []
    for b, it in enumerate(items):
        es.append(it.edges[:, 0] + b * n)
        ep.append(it.edges[:, 1])
        eo.append(it.edges[:, 2] + b * n)
    edge_s = np.concatenate(es).astype(np.intp)
    edge_o = np.concatenate(eo).astype(np.intp)
    pidx = np.concatenate(ep).astype(np.intp)
    edge_p = np.zeros((len(pidx), n_predicates))
    edge_p[np.arange(len(pidx)), pidx] = 1.0
    total = n * len(items)
    deg = np.bincount(edge_s, minlength=total) + np.bincount(edge_o, minlength=total)
    inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
    return Batch(
        items=list(items),
        images=np.stack([it.image for it in items]),
        patches=np.concatenate([it.patches for it in items]),
        node_mask=np.concatenate([it.node_mask for it in items]),
        cat=np.concatenate([it.cat for it in items]),
        attr=np.concatenate([it.attr for it in items]),
        bbox=np.concatenate([it.bbox for it in items]),
        layout=np.stack([it.layout for it in items]),
        edge_s=edge_s,
        edge_o=edge_o,
        edge_p=edge_p,
        inv_deg=inv_deg,
        n_nodes=total,
    )


# forward pieces -------------------------------------------------------------


def _linear(p: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return ad.matmul(x, p[prefix + ".w"]) + p[prefix + ".b"]


def encode_visual(model: SG2IGenerator, patches: np.ndarray) -> Tensor:
    """Visual encoder over a stack of (P, P, 3) patches -> (n, d_v)."""
    p, c = model.params, model.cfg
    x = ad.leaky_relu(ad.conv2d(Tensor(patches), p["enc.conv1.w"], p["enc.conv1.b"]), c.leak)
    x = ad.leaky_relu(ad.conv2d(x, p["enc.conv2.w"], p["enc.conv2.b"]), c.leak)
    x = ad.reshape(x, (patches.shape[0], -1))
    return _linear(p, "enc.fc", x)


def encode_object_visual(model: SG2IGenerator, image, node: ObjectNode) -> np.ndarray:
    if node.is_pad:
        return np.zeros(model.cfg.d_v)
    img = as_unit_float(image)
    patch = object_patch(img, node, model.cfg.patch_size)
    with ad.no_trace():
        return encode_visual(model, patch[None]).data[0]


def object_embeddings(
    model: SG2IGenerator,
    batch: Batch,
    task: str = "reconstruction",
    drop: np.ndarray | None = None,
    zero_zv: np.ndarray | None = None,
) -> Tensor:
    """Fused per-node embeddings ``z_s = [z_v | z_b | z_o]``, zero for padding."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    p = model.params
    mask = batch.node_mask[:, None]
    unknown = ad.matmul(batch.cat, p["emb.unknown"])
    if task == "synthesis":
        z_v = unknown
    else:
        z_v = encode_visual(model, batch.patches)
        if drop is not None:
            d = np.asarray(drop, dtype=np.float64)[:, None]
            z_v = z_v * (1.0 - d) + unknown * d
    keep = mask if zero_zv is None else mask * (1.0 - np.asarray(zero_zv, dtype=np.float64)[:, None])
    z_v = z_v * keep
    z_o = ad.matmul(batch.cat, p["emb.category"]) + ad.matmul(batch.attr, p["emb.attribute"])
    z_b = ad.leaky_relu(_linear(p, "emb.bbox", Tensor(batch.bbox)), model.cfg.leak) * mask
    return ad.concat([z_v, z_b, z_o * mask], axis=1)


def grl_forward(model: SG2IGenerator, batch: Batch, z_s: Tensor) -> Tensor:
    """Two rounds of message passing over (subject, predicate, object) triples."""
    p, c = model.params, model.cfg
    pred = ad.matmul(batch.edge_p, p["grl.predicate"])
    h = z_s
    inv_deg = batch.inv_deg[:, None]
    mask = batch.node_mask[:, None]
    for r in range(c.grl_rounds):
        pre = f"grl.r{r}"
        e_in = ad.concat([ad.gather_rows(h, batch.edge_s), pred, ad.gather_rows(h, batch.edge_o)], axis=1)
        msg = _linear(p, pre + ".edge2", ad.leaky_relu(_linear(p, pre + ".edge1", e_in), c.leak))
        m_s = msg[:, : c.grl_dim]
        m_o = msg[:, c.grl_dim :]
        agg = ad.scatter_add_rows(m_s, batch.edge_s, batch.n_nodes) + ad.scatter_add_rows(m_o, batch.edge_o, batch.n_nodes)
        agg = agg * inv_deg
        upd = _linear(p, pre + ".node2", ad.leaky_relu(_linear(p, pre + ".node1", ad.concat([h, agg], axis=1)), c.leak))
        h = upd * mask
    return h


def layout_compose(vectors, layout: np.ndarray, size: int) -> Tensor:
    """Paint per-node vectors into their boxes; overlaps add.

    ``vectors``: (B, N, C); ``layout``: (B, N, size*size) 0/1 box masks.
    Returns (B, size, size, C+1), the last channel being 1 outside all boxes.
    """
    v = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
    bsz, _, ch = v.shape
    painted = ad.matmul(np.swapaxes(layout, 1, 2), v)
    painted = ad.reshape(painted, (bsz, size, size, ch))
    covered = layout.max(axis=1) > 0
    bg = (~covered).astype(np.float64).reshape(bsz, size, size, 1)
    return ad.concat([painted, Tensor(bg)], axis=3)


def layout_for_graph(vectors, graph: SceneGraph, size: int) -> np.ndarray:
    """Single-graph convenience wrapper around :func:`layout_compose`."""
    v = np.asarray(vectors.data if isinstance(vectors, Tensor) else vectors)
    with ad.no_trace():
        return layout_compose(v[None], layout_masks(graph, size)[None], size).data[0]


def decode_image(model: SG2IGenerator, fmap) -> Tensor:
    p, c = model.params, model.cfg
    x = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    n_conv = len(c.decoder_channels)
    for k in range(n_conv):
        x = ad.leaky_relu(ad.conv2d(x, p[f"dec.conv{k}.w"], p[f"dec.conv{k}.b"]), c.leak)
        if k < 2:
            x = ad.upsample2x(x)
    x = ad.conv2d(x, p["dec.out.w"], p["dec.out.b"])
    return ad.scale(ad.add(ad.tanh(x), 1.0), 0.5)


def forward(
    model: SG2IGenerator,
    batch: Batch,
    task: str = "reconstruction",
    drop: np.ndarray | None = None,
    zero_zv: np.ndarray | None = None,
    with_embeddings: bool = False,
):
    z_s = object_embeddings(model, batch, task, drop, zero_zv)
    h = grl_forward(model, batch, z_s)
    c = model.cfg
    proj = _linear(model.params, "layout.proj", h)
    proj = ad.reshape(proj, (batch.size, -1, c.layout_channels))
    fmap = layout_compose(proj, batch.layout, c.feature_size)
    out = decode_image(model, fmap)
    return (out, h) if with_embeddings else out


def recon_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None, weights=None) -> Tensor:
    """Sum over samples of w_b * mean_{masked elems}(d^2 + 0.1|d|), divided by B.

    With a full mask this is the per-sample MSE + 0.1*L1 averaged over the batch.
    """
    bsz = pred.shape[0]
    d = pred - target
    per_elem = ad.mul(d, d) + ad.scale(ad.abs_(d), 0.1)
    if mask is None:
        mask = np.ones(pred.shape[:3])
    m = mask[..., None]
    counts = 3.0 * np.maximum(mask.reshape(bsz, -1).sum(axis=1), 1.0)
    w = np.ones(bsz) if weights is None else np.asarray(weights, dtype=np.float64)
    coef = (w / counts / bsz).reshape(bsz, 1, 1, 1)
    return ad.sum_(per_elem * (m * coef))


# inference helpers ------------------------------------------------------------


def generate(model: SG2IGenerator, items: Sequence[Prepared], task: str = "reconstruction", batch_size: int = 64) -> np.ndarray:
    """Model output images (B,H,W,3) in [0,1], computed without tracing."""
    outs = []
    with ad.no_trace():
        for k in range(0, len(items), batch_size):
            b = collate(items[k : k + batch_size], model.cfg.n_predicates)
            outs.append(forward(model, b, task).data)
    return np.concatenate(outs) if outs else np.zeros((0,))


def reconstruct(model: SG2IGenerator, image, graph: SceneGraph, vocab: Vocabulary) -> np.ndarray:
    return generate(model, [prepare(0, graph, image, vocab, model.cfg)], "reconstruction")[0]


def synthesize(model: SG2IGenerator, graph: SceneGraph, vocab: Vocabulary) -> np.ndarray:
    size = model.cfg.image_size
    blank = np.zeros((size, size, 3))
    return generate(model, [prepare(0, graph, blank, vocab, model.cfg)], "synthesis")[0]


# training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-3
    seed: int = 7
    batch_size: int = 20
    zv_dropout: float = 0.3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, loss, wall_ms)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,loss,wall_ms\n")
        for e, loss, ms in self.rows:
            out.write(f"{e},{loss!r},{ms:.3f}\n")
        return out.getvalue()


def dropout_mask(rng: np.random.Generator, node_mask: np.ndarray, rate: float) -> np.ndarray:
    return (rng.uniform(size=node_mask.shape) < rate).astype(np.float64) * node_mask


def check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value} at {where}")


def train(
    items: Sequence[Prepared],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    model: SG2IGenerator | None = None,
) -> tuple[SG2IGenerator, TrainLog]:
    """Minimise the reconstruction loss (MSE + 0.1*L1) with Adam.

    Starts from a fresh seeded initialisation unless ``model`` is given.
    Bit-identical for identical (items, cfg, model_cfg).
    """
    if not items:
        raise ValueError("training set is empty")
    model = SG2IGenerator.initialize(model_cfg, cfg.seed) if model is None else model
    log = TrainLog()
    params = model.params
    names = params.names()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
        order = rng.permutation(len(items))
        total, seen = 0.0, 0
        for k in range(0, len(order), cfg.batch_size):
            chunk = [items[i] for i in order[k : k + cfg.batch_size]]
            batch = collate(chunk, model_cfg.n_predicates)
            drop = dropout_mask(rng, batch.node_mask, cfg.zv_dropout)
            loss = recon_loss(forward(model, batch, "reconstruction", drop=drop), batch.images)
            check_finite(loss.item(), f"epoch {epoch}")
            grads = ad.grad(loss, params.tensors())
            ad.adam_step(params, dict(zip(names, grads)), cfg.lr)
            total += loss.item() * len(chunk)
            seen += len(chunk)
        log.rows.append((epoch, total / seen, 1000.0 * (time.perf_counter() - t0)))
    return model, log


def dataset_loss(model: SG2IGenerator, items: Sequence[Prepared], task: str = "reconstruction") -> float:
    outs = generate(model, items, task)
    target = np.stack([it.image for it in items])
    d = outs - target
    return float(np.mean(np.mean(d * d, axis=(1, 2, 3)) + 0.1 * np.mean(np.abs(d), axis=(1, 2, 3))))


def refined_embeddings(model: SG2IGenerator, items: Sequence[Prepared], task: str = "reconstruction") -> np.ndarray:
    """GRL outputs, shape (len(items), N, grl_dim)."""
    outs = []
    with ad.no_trace():
        for k in range(0, len(items), 64):
            b = collate(items[k : k + 64], model.cfg.n_predicates)
            _, h = forward(model, b, task, with_embeddings=True)
            outs.append(h.data.reshape(b.size, -1, model.cfg.grl_dim))
    return np.concatenate(outs)


def export_latents(model: SG2IGenerator, items: Sequence[Prepared], task: str = "reconstruction") -> str:
    """CSV with one row per non-padding object: sample, object, category, embedding."""
    emb = refined_embeddings(model, items, task)
    out = io.StringIO()
    out.write("sample_id,object_id,category," + ",".join(f"e{k}" for k in range(model.cfg.grl_dim)) + "\n")
    for b, it in enumerate(items):
        for j, node in enumerate(it.graph.nodes):
            if node.is_pad:
                continue
            vals = ",".join(repr(float(v)) for v in emb[b, j])
            out.write(f"{it.index},{node.id},{node.category},{vals}\n")
    return out.getvalue()
