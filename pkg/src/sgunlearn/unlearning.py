"""Removal requests and the nine unlearning methods.

Method ids and their dispatch::

    Sample-FT   fine-tune on the training set minus every image holding a target
    Sample-NG   negative guidance, whole images of the removed samples
    Feat-IF     influence redaction, z_v zeroed for every object of the category
    Feat-NG     negative guidance on every same-category ROI
    Feat-MK     patch-masked fine-tune of every same-category ROI
    Obj-IF      influence redaction, z_v zeroed for the requested objects only
    Obj-NG      negative guidance on the requested objects' ROIs
    Obj-MK-PA   patch-masked fine-tune of the requested objects
    Obj-MK-NS   noise-masked fine-tune of the requested objects

All fine-tuning variants share one loop (:func:`finetune`).  An epoch is a
shuffled pass over the training pool, or ``samples_per_epoch`` items drawn
uniformly afresh when that is set to cap the cost.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import CGResult, conjugate_gradient_solve, hessian_vector_product
from .errors import IncompatibleScope, RoiOutOfBounds, UnknownObjectId
from .model import (
    Prepared,
    SG2IGenerator,
    TrainConfig,
    TrainLog,
    check_finite,
    collate,
    dropout_mask,
    forward,
    prepare,
    prepare_dataset,
    recon_loss,
    train,
)
from .scene_graph import roi_of
from .synth import Dataset

SCOPES = ("sample", "feature", "object")
PARTITION_SETS = {"all": ("encoder", "grl", "layout", "decoder")}

METHODS = {
    "Sample-FT": ("sample", "ft"),
    "Sample-NG": ("sample", "ng"),
    "Feat-IF": ("feature", "if"),
    "Feat-NG": ("feature", "ng"),
    "Feat-MK": ("feature", "patch"),
    "Obj-IF": ("object", "if"),
    "Obj-NG": ("object", "ng"),
    "Obj-MK-PA": ("object", "patch"),
    "Obj-MK-NS": ("object", "noise"),
}
METHOD_IDS = tuple(METHODS)


@dataclass(frozen=True)
class UnlearnRequest:
    object_ids: frozenset
    scope: str | None = None  # None lets the method pick its own scope

    def __post_init__(self):
        object.__setattr__(self, "object_ids", frozenset(self.object_ids))
        if not self.object_ids:
            raise ValueError("an unlearning request needs at least one object id")
        if self.scope is not None and self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")

    def with_scope(self, scope: str) -> "UnlearnRequest":
        return replace(self, scope=scope)


@dataclass(frozen=True)
class RemovalSet:
    scope: str
    samples: tuple = ()  # ΔD, sample scope
    categories: tuple = ()  # ΔC, feature scope
    objects: tuple = ()  # ΔO, object scope

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        populated = {"sample": self.samples, "feature": self.categories, "object": self.objects}
        for s, vals in populated.items():
            if s != self.scope and vals:
                raise ValueError(f"{s} field populated on a {self.scope}-scope removal set")

    @property
    def empty(self) -> bool:
        return not (self.samples or self.categories or self.objects)

    def affected_objects(self, ds: Dataset) -> list[tuple[int, str]]:
        """(sample index, object id) pairs whose content is being removed."""
        train = set(ds.train_indices)
        if self.scope == "object":
            return sorted((ds.locate(o)[0], o) for o in self.objects)
        if self.scope == "feature":
            cats = set(self.categories)
            return [
                (s.index, n.id)
                for s in ds.samples
                if s.index in train
                for n in s.graph.objects
                if n.category in cats
            ]
        return [(i, n.id) for i in self.samples for n in ds.samples[i].graph.objects]

    def affected_samples(self, ds: Dataset) -> list[int]:
        return sorted({i for i, _ in self.affected_objects(ds)} | set(self.samples))

    def listing(self) -> dict:
        return {"scope": self.scope, "samples": list(self.samples), "categories": list(self.categories), "objects": list(self.objects)}


def select_removal(request: UnlearnRequest, ds: Dataset, scope: str | None = None) -> RemovalSet:
    scope = scope or request.scope
    if scope is None:
        raise ValueError("no scope given")
    train = set(ds.train_indices)
    for o in sorted(request.object_ids):
        if not ds.has_object(o) or ds.locate(o)[0] not in train:
            raise UnknownObjectId(f"object {o!r} is not in the training set")
    if scope == "object":
        return RemovalSet("object", objects=tuple(sorted(request.object_ids)))
    if scope == "feature":
        return RemovalSet("feature", categories=tuple(sorted({ds.node(o).category for o in request.object_ids})))
    return RemovalSet("sample", samples=tuple(sorted({ds.locate(o)[0] for o in request.object_ids})))


# configuration -------------------------------------------------------------


@dataclass(frozen=True)
class MethodConfig:
    lambda_ng: float = 0.5
    sigma_noise: float = 0.2
    lambda_redact: float = 1e-3
    epochs_ft: int = 200
    lr_ft: float = 2e-3
    batch_size: int = 20
    samples_per_epoch: int = 0  # 0: every epoch is a full pass over the pool
    zv_dropout: float = 0.3
    cg_damping: float = 0.01
    cg_tol: float = 1e-6
    cg_max_iter: int = 10
    hvp_samples: int = 16
    target_partitions: tuple = ("grl",)
    seed: int = 7

    def __post_init__(self):
        if self.lambda_ng < 0 or self.sigma_noise < 0 or self.epochs_ft < 0:
            raise ValueError("lambda_ng, sigma_noise and epochs_ft must be non-negative")
        if self.samples_per_epoch < 0 or self.batch_size < 1:
            raise ValueError("samples_per_epoch must be >= 0 and batch_size >= 1")
        parts = tuple(self.target_partitions)
        if len(parts) == 1 and parts[0] in PARTITION_SETS:
            parts = PARTITION_SETS[parts[0]]
        bad = set(parts) - set(PARTITION_SETS["all"])
        if bad:
            raise ValueError(f"unknown partitions {sorted(bad)}")
        object.__setattr__(self, "target_partitions", parts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_partitions"] = list(self.target_partitions)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# masking ------------------------------------------------------------------


def _check_roi(image: np.ndarray, roi) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = (int(v) for v in roi)
    h, w = image.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise RoiOutOfBounds(f"roi {roi} outside {w}x{h} image")
    return x0, y0, x1, y1


def apply_patch_mask(image: np.ndarray, roi) -> np.ndarray:
    x0, y0, x1, y1 = _check_roi(image, roi)
    out = image.copy()
    out[y0:y1, x0:x1] = 0
    return out


def apply_noise_mask(image: np.ndarray, roi, sigma: float, seed: int, clamp: bool = True) -> np.ndarray:
    """Add N(0, sigma^2) noise inside ``roi``; sigma is a fraction of the dynamic range.

    Float images are taken to live in [0, 1]; uint8 images in [0, 255].
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x0, y0, x1, y1 = _check_roi(image, roi)
    out = image.copy()
    if sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, sigma, size=out[y0:y1, x0:x1].shape)
    if image.dtype == np.uint8:
        vals = out[y0:y1, x0:x1] / 255.0 + eta
        out[y0:y1, x0:x1] = np.round(np.clip(vals, 0.0, 1.0) * 255.0).astype(np.uint8)
        return out
    vals = out[y0:y1, x0:x1] + eta
    out[y0:y1, x0:x1] = np.clip(vals, 0.0, 1.0) if clamp else vals
    return out


def roi_mask(shape: tuple[int, int], rois: Iterable) -> np.ndarray:
    m = np.zeros(shape)
    for x0, y0, x1, y1 in rois:
        m[y0:y1, x0:x1] = 1.0
    return m


def _rois_by_sample(ds: Dataset, pairs: Iterable[tuple[int, str]]) -> dict[int, list]:
    size = ds.image_size
    out: dict[int, list] = {}
    for i, oid in pairs:
        out.setdefault(i, []).append(roi_of(ds.node(oid), size, size))
    return out


def masked_items(
    ds: Dataset,
    items: Sequence[Prepared],
    pairs: Iterable[tuple[int, str]],
    kind: str,
    model_cfg,
    sigma: float = 0.2,
    seed: int = 7,
) -> tuple[list[Prepared], list[int]]:
    """Copy of ``items`` with the given objects masked; also returns the touched positions."""
    if kind not in ("patch", "noise"):
        raise ValueError(f"unknown mask kind {kind!r}")
    by_sample = _rois_by_sample(ds, pairs)
    pos = {it.index: k for k, it in enumerate(items)}
    out = list(items)
    touched = []
    for i in sorted(by_sample):
        if i not in pos:
            continue
        k = pos[i]
        img = items[k].image
        for r, roi in enumerate(by_sample[i]):
            if kind == "patch":
                img = apply_patch_mask(img, roi)
            else:
                img = apply_noise_mask(img, roi, sigma, int(np.random.SeedSequence([seed, i, r]).generate_state(1)[0]))
        out[k] = prepare(items[k].index, items[k].graph, img, ds.vocab, model_cfg)
        touched.append(k)
    return out, touched


# fine-tuning ---------------------------------------------------------------


@dataclass
class FinetuneLog:
    rows: list = field(default_factory=list)  # (epoch, L_gen, L_ng, wall_ms)

    def to_csv(self) -> str:
        lines = ["epoch,L_gen,L_ng,wall_ms"]
        lines += [f"{e},{g!r},{n!r},{ms:.3f}" for e, g, n, ms in self.rows]
        return "\n".join(lines) + "\n"


def finetune(
    model: SG2IGenerator,
    items: Sequence[Prepared],
    cfg: MethodConfig,
    gen_exclude: Sequence[int] = (),
    ng_masks: dict | None = None,
    lambda_ng: float = 0.0,
) -> tuple[SG2IGenerator, FinetuneLog]:
    """Continue training a copy of ``model`` on ``items``.

    Each epoch visits ``samples_per_epoch`` positions drawn uniformly without
    replacement (all of them, shuffled, when it is 0), so every item, masked
    or not, is weighted as in the full-data objective.
    Positions in ``gen_exclude`` contribute no generation loss.  ``ng_masks``
    maps positions to (H, W) masks on which the negated reconstruction loss
    ``-lambda_ng * l_roi`` is applied.
    """
    model = model.copy()
    params = model.params
    names = params.names()
    ng_masks = ng_masks or {}
    excl = set(gen_exclude)
    size = items[0].image.shape[0] if items else 0
    log = FinetuneLog()
    for epoch in range(1, cfg.epochs_ft + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, epoch]))
        k = len(items) if cfg.samples_per_epoch == 0 else min(cfg.samples_per_epoch, len(items))
        order = rng.choice(len(items), size=k, replace=False)
        tot_gen = tot_ng = 0.0
        for s in range(0, len(order), cfg.batch_size):
            pos = [int(p) for p in order[s : s + cfg.batch_size]]
            batch = collate([items[p] for p in pos], model.cfg.n_predicates)
            drop = dropout_mask(rng, batch.node_mask, cfg.zv_dropout)
            pred = forward(model, batch, "reconstruction", drop=drop)
            w_gen = np.array([0.0 if p in excl else 1.0 for p in pos])
            loss = l_gen = recon_loss(pred, batch.images, weights=w_gen)
            ng_val = 0.0
            if lambda_ng > 0 and any(p in ng_masks for p in pos):
                mask = np.stack([ng_masks.get(p, np.zeros((size, size))) for p in pos])
                w_ng = np.array([1.0 if p in ng_masks else 0.0 for p in pos])
                l_ng = recon_loss(pred, batch.images, mask=mask, weights=w_ng)
                loss = l_gen - ad.scale(l_ng, lambda_ng)
                ng_val = l_ng.item()
            check_finite(loss.item(), f"fine-tune epoch {epoch}")
            grads = ad.grad(loss, params.tensors())
            ad.adam_step(params, dict(zip(names, grads)), cfg.lr_ft)
            tot_gen += l_gen.item()
            tot_ng += ng_val
        log.rows.append((epoch, tot_gen, -lambda_ng * tot_ng if lambda_ng else 0.0, 1000.0 * (time.perf_counter() - t0)))
    return model, log


def _items_for(ds: Dataset, model: SG2IGenerator, items: Sequence[Prepared] | None) -> list[Prepared]:
    items = prepare_dataset(ds, model.cfg) if items is None else items
    train = set(ds.train_indices)
    return [it for it in items if it.index in train]


def plain_finetune(model, ds: Dataset, removal: RemovalSet, cfg: MethodConfig, items=None):
    """Fine-tune on the training set with the removed samples left out."""
    pool = _items_for(ds, model, items)
    drop = set(removal.affected_samples(ds)) if removal.scope == "sample" else set()
    return finetune(model, [it for it in pool if it.index not in drop], cfg)


def negative_guidance_finetune(model, ds: Dataset, removal: RemovalSet, cfg: MethodConfig, items=None):
    """Minimise L_gen - lambda_ng * l_roi; with lambda_ng = 0 this is plain fine-tuning."""
    if cfg.lambda_ng == 0:
        return plain_finetune(model, ds, removal, cfg, items)
    pool = _items_for(ds, model, items)
    pos = {it.index: k for k, it in enumerate(pool)}
    size = ds.image_size
    if removal.scope == "sample":
        rois = {i: [(0, 0, size, size)] for i in removal.samples}
        exclude = [pos[i] for i in removal.samples if i in pos]
    else:
        rois = _rois_by_sample(ds, removal.affected_objects(ds))
        exclude = []
    masks = {pos[i]: roi_mask((size, size), r) for i, r in rois.items() if i in pos}
    return finetune(model, pool, cfg, gen_exclude=exclude, ng_masks=masks, lambda_ng=cfg.lambda_ng)


def masked_finetune(model, ds: Dataset, removal: RemovalSet, kind: str, cfg: MethodConfig, items=None):
    if removal.scope == "sample":
        raise IncompatibleScope("masked fine-tuning applies to object or feature scope")
    pool = _items_for(ds, model, items)
    masked, _ = masked_items(ds, pool, removal.affected_objects(ds), kind, model.cfg, cfg.sigma_noise, cfg.seed)
    return finetune(model, masked, cfg)


# influence redaction ---------------------------------------------------------


@dataclass
class InfluenceTerms:
    loss_plus: float  # l_ΔO with z_v zeroed on removed objects
    loss_orig: float
    grad_plus: np.ndarray
    grad_orig: np.ndarray
    samples: tuple

    @property
    def difference(self) -> np.ndarray:
        return self.grad_plus - self.grad_orig


def _with_grad_on(model: SG2IGenerator, partitions):
    model.params.set_requires_grad(partitions)


def influence_removal_loss(
    model: SG2IGenerator,
    ds: Dataset,
    removal: RemovalSet,
    partitions: Sequence[str] = ("grl",),
    items: Sequence[Prepared] | None = None,
) -> InfluenceTerms:
    """ROI-restricted loss of the removed objects with and without their z_v.

    Both terms are summed over the samples that hold a removed object; the
    loss of each sample only counts pixels inside the union of its removed
    ROIs.  Gradients are flattened over ``partitions``.
    """
    if removal.scope == "sample":
        raise IncompatibleScope("influence redaction applies to object or feature scope")
    pool = {it.index: it for it in _items_for(ds, model, items)}
    pairs = removal.affected_objects(ds)
    n_flat = model.params.flatten(partitions).size
    if not pairs:
        z = np.zeros(n_flat)
        return InfluenceTerms(0.0, 0.0, z, z.copy(), ())
    by_sample: dict[int, list[str]] = {}
    for i, oid in pairs:
        by_sample.setdefault(i, []).append(oid)
    idx = sorted(by_sample)
    chunk = [pool[i] for i in idx]
    batch = collate(chunk, model.cfg.n_predicates)
    n_nodes = len(chunk[0].node_mask)
    size = ds.image_size
    zero = np.zeros(batch.n_nodes)
    masks = np.zeros((len(idx), size, size))
    for b, i in enumerate(idx):
        g = chunk[b].graph
        for oid in by_sample[i]:
            j = g.index_of(oid)
            zero[b * n_nodes + j] = 1.0
            x0, y0, x1, y1 = chunk[b].rois[j]
            masks[b, y0:y1, x0:x1] = 1.0
    weights = np.full(len(idx), float(len(idx)))  # sum over samples
    tensors = model.params.tensors(partitions)
    _with_grad_on(model, partitions)
    try:
        out = []
        for zz in (zero, None):
            loss = recon_loss(forward(model, batch, "reconstruction", zero_zv=zz), batch.images, mask=masks, weights=weights)
            out.append((loss.item(), np.concatenate([g.ravel() for g in ad.grad(loss, tensors)])))
    finally:
        _with_grad_on(model, None)
    (lp, gp), (lo, go) = out
    return InfluenceTerms(lp, lo, gp, go, tuple(idx))


def hvp_subset(ds: Dataset, n: int) -> list[int]:
    """Fixed, evenly spaced subset of training indices used for Hessian products."""
    train = ds.train_indices
    if n >= len(train):
        return list(train)
    picks = np.linspace(0, len(train) - 1, n).round().astype(int)
    return [train[k] for k in picks]


def dataset_objective(model: SG2IGenerator, items: Sequence[Prepared], partitions: Sequence[str]):
    """(loss_fn, grad_fn) of the mean training loss L_D as functions of the
    flat parameter vector over ``partitions``.  The model is left unchanged."""
    batch = collate(list(items), model.cfg.n_predicates)
    tensors = model.params.tensors(partitions)

    def evaluate(theta: np.ndarray, need_grad: bool):
        saved = model.params.flatten(partitions)
        model.params.unflatten(theta, partitions)
        _with_grad_on(model, partitions if need_grad else ())
        try:
            loss = recon_loss(forward(model, batch, "reconstruction"), batch.images)
            if not need_grad:
                return loss.item()
            return np.concatenate([g.ravel() for g in ad.grad(loss, tensors)])
        finally:
            _with_grad_on(model, None)
            model.params.unflatten(saved, partitions)

    return (lambda theta: evaluate(theta, False)), (lambda theta: evaluate(theta, True))


def dataset_grad_fn(model: SG2IGenerator, items: Sequence[Prepared], partitions: Sequence[str]):
    """theta (flat over partitions) -> gradient of the mean training loss L_D."""
    return dataset_objective(model, items, partitions)[1]


@dataclass
class RedactionInfo:
    cg: CGResult | None
    delta_norm: float
    step_norm: float
    hvp_calls: int


def redaction_delta(
    model: SG2IGenerator,
    ds: Dataset,
    removal: RemovalSet,
    cfg: MethodConfig,
    items: Sequence[Prepared] | None = None,
) -> tuple[np.ndarray, RedactionInfo]:
    """Δθ = (H + δI)⁻¹ (∇l_ΔO(z_s+) - ∇l_ΔO(z_s)) over ``cfg.target_partitions``.

    H is the Hessian of the mean training loss on a fixed subset of
    ``cfg.hvp_samples`` training samples, applied through finite-difference
    Hessian-vector products inside conjugate gradient.
    """
    parts = cfg.target_partitions
    terms = influence_removal_loss(model, ds, removal, parts, items)
    g = terms.difference
    if not np.any(g):
        return np.zeros_like(g), RedactionInfo(None, 0.0, 0.0, 0)
    pool = {it.index: it for it in _items_for(ds, model, items)}
    sub = [pool[i] for i in hvp_subset(ds, cfg.hvp_samples)]
    work = model.copy()
    grad_fn = dataset_grad_fn(work, sub, parts)
    theta = work.params.flatten(parts)
    eps = ad.second_order.default_hvp_eps(theta)
    calls = [0]

    def apply_h(v):
        calls[0] += 1
        return hessian_vector_product(grad_fn, theta, v, eps)

    res = conjugate_gradient_solve(apply_h, g, cfg.cg_damping, cfg.cg_tol, cfg.cg_max_iter)
    return res.x, RedactionInfo(res, float(np.linalg.norm(res.x)), 0.0, calls[0])


def influence_redact(
    model: SG2IGenerator,
    ds: Dataset,
    removal: RemovalSet,
    cfg: MethodConfig,
    items: Sequence[Prepared] | None = None,
) -> tuple[SG2IGenerator, RedactionInfo]:
    """θ⁻ = θ* + λ·Δθ on the target partitions; every other parameter is untouched."""
    if cfg.lambda_redact == 0:
        return model.copy(), RedactionInfo(None, 0.0, 0.0, 0)
    delta, info = redaction_delta(model, ds, removal, cfg, items)
    if info.cg is None:
        return model.copy(), info
    out = redact_with_delta(model, delta, cfg.lambda_redact, cfg.target_partitions)
    info.step_norm = float(np.linalg.norm(cfg.lambda_redact * delta))
    return out, info


def redact_with_delta(model: SG2IGenerator, delta: np.ndarray, lam: float, partitions) -> SG2IGenerator:
    """Apply a precomputed Δθ at scale ``lam`` (used by λ sweeps)."""
    out = model.copy()
    if lam != 0:
        theta = out.params.flatten(partitions)
        out.params.unflatten(theta + lam * delta, partitions)
    return out


# retraining ---------------------------------------------------------------


def retrain_exact(
    ds: Dataset,
    removal: RemovalSet,
    train_cfg: TrainConfig,
    model_cfg,
    items: Sequence[Prepared] | None = None,
) -> tuple[SG2IGenerator, TrainLog]:
    """Train from scratch with the removal applied to the data."""
    items = prepare_dataset(ds, model_cfg) if items is None else items
    train_set = set(ds.train_indices)
    pool = [it for it in items if it.index in train_set]
    if removal.scope == "sample":
        gone = set(removal.samples)
        pool = [it for it in pool if it.index not in gone]
    elif not removal.empty:
        pool, _ = masked_items(ds, pool, removal.affected_objects(ds), "patch", model_cfg)
    return train(pool, train_cfg, model_cfg)


# dispatch -----------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    scope: str
    removal: dict
    config_hash: str
    wall_ms: float
    cg: dict | None = None
    checkpoint: str | None = None
    losses: list = field(default_factory=list)

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_ms")
        return d

    def to_json(self, with_time: bool = True) -> str:
        return json.dumps(self.to_dict(with_time), sort_keys=True, indent=2) + "\n"


def method_scope(method_id: str) -> str:
    if method_id not in METHODS:
        raise ValueError(f"unknown method {method_id!r}; expected one of {', '.join(METHOD_IDS)}")
    return METHODS[method_id][0]


def run_method(
    method_id: str,
    model: SG2IGenerator,
    ds: Dataset,
    request: UnlearnRequest,
    cfg: MethodConfig,
    items: Sequence[Prepared] | None = None,
) -> tuple[SG2IGenerator, RunRecord]:
    scope = method_scope(method_id)
    if request.scope is not None and request.scope != scope:
        raise IncompatibleScope(f"{method_id} needs {scope} scope, request has {request.scope}")
    kind = METHODS[method_id][1]
    removal = select_removal(request, ds, scope)
    items = prepare_dataset(ds, model.cfg) if items is None else items
    cg = None
    losses: list = []
    t0 = time.perf_counter()
    if kind == "ft":
        out, log = plain_finetune(model, ds, removal, cfg, items)
        losses = log.rows
    elif kind == "ng":
        out, log = negative_guidance_finetune(model, ds, removal, cfg, items)
        losses = log.rows
    elif kind in ("patch", "noise"):
        out, log = masked_finetune(model, ds, removal, kind, cfg, items)
        losses = log.rows
    else:
        out, info = influence_redact(model, ds, removal, cfg, items)
        cg = {
            "iterations": info.cg.iterations if info.cg else 0,
            "residual": info.cg.residual if info.cg else 0.0,
            "converged": info.cg.converged if info.cg else True,
            "hvp_calls": info.hvp_calls,
            "delta_norm": info.delta_norm,
            "step_norm": info.step_norm,
        }
    wall = 1000.0 * (time.perf_counter() - t0)
    key = json.dumps({"method": method_id, "cfg": cfg.to_dict(), "objects": sorted(request.object_ids)}, sort_keys=True)
    record = RunRecord(
        method=method_id,
        scope=scope,
        removal=removal.listing(),
        config_hash=hashlib.sha256(key.encode()).hexdigest()[:16],
        wall_ms=wall,
        cg=cg,
        losses=[[e, g, n] for e, g, n, _ in losses],
    )
    return out, record
