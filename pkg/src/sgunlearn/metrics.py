"""Image distances and the A1/A2/A3 unlearning evaluation grid.

A1 compares original-model and unlearned-model outputs on the requested
objects, A2 on the other objects of the same samples, A3 on same-category
objects in samples that hold no requested object.  SSIM and the perceptual
proxy see ROI patches resized to 16x16; MAE sees the raw ROI.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff.tensor import conv2d_raw
from .errors import ShapeMismatch, TooSmall
from .imageops import crop, resize_bilinear
from .model import Prepared, SG2IGenerator, as_unit_float, generate, prepare_dataset
from .scene_graph import ObjectNode, roi_of
from .synth import Dataset

C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2
PROXY_SEED = 0xC0FFEE
ROI_SIZE = 16
DIMS = ("A1", "A2", "A3")
METRIC_NAMES = ("SSIM", "LP", "MAE")

CSV_HEADER = (
    "method,task,A1_SSIM,A1_LP,A1_MAE,A2_SSIM,A2_LP,A2_MAE,A3_SSIM,A3_LP,A3_MAE,"
    "cA1_SSIM,cA2_LP,cA2_MAE,cA3_LP,cA3_MAE,n_A1,n_A2,n_A3,wall_ms"
)


def _to255(img) -> np.ndarray:
    arr = np.asarray(img)
    return arr.astype(np.float64) if arr.dtype == np.uint8 else arr.astype(np.float64) * 255.0


def mae(a, b) -> float:
    """Mean absolute difference in 8-bit units (float inputs are read as [0, 1])."""
    x, y = _to255(a), _to255(b)
    if x.shape != y.shape:
        raise ShapeMismatch("mae", x.shape, y.shape)
    return float(np.mean(np.abs(x - y)))


def _gray(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=2) if x.ndim == 3 else x


def ssim(a, b, window: int = 8, c1: float = C1, c2: float = C2) -> float:
    """Mean SSIM over all ``window``-sized square windows (stride 1) of the channel-mean image."""
    x, y = _gray(_to255(a)), _gray(_to255(b))
    if x.shape != y.shape:
        raise ShapeMismatch("ssim", x.shape, y.shape)
    if min(x.shape) < window:
        raise TooSmall(f"image {x.shape} smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx, my = wx.mean(axis=(2, 3)), wy.mean(axis=(2, 3))
    vx = wx.var(axis=(2, 3))
    vy = wy.var(axis=(2, 3))
    cov = (wx * wy).mean(axis=(2, 3)) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@lru_cache(maxsize=1)
def proxy_weights() -> tuple[np.ndarray, ...]:
    """Frozen orthogonal 3x3 kernels: 3->8->16->32 channels."""
    rng = np.random.default_rng(PROXY_SEED)
    out = []
    for cin, cout in ((3, 8), (8, 16), (16, 32)):
        q, _ = np.linalg.qr(rng.normal(size=(9 * cin, cout)))
        out.append(q.reshape(3, 3, cin, cout))
    return tuple(out)


def _proxy_features(img01: np.ndarray) -> list[np.ndarray]:
    x = (img01 - 0.5)[None]
    feats = []
    for k, w in enumerate(proxy_weights()):
        if k:
            n, h, wd, c = x.shape
            x = x[:, : h // 2 * 2, : wd // 2 * 2].reshape(n, h // 2, 2, wd // 2, 2, c).mean(axis=(2, 4))
        x = np.maximum(conv2d_raw(x, w), 0.0)
        norm = np.sqrt((x * x).sum(axis=3, keepdims=True))
        feats.append(x / np.maximum(norm, 1e-10))
    return feats


def perceptual_proxy(a, b) -> float:
    """Mean over three random-conv layers of the per-pixel squared distance of
    channel-normalised features, halved so the value lies in [0, 1]."""
    x, y = as_unit_float(a), as_unit_float(b)
    if x.shape != y.shape:
        raise ShapeMismatch("perceptual_proxy", x.shape, y.shape)
    if min(x.shape[:2]) < 16:
        raise TooSmall(f"image {x.shape[:2]} smaller than 16x16")
    dists = [float(np.mean(((fa - fb) ** 2).sum(axis=3))) / 2.0 for fa, fb in zip(_proxy_features(x), _proxy_features(y))]
    return float(np.mean(dists))


def extract_roi_resized(image, node: ObjectNode, out_size: int = ROI_SIZE) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    return resize_bilinear(crop(img, roi_of(node, w, h)), out_size, out_size)


def roi_scores(out_a: np.ndarray, out_b: np.ndarray, node: ObjectNode) -> tuple[float, float, float]:
    """(SSIM, LP, MAE) between two [0,1] images on one object's ROI."""
    pa, pb = extract_roi_resized(out_a, node), extract_roi_resized(out_b, node)
    h, w = out_a.shape[:2]
    roi = roi_of(node, w, h)
    return ssim(pa, pb), perceptual_proxy(pa, pb), mae(crop(out_a, roi), crop(out_b, roi))


# evaluation grid -----------------------------------------------------------


@dataclass
class MetricReport:
    values: dict  # "A1_SSIM" -> float (nan for empty dimensions)
    counts: dict  # "A1" -> int
    method: str = ""
    task: str = "reconstruction"
    wall_ms: float = 0.0
    empty: tuple = ()

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def complement(self, dim: str, metric: str) -> float:
        v = self.values[f"{dim}_{metric}"]
        return 255.0 - v if metric == "MAE" else 1.0 - v

    def csv_row(self, with_time: bool = True) -> str:
        vals = [self.values[f"{d}_{m}"] for d in DIMS for m in METRIC_NAMES]
        comps = [
            self.complement("A1", "SSIM"),
            self.complement("A2", "LP"),
            self.complement("A2", "MAE"),
            self.complement("A3", "LP"),
            self.complement("A3", "MAE"),
        ]
        cells = [self.method, self.task] + [_fmt(v) for v in vals + comps]
        cells += [str(self.counts[d]) for d in DIMS]
        cells.append(f"{self.wall_ms:.3f}" if with_time else "")
        return ",".join(cells)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for r in reports:
        out.write(r.csv_row() + "\n")
    return out.getvalue()


def parse_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln]
    head = lines[0].split(",")
    return [dict(zip(head, ln.split(","))) for ln in lines[1:]]


@dataclass
class _Acc:
    rows: list = field(default_factory=list)

    def mean(self) -> tuple[float, float, float]:
        if not self.rows:
            return (math.nan,) * 3
        return tuple(float(v) for v in np.mean(np.array(self.rows), axis=0))


def evaluation_groups(ds: Dataset, object_ids) -> tuple[list, list, dict]:
    """Object lists for the three dimensions over the training split.

    Returns (A1 pairs, A2 pairs, A3 {sample: [object ids]}) with pairs as
    (sample index, object id).
    """
    requested = set(object_ids)
    train = ds.train_indices
    home = {ds.locate(o)[0] for o in requested}
    cats = {ds.node(o).category for o in requested}
    a1 = sorted((ds.locate(o)[0], o) for o in requested)
    a2 = [(i, n.id) for i in sorted(home) for n in ds.samples[i].graph.objects if n.id not in requested]
    a3 = {}
    for i in train:
        if i in home:
            continue
        hits = [n.id for n in ds.samples[i].graph.objects if n.category in cats]
        if hits:
            a3[i] = hits
    return a1, a2, a3


def evaluate_a1a2a3(
    model_orig: SG2IGenerator,
    model_unl: SG2IGenerator,
    ds: Dataset,
    object_ids,
    task: str = "reconstruction",
    items: Sequence[Prepared] | None = None,
    method: str = "",
    outputs: tuple[dict, dict] | None = None,
) -> MetricReport:
    """The A1/A2/A3 grid between two models' outputs for one object-scope request.

    ``outputs`` may carry precomputed {sample index: image} maps for the two
    models (the original model's outputs are shared across methods).
    """
    t0 = time.perf_counter()
    a1, a2, a3 = evaluation_groups(ds, object_ids)
    needed = sorted({i for i, _ in a1} | {i for i, _ in a2} | set(a3))
    if outputs is None:
        outputs = (model_outputs(model_orig, ds, needed, task, items), model_outputs(model_unl, ds, needed, task, items))
    out_o, out_u = outputs
    values, counts, empty = {}, {}, []
    acc1, acc2 = _Acc(), _Acc()
    for i, oid in a1:
        acc1.rows.append(roi_scores(out_o[i], out_u[i], ds.node(oid)))
    for i, oid in a2:
        acc2.rows.append(roi_scores(out_o[i], out_u[i], ds.node(oid)))
    acc3 = _Acc()
    for i in sorted(a3):
        per = np.mean([roi_scores(out_o[i], out_u[i], ds.node(o)) for o in a3[i]], axis=0)
        acc3.rows.append(per)
    for dim, acc in zip(DIMS, (acc1, acc2, acc3)):
        for name, v in zip(METRIC_NAMES, acc.mean()):
            values[f"{dim}_{name}"] = v
        counts[dim] = len(acc.rows)
        if not acc.rows:
            empty.append(dim)
    return MetricReport(values, counts, method, task, 1000.0 * (time.perf_counter() - t0), tuple(empty))


def model_outputs(
    model: SG2IGenerator, ds: Dataset, indices: Sequence[int], task: str, items: Sequence[Prepared] | None = None
) -> dict[int, np.ndarray]:
    if items is None:
        items = prepare_dataset(ds, model.cfg)
    by_index = {it.index: it for it in items}
    chosen = [by_index[i] for i in indices]
    imgs = generate(model, chosen, task) if chosen else []
    return {i: img for i, img in zip(indices, imgs)}
