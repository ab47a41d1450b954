"""Command-line pipeline: gen-data -> train -> unlearn -> evaluate -> attack -> report (+ sweep).

Usage::

    sgunlearn gen-data --config exp.ini [--out DIR] [--seed N]
    sgunlearn train    --config exp.ini
    sgunlearn unlearn  --config exp.ini [--methods Obj-MK-PA,Obj-IF]
    sgunlearn evaluate --config exp.ini
    sgunlearn attack   --config exp.ini
    sgunlearn report   --config exp.ini
    sgunlearn sweep    --config exp.ini

Stages talk only through files under the output directory::

    data/                 manifest.json, images/*.ppm, graphs/*.json
    model/                model.ckpt (+ .json), train_log.csv, latents.csv
    unlearn/request.json  resolved object ids
    unlearn/<method>/     model.ckpt (+ .json), run.json
    eval/                 metrics.csv, images/<task>/*.ppm
    attack/               leakage.csv, control.csv, verdict.json, *.ppm
    report/               summary.csv, radar.csv, timing.csv
    sweep/                lambda.csv, partitions.csv

SGUNLEARN_THREADS > 1 runs the methods of ``unlearn`` in that many worker
processes (wall times then include contention).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import leakage as lk
from . import metrics as mx
from .config import ExperimentConfig, load_config
from .errors import MissingArtifact, SGUnlearnError
from .imageops import draw_box, to_uint8, write_ppm
from .model import ModelConfig, SG2IGenerator, export_latents, prepare_dataset, train
from .scene_graph import roi_of
from .synth import generate_dataset, load_dataset, write_dataset
from .unlearning import (
    METHOD_IDS,
    RunRecord,
    UnlearnRequest,
    redact_with_delta,
    redaction_delta,
    retrain_exact,
    run_method,
    select_removal,
)

log = logging.getLogger("sgunlearn")

COMMANDS = ("gen-data", "train", "unlearn", "evaluate", "attack", "report", "sweep")
RETRAIN = "Retrain"
IDENTITY = "Original"
TIMING_CLASSES = (
    ("Redaction", ("Obj-IF",)),
    ("Fine-tune", ("Obj-NG", "Obj-MK-PA", "Obj-MK-NS")),
    ("Retrain", (RETRAIN,)),
)
GREEN = (0, 255, 0)
RED = (255, 0, 0)


# artifact helpers ---------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, what)
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _dataset(out: Path):
    _require(out / "data" / "manifest.json", "dataset manifest (run gen-data)")
    return load_dataset(out / "data")


def _model(out: Path) -> SG2IGenerator:
    return SG2IGenerator.load(_require(out / "model" / "model.ckpt", "trained model (run train)"))


def _unlearned(out: Path, method: str) -> SG2IGenerator:
    return SG2IGenerator.load(_require(out / "unlearn" / method / "model.ckpt", f"{method} model (run unlearn)"))


def _request_ids(cfg: ExperimentConfig, out: Path, ds) -> tuple:
    path = out / "unlearn" / "request.json"
    if path.exists():
        return tuple(json.loads(path.read_text())["object_ids"])
    return cfg.object_ids or (lk.auto_target(ds),)


def _methods_present(out: Path, cfg: ExperimentConfig) -> list[str]:
    names = list(cfg.methods) + [RETRAIN]
    return [m for m in names if (out / "unlearn" / m / "model.ckpt").exists()]


# commands -----------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> int:
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.data)
    _, digest = write_dataset(ds, out / "data")
    log.info("generated %d samples in %.2fs", len(ds), time.perf_counter() - t0)
    print(digest)
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    ds = _dataset(out)
    mcfg = ModelConfig.for_vocab(ds.vocab, ds.image_size, len(ds.samples[0].graph.nodes))
    items = prepare_dataset(ds, mcfg)
    train_items = [items[i] for i in ds.train_indices]
    model, tlog = train(train_items, cfg.train, mcfg)
    d = out / "model"
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / "model.ckpt")
    _write(d / "train_log.csv", tlog.to_csv())
    _write(d / "latents.csv", export_latents(model, train_items))
    log.info("trained %d epochs, final loss %.5f", cfg.train.epochs, tlog.rows[-1][1] if tlog.rows else float("nan"))
    return 0


def _unlearn_one(job):
    method, model, ds, ids, mcfg, tcfg, repeats, ckpt = job
    walls = []
    for _ in range(repeats):
        if method == RETRAIN:
            t0 = time.perf_counter()
            removal = select_removal(UnlearnRequest(ids), ds, "object")
            new, _ = retrain_exact(ds, removal, tcfg, model.cfg)
            walls.append(1000.0 * (time.perf_counter() - t0))
            rec = RunRecord(RETRAIN, "object", removal.listing(), tcfg_hash(tcfg, ids), walls[-1])
        else:
            items = prepare_dataset(ds, model.cfg)
            new, rec = run_method(method, model, ds, UnlearnRequest(ids), mcfg, items)
            walls.append(rec.wall_ms)
    rec.wall_ms = float(np.mean(walls))
    rec.checkpoint = ckpt
    return method, new, rec, walls


def tcfg_hash(tcfg, ids) -> str:
    key = json.dumps({"method": RETRAIN, "train": tcfg.to_dict(), "objects": sorted(ids)}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def cmd_unlearn(cfg: ExperimentConfig, out: Path) -> int:
    ds = _dataset(out)
    model = _model(out)
    ids = _request_ids(cfg, out, ds)
    select_removal(UnlearnRequest(ids), ds, "object")  # validates the ids
    _write(out / "unlearn" / "request.json", json.dumps({"object_ids": list(ids)}, indent=2) + "\n")
    methods = list(cfg.methods) + ([RETRAIN] if cfg.retrain else [])
    jobs = [
        (m, model, ds, ids, cfg.method, cfg.train, cfg.repeats, str(Path("unlearn") / m / "model.ckpt"))
        for m in methods
    ]
    threads = int(os.environ.get("SGUNLEARN_THREADS", "1") or 1)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_unlearn_one, jobs))
    else:
        results = [_unlearn_one(j) for j in jobs]
    for method, new, rec, walls in results:
        d = out / "unlearn" / method
        d.mkdir(parents=True, exist_ok=True)
        new.save(d / "model.ckpt")
        body = rec.to_dict()
        body["wall_ms_runs"] = walls
        _write(d / "run.json", json.dumps(body, sort_keys=True, indent=2) + "\n")
        log.info("%-10s %9.1f ms", method, rec.wall_ms)
    return 0


def _overlay(img01: np.ndarray, green=(), red=()) -> np.ndarray:
    img = to_uint8(img01)
    for r in red:
        img = draw_box(img, r, RED)
    for r in green:
        img = draw_box(img, r, GREEN)
    return img


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> int:
    ds = _dataset(out)
    orig = _model(out)
    ids = _request_ids(cfg, out, ds)
    methods = _methods_present(out, cfg)
    items = prepare_dataset(ds, orig.cfg)
    a1, a2, a3 = mx.evaluation_groups(ds, ids)
    needed = sorted({i for i, _ in a1} | {i for i, _ in a2} | set(a3))
    size = ds.image_size
    home = sorted({i for i, _ in a1})
    a3_show = sorted(a3)[:1]
    reports = []
    for task in cfg.tasks:
        base = mx.model_outputs(orig, ds, needed, task, items)
        reports.append(mx.evaluate_a1a2a3(orig, orig, ds, ids, task, items, IDENTITY, (base, base)))
        pictures = [(IDENTITY, base)]
        for m in methods:
            unl = _unlearned(out, m)
            outs = mx.model_outputs(unl, ds, needed, task, items)
            reports.append(mx.evaluate_a1a2a3(orig, unl, ds, ids, task, items, m, (base, outs)))
            pictures.append((m, outs))
        img_dir = out / "eval" / "images" / task
        img_dir.mkdir(parents=True, exist_ok=True)
        for name, outs in pictures:
            for i in home:
                boxes = [roi_of(ds.node(o), size, size) for s, o in a1 if s == i]
                write_ppm(img_dir / f"{name}_s{i:04d}.ppm", _overlay(outs[i], green=boxes))
            for i in a3_show:
                boxes = [roi_of(ds.node(o), size, size) for o in a3[i]]
                write_ppm(img_dir / f"{name}_s{i:04d}.ppm", _overlay(outs[i], red=boxes))
        for i in home + a3_show:
            truth = ds.samples[i].image / 255.0
            boxes = [roi_of(ds.node(o), size, size) for s, o in a1 if s == i]
            write_ppm(img_dir / f"truth_s{i:04d}.ppm", _overlay(truth, green=boxes, red=[roi_of(ds.node(o), size, size) for o in a3.get(i, [])]))
    for r in reports:
        if r.empty:
            log.warning("%s/%s: empty dimension(s) %s", r.method, r.task, ",".join(r.empty))
    _write(out / "eval" / "metrics.csv", mx.reports_to_csv(reports))
    return 0


def cmd_attack(cfg: ExperimentConfig, out: Path) -> int:
    ds = _dataset(out)
    orig = _model(out)
    unl = _unlearned(out, cfg.attack_method)
    ids = _request_ids(cfg, out, ds)
    specs = lk.default_specs(ids)
    rep = lk.run_leakage_test(unl, orig, ds, specs)
    ctrl = lk.run_leakage_test(orig, orig, ds, specs)
    d = out / "attack"
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "leakage.csv", rep.to_csv())
    _write(d / "control.csv", ctrl.to_csv())
    verdict = {"method": cfg.attack_method, "verdict": rep.verdict, "control": ctrl.verdict, "tau": lk.TAU}
    _write(d / "verdict.json", json.dumps(verdict, sort_keys=True, indent=2) + "\n")
    size = ds.image_size
    for name, img in sorted(rep.images.items()):
        oid = name.split("_")[1]
        write_ppm(d / f"{name}.ppm", _overlay(img, green=[roi_of(ds.node(oid), size, size)]))
    for row in rep.rows:
        if not row.applicable:
            log.info("%s attack not applicable: %s", row.attack, row.reason)
    print(rep.verdict)
    return 0


def _mean_std(vals: list[float]) -> tuple[str, str]:
    if not vals:
        return "", ""
    mean = float(np.mean(vals))
    std = f"{float(np.std(vals, ddof=1)):.3f}" if len(vals) > 1 else ""
    return f"{mean:.3f}", std


RADAR_AXES = (
    ("A1_cSSIM", "A1", "SSIM", True),
    ("A1_LP", "A1", "LP", False),
    ("A1_MAE", "A1", "MAE", False),
    ("A2_SSIM", "A2", "SSIM", False),
    ("A2_cLP", "A2", "LP", True),
    ("A2_cMAE", "A2", "MAE", True),
    ("A3_SSIM", "A3", "SSIM", False),
    ("A3_cLP", "A3", "LP", True),
    ("A3_cMAE", "A3", "MAE", True),
)


def radar_value(row: dict, dim: str, metric: str, complement: bool) -> float:
    v = float(row[f"{dim}_{metric}"])
    if math.isnan(v):
        return v
    if metric == "MAE":
        v = v / 255.0
    if metric == "SSIM":
        v = min(max(v, 0.0), 1.0)
    if complement:
        v = 1.0 - v
    return min(max(v, 0.0), 1.0)


def cmd_report(cfg: ExperimentConfig, out: Path) -> int:
    rows = mx.parse_csv(_require(out / "eval" / "metrics.csv", "metrics (run evaluate)").read_text())
    runs = {}
    for m in list(METHOD_IDS) + [RETRAIN]:
        p = out / "unlearn" / m / "run.json"
        if p.exists():
            runs[m] = json.loads(p.read_text())
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    cols = mx.CSV_HEADER.split(",")[:-1]
    lines = [",".join(cols + ["unlearn_ms"])]
    for r in rows:
        run = runs.get(r["method"])
        lines.append(",".join([r[c] for c in cols] + [f"{run['wall_ms']:.3f}" if run else ""]))
    _write(d / "summary.csv", "\n".join(lines) + "\n")
    radar = ["method,task," + ",".join(a[0] for a in RADAR_AXES)]
    for r in rows:
        vals = [radar_value(r, dim, met, comp) for _, dim, met, comp in RADAR_AXES]
        radar.append(f"{r['method']},{r['task']}," + ",".join("nan" if math.isnan(v) else repr(v) for v in vals))
    _write(d / "radar.csv", "\n".join(radar) + "\n")
    timing = ["class,methods,n,mean_ms,std_ms"]
    for name, members in TIMING_CLASSES:
        walls = [w for m in members if m in runs for w in runs[m].get("wall_ms_runs", [runs[m]["wall_ms"]])]
        mean, std = _mean_std(walls)
        timing.append(f"{name},{'+'.join(m for m in members if m in runs)},{len(walls)},{mean},{std}")
    _write(d / "timing.csv", "\n".join(timing) + "\n")
    print((d / "timing.csv").read_text(), end="")
    return 0


SWEEP_HEADER = "partitions,lambda,param_delta_norm,cg_iterations,cg_residual,status,A1_SSIM,A1_LP,A1_MAE,A2_SSIM,A2_LP,A2_MAE,A3_SSIM,A3_LP,A3_MAE"


def _sweep_row(parts, lam, norm, info, status, rep=None) -> str:
    vals = [rep.values[f"{d}_{m}"] for d in mx.DIMS for m in mx.METRIC_NAMES] if rep else [math.nan] * 9
    it = info.cg.iterations if info and info.cg else 0
    res = info.cg.residual if info and info.cg else 0.0
    return ",".join(["+".join(parts), repr(float(lam)), repr(float(norm)), str(it), repr(float(res)), status] + [mx._fmt(v) for v in vals])


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    ds = _dataset(out)
    orig = _model(out)
    ids = _request_ids(cfg, out, ds)
    removal = select_removal(UnlearnRequest(ids), ds, "object")
    items = prepare_dataset(ds, orig.cfg)
    task = cfg.tasks[0]
    a1, a2, a3 = mx.evaluation_groups(ds, ids)
    needed = sorted({i for i, _ in a1} | {i for i, _ in a2} | set(a3))
    base = mx.model_outputs(orig, ds, needed, task, items)
    d = out / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    theta0 = orig.params.flatten()

    def point(parts, lam, delta, info):
        try:
            m = redact_with_delta(orig, delta, lam, parts)
            norm = float(np.linalg.norm(m.params.flatten() - theta0))
            outs = mx.model_outputs(m, ds, needed, task, items)
            rep = mx.evaluate_a1a2a3(orig, m, ds, ids, task, items, "Obj-IF", (base, outs))
            status = "ok" if (info.cg is None or info.cg.converged) else "cg-not-converged"
            return _sweep_row(parts, lam, norm, info, status, rep)
        except (SGUnlearnError, FloatingPointError, ValueError) as e:
            log.warning("sweep point %s lambda=%g failed: %s", "+".join(parts), lam, e)
            return _sweep_row(parts, lam, math.nan, info, f"failed:{type(e).__name__}")

    deltas = {}

    def delta_for(parts):
        if parts not in deltas:
            deltas[parts] = redaction_delta(orig, ds, removal, replace(cfg.method, target_partitions=parts), items)
        return deltas[parts]

    if not cfg.sweep_lambdas:
        log.warning("empty lambda grid: nothing to sweep")
    else:
        parts = cfg.method.target_partitions
        delta, info = delta_for(parts)
        rows = [point(parts, lam, delta, info) for lam in cfg.sweep_lambdas]
        _write(d / "lambda.csv", SWEEP_HEADER + "\n" + "\n".join(rows) + "\n")
    if not cfg.sweep_partitions:
        log.warning("empty partition grid: nothing to sweep")
    else:
        rows = []
        for parts in cfg.sweep_partitions:
            delta, info = delta_for(tuple(parts))
            rows.append(point(tuple(parts), cfg.method.lambda_redact, delta, info))
        _write(d / "partitions.csv", SWEEP_HEADER + "\n" + "\n".join(rows) + "\n")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgunlearn", description="Scene-graph object unlearning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, help="seed for data, training and unlearning")
    p.add_argument("--methods", help="comma-separated method ids (overrides [unlearn] methods)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise SGUnlearnError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        bad = [m for m in methods if m not in METHOD_IDS]
        if bad:
            raise SGUnlearnError(f"unknown method(s): {', '.join(bad)}")
        cfg = replace(cfg, methods=methods)
    out = Path(args.out or cfg.out_dir)
    return cfg, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, out = resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, out)
    except SGUnlearnError as e:
        print(f"sgunlearn {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"sgunlearn {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
