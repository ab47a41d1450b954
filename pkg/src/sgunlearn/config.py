"""Experiment configuration: one INI file drives the whole pipeline.

Example::

    [data]
    n_samples = 200
    image_size = 32
    seed = 7

    [train]
    epochs = 200

    [request]
    object_ids = auto

    [unlearn]
    methods = all

    [evaluate]
    tasks = reconstruction, synthesis

    [sweep]
    lambdas = 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1
    partitions = grl; all

Every key is optional; missing keys take the defaults of the underlying
dataclasses.  ``--seed`` on the command line overrides all three seeds.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .model import TrainConfig
from .synth import DatasetConfig
from .unlearning import METHOD_IDS, PARTITION_SETS, MethodConfig

TASK_NAMES = ("reconstruction", "synthesis")
DEFAULT_LAMBDAS = (1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    object_ids: tuple = ()  # empty -> choose automatically
    methods: tuple = METHOD_IDS
    retrain: bool = True
    repeats: int = 1
    tasks: tuple = TASK_NAMES
    attack_method: str = "Obj-MK-PA"
    sweep_lambdas: tuple = DEFAULT_LAMBDAS
    sweep_partitions: tuple = (("grl",), PARTITION_SETS["all"])
    out_dir: str = "runs/reference"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
            method=replace(self.method, seed=seed),
        )


def _split(text: str, sep: str = ",") -> list[str]:
    return [t.strip() for t in text.split(sep) if t.strip()]


def _get(sec, key, conv, default, section):
    if sec is None or key not in sec:
        return default
    raw = sec[key]
    try:
        return conv(raw)
    except ValueError as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected yes/no")


def _partitions(text: str) -> tuple:
    parts = tuple(_split(text))
    if len(parts) == 1 and parts[0] in PARTITION_SETS:
        return PARTITION_SETS[parts[0]]
    return parts


KNOWN = {
    "data": {"n_samples", "image_size", "seed", "objects_min", "objects_max", "identity_pool", "edge_prob", "pad_target", "max_overlap"},
    "train": {"epochs", "lr", "seed", "batch_size", "zv_dropout"},
    "request": {"object_ids", "scope"},
    "unlearn": {
        "methods", "retrain", "repeats", "lambda_ng", "sigma_noise", "lambda_redact", "epochs_ft", "lr_ft",
        "batch_size", "samples_per_epoch", "cg_damping", "cg_tol", "cg_max_iter", "hvp_samples", "target_partitions",
    },
    "evaluate": {"tasks"},
    "attack": {"method"},
    "sweep": {"lambdas", "partitions"},
    "output": {"dir"},
}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    for name in cp.sections():
        if name not in KNOWN:
            raise ConfigError(f"unknown section [{name}]")
        extra = set(cp[name]) - KNOWN[name]
        if extra:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    sec = {name: (cp[name] if cp.has_section(name) else None) for name in KNOWN}

    d0, s = DatasetConfig(), sec["data"]
    data = DatasetConfig(
        n_samples=_get(s, "n_samples", int, d0.n_samples, "data"),
        image_size=_get(s, "image_size", int, d0.image_size, "data"),
        objects_per_scene=(
            _get(s, "objects_min", int, d0.objects_per_scene[0], "data"),
            _get(s, "objects_max", int, d0.objects_per_scene[1], "data"),
        ),
        identity_pool=_get(s, "identity_pool", int, d0.identity_pool, "data"),
        seed=_get(s, "seed", int, d0.seed, "data"),
        pad_target=_get(s, "pad_target", int, d0.pad_target, "data"),
        edge_prob=_get(s, "edge_prob", float, d0.edge_prob, "data"),
        max_overlap=_get(s, "max_overlap", float, d0.max_overlap, "data"),
    )
    data.validate()

    t0, s = TrainConfig(), sec["train"]
    train = TrainConfig(
        epochs=_get(s, "epochs", int, t0.epochs, "train"),
        lr=_get(s, "lr", float, t0.lr, "train"),
        seed=_get(s, "seed", int, t0.seed, "train"),
        batch_size=_get(s, "batch_size", int, t0.batch_size, "train"),
        zv_dropout=_get(s, "zv_dropout", float, t0.zv_dropout, "train"),
    )
    if train.epochs < 0 or train.batch_size < 1:
        raise ConfigError("[train] epochs must be >= 0 and batch_size >= 1")

    m0, s = MethodConfig(), sec["unlearn"]
    try:
        method = MethodConfig(
            lambda_ng=_get(s, "lambda_ng", float, m0.lambda_ng, "unlearn"),
            sigma_noise=_get(s, "sigma_noise", float, m0.sigma_noise, "unlearn"),
            lambda_redact=_get(s, "lambda_redact", float, m0.lambda_redact, "unlearn"),
            epochs_ft=_get(s, "epochs_ft", int, m0.epochs_ft, "unlearn"),
            lr_ft=_get(s, "lr_ft", float, m0.lr_ft, "unlearn"),
            batch_size=_get(s, "batch_size", int, m0.batch_size, "unlearn"),
            samples_per_epoch=_get(s, "samples_per_epoch", int, m0.samples_per_epoch, "unlearn"),
            cg_damping=_get(s, "cg_damping", float, m0.cg_damping, "unlearn"),
            cg_tol=_get(s, "cg_tol", float, m0.cg_tol, "unlearn"),
            cg_max_iter=_get(s, "cg_max_iter", int, m0.cg_max_iter, "unlearn"),
            hvp_samples=_get(s, "hvp_samples", int, m0.hvp_samples, "unlearn"),
            target_partitions=_get(s, "target_partitions", _partitions, m0.target_partitions, "unlearn"),
            seed=train.seed,
        )
    except ValueError as e:
        raise ConfigError(f"[unlearn] {e}") from None

    methods = _get(s, "methods", _split, ["all"], "unlearn")
    if methods == ["all"]:
        methods = list(METHOD_IDS)
    bad = [m for m in methods if m not in METHOD_IDS]
    if bad:
        raise ConfigError(f"[unlearn] unknown method(s): {', '.join(bad)}")

    s = sec["request"]
    ids = _get(s, "object_ids", _split, ["auto"], "request")
    object_ids = () if ids == ["auto"] else tuple(sorted(ids))

    tasks = tuple(_get(sec["evaluate"], "tasks", _split, list(TASK_NAMES), "evaluate"))
    if not tasks or any(t not in TASK_NAMES for t in tasks):
        raise ConfigError(f"[evaluate] tasks must be drawn from {', '.join(TASK_NAMES)}")

    attack_method = _get(sec["attack"], "method", str.strip, "Obj-MK-PA", "attack")
    if attack_method not in METHOD_IDS:
        raise ConfigError(f"[attack] unknown method {attack_method!r}")

    s = sec["sweep"]
    lambdas = tuple(float(x) for x in _get(s, "lambdas", _split, [str(v) for v in DEFAULT_LAMBDAS], "sweep"))
    parts = _get(s, "partitions", lambda t: [_partitions(p) for p in _split(t, ";")], None, "sweep")
    sweep_parts = tuple(parts) if parts is not None else (("grl",), PARTITION_SETS["all"])
    for p in sweep_parts:
        if set(p) - set(PARTITION_SETS["all"]):
            raise ConfigError(f"[sweep] unknown partitions {p}")

    return ExperimentConfig(
        data=data,
        train=train,
        method=method,
        object_ids=object_ids,
        methods=tuple(methods),
        retrain=_get(sec["unlearn"], "retrain", _bool, True, "unlearn"),
        repeats=max(1, _get(sec["unlearn"], "repeats", int, 1, "unlearn")),
        tasks=tasks,
        attack_method=attack_method,
        sweep_lambdas=lambdas,
        sweep_partitions=sweep_parts,
        out_dir=_get(sec["output"], "dir", str.strip, "runs/reference", "output"),
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


REFERENCE_CONFIG = """\
[data]
n_samples = 200
image_size = 32
seed = 7

[train]
epochs = 200

[request]
object_ids = auto

[unlearn]
methods = all
retrain = yes

[evaluate]
tasks = reconstruction, synthesis

[attack]
method = Obj-MK-PA

[sweep]
lambdas = 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1
partitions = grl; all

[output]
dir = runs/reference
"""
