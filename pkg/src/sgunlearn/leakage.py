"""Indirect leakage probes: query the unlearned model with a minimally edited graph.

fuzzy      relabel the forgotten object with its generalisation ("man" -> "person")
neighbor   relabel a node two hops away from it (related, not directly linked)
singleton  relabel an isolated node elsewhere in the scene

Recovery is the SSIM between the forgotten object's ROI in the synthesized
image and the same ROI of the ground-truth render.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NotApplicable
from .metrics import extract_roi_resized, ssim
from .model import Prepared, SG2IGenerator, generate, prepare
from .scene_graph import SceneGraph, mutate_label
from .synth import Dataset, person_like

KINDS = ("fuzzy", "neighbor", "singleton")
TAU = 0.05
CSV_HEADER = "attack,applicable,recovery_unl,recovery_unl_unattacked,recovery_orig,verdict"


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target_object_id: str
    generalization_map: tuple = ()  # (label, general label) pairs; empty -> vocabulary map
    candidates: tuple = ()  # replacement labels for neighbor/singleton; empty -> vocabulary

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")


def _isolated(graph: SceneGraph, exclude: str) -> list[str]:
    linked = {e.subject_id for e in graph.edges} | {e.object_id for e in graph.edges}
    return [n.id for n in graph.objects if n.id not in linked and n.id != exclude]


def _replacement(current: str, avoid: str, pool: Sequence[str]) -> str:
    for c in pool:
        if c != current and c != avoid:
            return c
    raise NotApplicable("no replacement label in the candidate pool")


def attack_site(graph: SceneGraph, spec: AttackSpec, gmap: dict) -> str:
    """Id of the node the attack relabels; NotApplicable when there is none."""
    target = graph.node(spec.target_object_id)
    if spec.kind == "fuzzy":
        if target.category not in gmap:
            raise NotApplicable(f"fuzzy: no generalisation for {target.category!r}")
        return target.id
    if spec.kind == "neighbor":
        dist = graph.distances_from(target.id)
        two_hop = [n.id for n in graph.objects if dist.get(n.id) == 2]
        if not two_hop:
            raise NotApplicable("neighbor: no node at graph distance 2 from the target")
        return two_hop[0]
    iso = _isolated(graph, target.id)
    if not iso:
        raise NotApplicable("singleton: no isolated node besides the target")
    return iso[0]


def build_attack_graph(graph: SceneGraph, spec: AttackSpec, vocab) -> SceneGraph:
    gmap = dict(spec.generalization_map) if spec.generalization_map else dict(vocab.generalization_map)
    site = attack_site(graph, spec, gmap)
    node = graph.node(site)
    if spec.kind == "fuzzy":
        new = gmap[node.category]
    else:
        pool = spec.candidates or vocab.categories
        new = _replacement(node.category, graph.node(spec.target_object_id).category, pool)
    return mutate_label(graph, site, new, vocab)


def default_specs(object_ids) -> list[AttackSpec]:
    return [AttackSpec(k, o) for o in sorted(object_ids) for k in KINDS]


def recovery(output: np.ndarray, truth: np.ndarray, graph: SceneGraph, object_id: str) -> float:
    node = graph.node(object_id)
    return ssim(extract_roi_resized(output, node), extract_roi_resized(np.asarray(truth) / 255.0, node))


@dataclass
class AttackRow:
    attack: str
    target: str
    applicable: bool
    recovery_unl: float = float("nan")
    recovery_unl_unattacked: float = float("nan")
    recovery_orig: float = float("nan")
    verdict: str = "n/a"
    reason: str = ""

    def csv_row(self) -> str:
        def f(v):
            return "nan" if v != v else repr(float(v))

        return ",".join(
            [self.attack, "1" if self.applicable else "0", f(self.recovery_unl), f(self.recovery_unl_unattacked), f(self.recovery_orig), self.verdict]
        )


@dataclass
class LeakageReport:
    rows: list = field(default_factory=list)
    verdict: str = "VACUOUS"
    images: dict = field(default_factory=dict)  # name -> [0,1] image

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(CSV_HEADER + "\n")
        for r in self.rows:
            out.write(r.csv_row() + "\n")
        return out.getvalue()


def run_leakage_test(
    model_unl: SG2IGenerator,
    model_orig: SG2IGenerator,
    ds: Dataset,
    specs: Sequence[AttackSpec],
    tau: float = TAU,
) -> LeakageReport:
    """Synthesize every applicable attacked graph with both models and score recovery.

    ROBUST iff for every applicable attack the unlearned model recovers the
    object no better than on the unattacked graph, up to ``tau``.  Identical
    models give a CONTROL verdict; no specs give VACUOUS.
    """
    report = LeakageReport()
    if not specs:
        return report
    control = model_unl.params.equal(model_orig.params)
    cfg = model_unl.cfg
    applicable = []
    for spec in specs:
        i, _ = ds.locate(spec.target_object_id)
        s = ds.samples[i]
        try:
            g_att = build_attack_graph(s.graph, spec, ds.vocab)
        except NotApplicable as e:
            report.rows.append(AttackRow(spec.kind, spec.target_object_id, False, reason=str(e)))
            continue
        applicable.append((spec, s, g_att))
    blank = np.zeros((cfg.image_size, cfg.image_size, 3))
    for spec, s, g_att in applicable:
        preps: list[Prepared] = [prepare(s.index, g_att, blank, ds.vocab, cfg), prepare(s.index, s.graph, blank, ds.vocab, cfg)]
        att_u, plain_u = generate(model_unl, preps, "synthesis")
        att_o = generate(model_orig, preps[:1], "synthesis")[0]
        oid = spec.target_object_id
        row = AttackRow(
            spec.kind,
            oid,
            True,
            recovery(att_u, s.image, s.graph, oid),
            recovery(plain_u, s.image, s.graph, oid),
            recovery(att_o, s.image, s.graph, oid),
        )
        if control:
            row.verdict = "CONTROL"
        else:
            row.verdict = "ROBUST" if row.recovery_unl <= row.recovery_unl_unattacked + tau else "LEAK"
        report.rows.append(row)
        report.images[f"{spec.kind}_{oid}_unl"] = att_u
        report.images[f"{spec.kind}_{oid}_orig"] = att_o
    scored = [r for r in report.rows if r.applicable]
    if not scored:
        report.verdict = "VACUOUS"
    elif control:
        report.verdict = "CONTROL"
    else:
        report.verdict = "ROBUST" if all(r.verdict == "ROBUST" for r in scored) else "NOT_ROBUST"
    return report


def attack_ready(ds: Dataset, object_id: str) -> bool:
    g = ds.samples[ds.locate(object_id)[0]].graph
    gmap = dict(ds.vocab.generalization_map)
    for kind in KINDS:
        try:
            attack_site(g, AttackSpec(kind, object_id), gmap)
        except NotApplicable:
            return False
    return True


def auto_target(ds: Dataset, preferred: str = "man") -> str:
    """Deterministic default request: a person-like training object open to all
    three attacks whose category also appears in other samples; ``preferred``
    category first."""
    train = ds.train_indices
    counts: dict[str, int] = {}
    for i in train:
        for c in {n.category for n in ds.samples[i].graph.objects}:
            counts[c] = counts.get(c, 0) + 1
    cands = []
    for i in train:
        for n in ds.samples[i].graph.objects:
            if person_like(n.category) and counts[n.category] > 1 and attack_ready(ds, n.id):
                cands.append((n.category != preferred, i, n.id))
    if not cands:
        raise NotApplicable("no training object admits all three attacks")
    return min(cands)[2]
