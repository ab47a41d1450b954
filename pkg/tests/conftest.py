import sys

import numpy as np
import pytest

from sgunlearn.scene_graph import ObjectNode, RelationshipTriple, SceneGraph, pad_graph
from sgunlearn.synth import DEFAULT_VOCAB, Dataset, RenderedSample, render_scene


def three_image_dataset() -> Dataset:
    """img1 holds girl-A, img2 holds girl-B, img3 holds boy-C (all training)."""
    specs = [
        [("girl-A", "girl", (0.1, 0.1, 0.5, 0.6)), ("tree-1", "tree", (0.5, 0.3, 0.9, 0.9))],
        [("girl-B", "girl", (0.4, 0.2, 0.9, 0.7)), ("dog-1", "dog", (0.0, 0.5, 0.4, 1.0))],
        [("boy-C", "boy", (0.2, 0.2, 0.7, 0.8)), ("ball-1", "ball", (0.6, 0.6, 0.95, 0.95))],
    ]
    samples = []
    for i, objs in enumerate(specs):
        nodes = tuple(ObjectNode(oid, cat, (), 1000 * i + k, bb) for k, (oid, cat, bb) in enumerate(objs))
        g = pad_graph(SceneGraph(nodes, (RelationshipTriple(nodes[0].id, "left-of", nodes[1].id),)), 10)
        samples.append(RenderedSample(i, render_scene(g, 32, i), g, i, "train"))
    return Dataset(samples, DEFAULT_VOCAB)


@pytest.fixture
def tiny_ds():
    return three_image_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
