import numpy as np
import pytest

from sgunlearn.errors import ConfigError
from sgunlearn.imageops import crop
from sgunlearn.scene_graph import ObjectNode, SceneGraph, pad_graph, roi_of, validate_graph
from sgunlearn.synth import (
    DEFAULT_VOCAB,
    PERSON_LIKE,
    DatasetConfig,
    background,
    generate_dataset,
    generate_sample,
    identity_key_for,
    load_dataset,
    manifest_bytes,
    predicate_holds,
    render_scene,
    rendered_category,
    write_dataset,
)


def girl(i, key, bbox=(0.2, 0.2, 0.8, 0.8)):
    return ObjectNode(f"o{i}", "girl", (), key, bbox)


def test_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(image_size=48).validate()
    with pytest.raises(ConfigError):
        DatasetConfig(objects_per_scene=(3, 11)).validate()
    with pytest.raises(ConfigError):
        generate_dataset(DatasetConfig(n_samples=0))
    with pytest.raises(ConfigError):
        DatasetConfig(category_weights={c: 1.0 for c in ("tree", "car")}).validate()


def test_same_seed_byte_identical_manifest(tmp_path):
    cfg = DatasetConfig(n_samples=12, seed=7)
    _, h1 = write_dataset(generate_dataset(cfg), tmp_path / "a")
    _, h2 = write_dataset(generate_dataset(cfg), tmp_path / "b")
    assert h1 == h2
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    _, h3 = write_dataset(generate_dataset(DatasetConfig(n_samples=12, seed=8)), tmp_path / "c")
    assert h3 != h1


def test_sample_depends_only_on_seed_and_index():
    a = generate_dataset(DatasetConfig(n_samples=20, seed=3)).samples[5]
    b = generate_sample(DatasetConfig(n_samples=20, seed=3), 5)
    assert np.array_equal(a.image, b.image) and a.graph == b.graph


@pytest.fixture(scope="module")
def big():
    return generate_dataset(DatasetConfig(n_samples=1000, seed=11))


def test_person_like_in_every_sample(big):
    assert len(big) == 1000
    for s in big.samples:
        assert any(n.category in PERSON_LIKE for n in s.graph.objects)


def test_relations_geometrically_true(big):
    n_left = 0
    for s in big.samples:
        validate_graph(s.graph, big.vocab)
        size = s.image.shape[0]
        for e in s.graph.edges:
            a, b = s.graph.node(e.subject_id), s.graph.node(e.object_id)
            assert predicate_holds(a, e.predicate, b)
            if e.predicate == "left-of":
                n_left += 1
                assert a.center[0] * size < b.center[0] * size
    assert n_left > 0


def test_split_is_90_10(big):
    assert len(big.train_indices) == 900 and big.eval_indices == list(range(900, 1000))


def test_footprint_within_roi():
    cfg = DatasetConfig(n_samples=30, seed=5)
    ds = generate_dataset(cfg)
    for s in ds.samples:
        bg = np.clip(np.round(background(cfg.image_size, s.seed) * 255), 0, 255).astype(np.uint8)
        inside = np.zeros(s.image.shape[:2], bool)
        for n in s.graph.objects:
            x0, y0, x1, y1 = roi_of(n, cfg.image_size, cfg.image_size)
            inside[y0:y1, x0:x1] = True
        assert np.array_equal(s.image[~inside], bg[~inside])


def test_empty_graph_is_background():
    g = pad_graph(SceneGraph(()), 10)
    img = render_scene(g, 32, 123)
    expect = np.clip(np.round(background(32, 123) * 255), 0, 255).astype(np.uint8)
    assert np.array_equal(img, expect)


def test_render_deterministic():
    g = pad_graph(SceneGraph((girl(1, 5),)), 10)
    assert np.array_equal(render_scene(g, 32, 9), render_scene(g, 32, 9))


def test_two_girl_identities_differ():
    ka, kb = identity_key_for("girl", 0), identity_key_for("girl", 1)
    a = render_scene(pad_graph(SceneGraph((girl(1, ka),)), 10), 32, 1)
    b = render_scene(pad_graph(SceneGraph((girl(1, kb),)), 10), 32, 1)
    roi = roi_of(girl(1, ka), 32, 32)
    assert np.mean(np.abs(crop(a, roi).astype(float) - crop(b, roi).astype(float))) > 0


def test_identity_separability():
    node = girl(1, 0)
    roi = roi_of(node, 32, 32)
    keys = [identity_key_for("girl", k) for k in range(4)]
    renders = {
        k: [crop(render_scene(pad_graph(SceneGraph((girl(1, k),)), 10), 32, seed), roi).astype(float) for seed in range(25)]
        for k in keys
    }  # 4 identities x 25 backgrounds = 100 renders
    intra, inter = [], []
    for i, ka in enumerate(keys):
        ra = renders[ka]
        intra += [np.mean(np.abs(ra[s] - ra[t])) for s in range(25) for t in range(s + 1, 25)]
        for kb in keys[i + 1 :]:
            rb = renders[kb]
            inter += [np.mean(np.abs(ra[s] - rb[t])) for s in range(25) for t in range(25)]
    assert np.mean(inter) > np.mean(intra)


def test_general_label_renders_as_a_specific_label():
    gmap = DEFAULT_VOCAB.generalization_map
    for key in range(20):
        r = rendered_category("person", key)
        assert r in gmap and r not in set(gmap.values())
    assert rendered_category("tree", 3) == "tree"


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(DatasetConfig(n_samples=8, seed=2))
    manifest, _ = write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.image, b.image) and a.graph == b.graph and a.split == b.split
    assert back.config == ds.config and back.vocab == ds.vocab
    assert (tmp_path / "manifest.json").read_bytes() == manifest_bytes(manifest)
    assert (tmp_path / "images/s0000.ppm").read_bytes()[:2] == b"P6"
