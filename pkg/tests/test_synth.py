import numpy as np
import pytest

from mmea.seeding import induce_visual_pivots
from mmea.alignloss import cosine_matrix
from mmea.synth import SynthConfig, make_task


def test_default_shape_and_split():
    task, perm = make_task(SynthConfig())
    assert task.source.n_entities == task.target.n_entities == 200
    assert len(task.source.triples) == 600
    assert len(task.train_pivots) == 60 and len(task.test_pivots) == 140
    assert sorted(perm.tolist()) == list(range(200))
    gold = task.gold_pairs()
    np.testing.assert_array_equal(perm[gold[:, 0]], gold[:, 1])


def test_target_is_permuted_copy():
    task, perm = make_task(SynthConfig(n_entities=50, n_triples=100, edge_dropout=0.0))
    src = {(perm[h], r, perm[t]) for h, r, t in task.source.triples.tolist()}
    assert src == set(map(tuple, task.target.triples.tolist()))


def test_default_is_long_tailed():
    task, _ = make_task(SynthConfig())
    deg = task.source.degree
    assert deg.max() >= 5 * np.median(deg)


def test_noiseless_images_recover_permutation():
    task, perm = make_task(SynthConfig(noise={"image": 0.0}, n_entities=60, n_triples=120))
    fs, ft = task.features["image"]
    piv = induce_visual_pivots(cosine_matrix(fs.matrix, ft.matrix), 60)
    assert all(perm[i] == j for i, j, _ in piv)


def test_full_dropout_leaves_no_edges():
    task, _ = make_task(SynthConfig(edge_dropout=1.0, n_entities=30, n_triples=40))
    assert len(task.target.triples) == 0
    task.validate()


def test_partial_image_coverage():
    task, _ = make_task(SynthConfig(image_coverage=0.5, n_entities=80, n_triples=150))
    cs, ct = task.coverage()["image"]
    assert 0.3 < cs < 0.7 and 0.3 < ct < 0.7
    assert np.all(np.isfinite(task.features["image"][0].matrix))


def test_same_seed_same_task():
    a, _ = make_task(SynthConfig(seed=3))
    b, _ = make_task(SynthConfig(seed=3))
    np.testing.assert_array_equal(a.source.triples, b.source.triples)
    np.testing.assert_array_equal(a.features["image"][1].matrix, b.features["image"][1].matrix)


@pytest.mark.parametrize("kw", [dict(n_entities=1), dict(n_triples=10**6), dict(edge_dropout=1.5),
                                dict(image_coverage=0.0), dict(seed_fraction=1.0),
                                dict(noise={"image": -1.0})])
def test_invalid_parameters(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_from_dict():
    cfg = SynthConfig.from_dict({"n_entities": "40", "noise_image": "0.1", "dim_image": "9",
                                 "noise_surface": "none", "edge_dropout": "0.2"})
    assert cfg.n_entities == 40 and cfg.noise["image"] == 0.1 and cfg.dims["image"] == 9
    assert "surface" not in cfg.noise and cfg.edge_dropout == 0.2
