import numpy as np
import pytest

from mmea import kgdata
from mmea.kgdata import (
    AlignmentTask, KnowledgeGraph, ModalityFeatures, TaskError, Vocab, degree_sum,
    impute_missing_images, load_task, read_matrix, save_task, write_matrix,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def toy_dir(tmp_path):
    _write(tmp_path / "s_ent.tsv", "a\t0\nb\t1\nc\t2\n")
    _write(tmp_path / "t_ent.tsv", "x\t0\ny\t1\nz\t2\n")
    _write(tmp_path / "s.tsv", "a\tr\tb\nb\tr\tc\n")
    _write(tmp_path / "t.tsv", "x\tr\ty\n")
    _write(tmp_path / "rel.tsv", "r\t0\n")
    write_matrix(tmp_path / "img_s.mmea", np.arange(6, dtype=float).reshape(3, 2))
    write_matrix(tmp_path / "img_t.mmea", np.arange(6, dtype=float).reshape(3, 2) + 1)
    _write(tmp_path / "train.tsv", "0\t0\n")
    _write(tmp_path / "test.tsv", "1\t1\n2\t2\n")
    cfg = {
        "source_entities": "s_ent.tsv", "target_entities": "t_ent.tsv",
        "source_relations": "rel.tsv", "target_relations": "rel.tsv",
        "source_triples": "s.tsv", "target_triples": "t.tsv",
        "image_source": "img_s.mmea", "image_target": "img_t.mmea", "image_dim": "2",
        "train_pivots": "train.tsv", "test_pivots": "test.tsv", "seed": "3",
    }
    kgdata.write_config(tmp_path / "task.cfg", cfg)
    return tmp_path


def test_load_toy_task_full_coverage(toy_dir):
    task = load_task(toy_dir / "task.cfg")
    assert task.source.n_entities == 3 and task.target.n_entities == 3
    assert task.coverage() == {"image": (1.0, 1.0)}
    assert task.train_pivots.tolist() == [[0, 0]]
    np.testing.assert_array_equal(task.source.degree, [1, 2, 1])


def test_partial_image_file_gets_imputed(toy_dir):
    m = np.arange(6, dtype=float).reshape(3, 2)
    write_matrix(toy_dir / "img_s.mmea", m, mask=np.array([True, True, False]))
    task = load_task(toy_dir / "task.cfg")
    fs, _ = task.features["image"]
    assert fs.present.tolist() == [True, True, False]
    assert task.coverage()["image"][0] == pytest.approx(2 / 3)
    np.testing.assert_array_equal(fs.matrix[:2], m[:2])


def test_pivot_out_of_range(toy_dir):
    _write(toy_dir / "train.tsv", "0\t7\n")
    with pytest.raises(TaskError, match="pivot id out of range"):
        load_task(toy_dir / "task.cfg")


def test_duplicate_pivot_entity(toy_dir):
    _write(toy_dir / "test.tsv", "1\t1\n1\t2\n")
    with pytest.raises(TaskError, match="duplicate pivot entity"):
        load_task(toy_dir / "task.cfg")


def test_declared_width_mismatch(toy_dir):
    cfg = kgdata.read_config(toy_dir / "task.cfg")
    cfg["image_dim"] = "5"
    kgdata.write_config(toy_dir / "task.cfg", cfg)
    with pytest.raises(TaskError, match="declared width"):
        load_task(toy_dir / "task.cfg")


def test_missing_file_named(toy_dir):
    (toy_dir / "s.tsv").unlink()
    with pytest.raises(TaskError, match="s.tsv"):
        load_task(toy_dir / "task.cfg")


def test_malformed_triples(toy_dir):
    _write(toy_dir / "s.tsv", "a\tb\n")
    with pytest.raises(TaskError, match="expected head"):
        load_task(toy_dir / "task.cfg")


def test_tsv_feature_fallback(tmp_path):
    _write(tmp_path / "f.tsv", "1\t2\n3.5\t4\n")
    m, mask = read_matrix(tmp_path / "f.tsv")
    np.testing.assert_array_equal(m, [[1, 2], [3.5, 4]])
    assert mask is None


def test_binary_header(tmp_path):
    write_matrix(tmp_path / "m.mmea", np.ones((2, 3)))
    raw = (tmp_path / "m.mmea").read_bytes()
    assert raw[:4] == b"MMEA"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 2, 3]
    assert len(raw) == 16 + 4 * 6


def test_imputation_statistics():
    f = ModalityFeatures("image", [[1, 1], [3, 3], [0, 0]], [True, True, False])
    out = impute_missing_images(f, 7)
    expected = np.array([2.0, 2.0]) + np.array([1.0, 1.0]) * np.random.default_rng(7).standard_normal((1, 2))
    np.testing.assert_allclose(out.matrix[2:], expected)
    np.testing.assert_array_equal(out.matrix[:2], [[1, 1], [3, 3]])


def test_imputation_noop_and_degenerate():
    full = ModalityFeatures("image", [[1, 2], [3, 4]], [True, True])
    np.testing.assert_array_equal(impute_missing_images(full, 0).matrix, full.matrix)
    same = ModalityFeatures("image", [[5, 6], [5, 6], [0, 0]], [True, True, False])
    np.testing.assert_array_equal(impute_missing_images(same, 0).matrix[2], [5, 6])


def test_imputation_reproducible_and_seed_sensitive(rng):
    m = rng.normal(size=(6, 3))
    f = ModalityFeatures("image", m, [True, True, True, False, True, False])
    a, b, c = impute_missing_images(f, 1), impute_missing_images(f, 1), impute_missing_images(f, 2)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert not np.allclose(a.matrix[~f.present], c.matrix[~f.present])
    np.testing.assert_array_equal(a.matrix[f.present], c.matrix[f.present])


def test_imputation_needs_present_rows():
    with pytest.raises(TaskError):
        impute_missing_images(ModalityFeatures("image", [[1.0]], [False]), 0)


def _graph(n, triples):
    return KnowledgeGraph(Vocab.range(n), Vocab.range(1), triples)


def test_degree_sum():
    s = _graph(4, [(0, 0, 1), (0, 0, 2), (3, 0, 0)])
    t = _graph(4, [(1, 0, 2), (1, 0, 3)])
    task = AlignmentTask(s, t, {}, [], [])
    assert degree_sum(task, (0, 1)) == 5
    assert degree_sum(AlignmentTask(_graph(2, []), _graph(2, []), {}, [], []), (0, 0)) == 0
    with pytest.raises(TaskError):
        degree_sum(task, (9, 0))


def test_degree_sum_symmetric_under_swap():
    g1 = _graph(3, [(0, 0, 1), (1, 0, 2)])
    g2 = _graph(3, [(0, 0, 1)])
    a = AlignmentTask(g1, g2, {}, [], [])
    b = AlignmentTask(g2, g1, {}, [], [])
    assert degree_sum(a, (1, 0)) == degree_sum(b, (0, 1))


def test_degree_invariant(task20):
    for kg in (task20.source, task20.target):
        assert kg.degree.sum() == 2 * len(kg.triples)


def test_train_test_overlap_rejected():
    g = _graph(3, [])
    with pytest.raises(TaskError, match="overlap"):
        AlignmentTask(g, g, {}, [(0, 0)], [(0, 0)])


def test_save_load_roundtrip(task20, tmp_path):
    path = save_task(task20, tmp_path / "t")
    back = load_task(path)
    for m, (fs, ft) in task20.features.items():
        bs, bt = back.features[m]
        np.testing.assert_array_equal(bs.matrix, fs.matrix.astype(np.float32))
        np.testing.assert_array_equal(bt.matrix, ft.matrix.astype(np.float32))
        np.testing.assert_array_equal(bs.present, fs.present)
    np.testing.assert_array_equal(back.source.triples, task20.source.triples)
    np.testing.assert_array_equal(back.test_pivots, task20.test_pivots)


def test_coverage_matches_mask(tmp_path):
    from tests.conftest import tiny_task
    task = tiny_task(30, image_coverage=0.6)
    back = load_task(save_task(task, tmp_path))
    for m, (cs, ct) in back.coverage().items():
        fs, ft = back.features[m]
        assert cs == fs.present.sum() / len(fs.present)
        assert ct == ft.present.sum() / len(ft.present)


def test_relation_count_helper():
    g = KnowledgeGraph(Vocab.range(3), Vocab.range(2), [(0, 1, 1), (0, 1, 2), (1, 0, 2)])
    feats = kgdata.relation_count_features(g, 1)
    np.testing.assert_array_equal(feats, [[2], [1], [1]])
    feats = kgdata.relation_count_features(g, 2)
    np.testing.assert_array_equal(feats, [[2, 0], [1, 1], [1, 1]])


def test_attribute_count_helper():
    rows = [(0, "born", "1900"), (0, "name", "x"), (1, "name", "y")]
    np.testing.assert_array_equal(kgdata.attribute_count_features(rows, 3, 2),
                                  [[1, 1], [1, 0], [0, 0]])


def test_relation_auto_in_manifest(toy_dir):
    cfg = kgdata.read_config(toy_dir / "task.cfg")
    cfg.update({"relation_source": "auto", "relation_target": "auto", "relation_dim": "1"})
    kgdata.write_config(toy_dir / "task.cfg", cfg)
    task = load_task(toy_dir / "task.cfg")
    np.testing.assert_array_equal(task.features["relation"][0].matrix[:, 0], [1, 2, 1])
