import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmea.kgdata import TaskError
from mmea.numcore import NonFiniteError, Param
from mmea.seeding import ILConfig
from mmea.trainer import (
    AdamState, TrainConfig, ablate, adamw_step, evaluate_state, fused_similarity,
    load_checkpoint, save_checkpoint, train, visual_pivots,
)
from tests.conftest import tiny_task

SMALL = dict(gcn_dims=(8, 8, 4), out_dims={"image": 4, "relation": 4, "attribute": 4, "surface": 4},
             structure_lr=5e-2, relu_last=False)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, "base_epochs": 6, "il_epochs": 4,
                          "il": ILConfig(K_e=2, K_s=2), **kw})


def adamw_oracle(w, g, m, v, t, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    w = w * (1 - lr * wd)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    return w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps), m, v


def test_adamw_first_step_is_signed_lr():
    p = Param(np.array([[1.0, -2.0, 0.5]]))
    g = np.array([[0.3, -4.0, 0.0]])
    adamw_step([p], [g], AdamState.zeros_like([p]), lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(p.value, [[0.9, -1.9, 0.5]], atol=1e-7)


def test_adamw_matches_oracle_over_steps(rng):
    p = Param(rng.standard_normal((3, 2)))
    w, m, v = p.value.copy(), np.zeros((3, 2)), np.zeros((3, 2))
    state = AdamState.zeros_like([p])
    for t in range(1, 6):
        g = rng.standard_normal((3, 2))
        adamw_step([p], [g], state, lr=1e-2, weight_decay=0.1)
        w, m, v = adamw_oracle(w, g, m, v, t, 1e-2, 0.1)
        np.testing.assert_allclose(p.value, w, rtol=1e-12, atol=1e-14)
    assert state.step == 5


def test_adamw_decay_is_decoupled():
    p = Param(np.full((1, 2), 2.0))
    adamw_step([p], [np.zeros((1, 2))], AdamState.zeros_like([p]), lr=0.5, weight_decay=0.2)
    np.testing.assert_allclose(p.value, 2.0 * 0.9)


def test_adamw_per_param_rates():
    a, b = Param(np.zeros((1, 1))), Param(np.zeros((1, 1)))
    adamw_step([a, b], [np.ones((1, 1))] * 2, AdamState.zeros_like([a, b]), lr=[0.1, 0.01])
    assert a.value[0, 0] == pytest.approx(-0.1) and b.value[0, 0] == pytest.approx(-0.01)


def test_adamw_rejects_bad_grads():
    p = Param(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros((2, 1))], AdamState.zeros_like([p]))
    with pytest.raises(NonFiniteError):
        adamw_step([p], [np.array([[np.nan, 0.0]])], AdamState.zeros_like([p]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-4, 1e-1), st.floats(0, 0.5))
def test_adamw_first_step_bounded(g, lr, wd):
    p = Param(np.array([[1.0]]))
    adamw_step([p], [np.array([[g]])], AdamState.zeros_like([p]), lr=lr, weight_decay=wd)
    assert abs(p.value[0, 0] - (1 - lr * wd)) <= lr + 1e-12


def test_zero_epochs_returns_initial_state():
    task = tiny_task(12)
    st_ = train(task, small_cfg(base_epochs=0, il_epochs=0))
    assert st_.epoch == 0 and st_.history == [] and st_.moments.step == 0
    np.testing.assert_array_equal(st_.params.modality_logits.value, 0.0)


def test_history_and_determinism():
    task = tiny_task(16)
    a = train(task, small_cfg())
    b = train(task, small_cfg())
    assert a.history_csv() == b.history_csv()
    assert len(a.history) == 10 and [r.epoch for r in a.history] == list(range(10))
    header = a.history_csv().splitlines()[0].split(",")
    assert header[:3] == ["epoch", "loss", "pivot_count"] and header[3] == "w_structure"
    for r in a.history:
        assert np.isfinite(r.loss) and sum(r.weights) == pytest.approx(1.0)
    c = train(task, small_cfg(rng_seed=1))
    assert c.history_csv() != a.history_csv()


def test_permanent_pivots_only_grow():
    task = tiny_task(20)
    seen = []
    train(task, small_cfg(il_epochs=10, il=ILConfig(K_e=1, K_s=1)),
          callback=lambda s, r: seen.append(list(s.ledger.permanent)))
    for prev, cur in zip(seen, seen[1:]):
        assert cur[:len(prev)] == prev
    assert [r for r in seen[-1][:len(task.train_pivots)]] == [tuple(p) for p in task.train_pivots.tolist()]


def test_no_proposals_before_il_phase():
    task = tiny_task(20)
    rounds = []
    train(task, small_cfg(base_epochs=5, il_epochs=0, il=ILConfig(K_e=1, K_s=1)),
          callback=lambda s, r: rounds.append(s.ledger.round_counter))
    assert rounds == [0] * 5


def test_base_loss_decreases():
    task = tiny_task(30)
    st_ = train(task, small_cfg(base_epochs=60, il_epochs=0))
    losses = np.array([r.loss for r in st_.history])
    assert losses[-10:].mean() < losses[:10].mean()


def test_missing_pivots_errors():
    task = tiny_task(10)
    task.train_pivots = task.train_pivots[:0]
    with pytest.raises(TaskError):
        train(task, small_cfg())


def test_unsupervised_uses_image_pivots():
    task = tiny_task(20, noise={"image": 0.0, "relation": 0.3})
    cfg = small_cfg(unsupervised=True, visual_pivot_count=5)
    piv = visual_pivots(task, cfg)
    gold = set(map(tuple, task.gold_pairs().tolist()))
    assert len(piv) == 5 and all((s, t) in gold for s, t, _ in piv)
    st_ = train(task, cfg)
    assert st_.history[0].pivot_count == 5


def test_unsupervised_needs_images():
    task = tiny_task(10).without(["image"])
    with pytest.raises(TaskError):
        train(task, small_cfg(unsupervised=True, visual_pivot_count=3))


def test_ablate_removes_modality():
    task = tiny_task(16)
    rep, st_ = ablate(task, small_cfg(), ["image"])
    assert "image" not in st_.params.modalities and 0 <= rep.hits_at_1 <= 1
    with pytest.raises(ValueError):
        ablate(task, small_cfg(), ["structure", *task.modalities])


def test_checkpoint_roundtrip(tmp_path):
    task = tiny_task(16)
    st_ = train(task, small_cfg())
    save_checkpoint(st_, tmp_path)
    back = load_checkpoint(tmp_path, task, small_cfg())
    assert back.epoch == st_.epoch and back.ledger.permanent == st_.ledger.permanent
    np.testing.assert_allclose(fused_similarity(back), fused_similarity(st_), atol=1e-5)
    assert back.moments.step == st_.moments.step
    assert abs(evaluate_state(back, task).hits_at_1 - evaluate_state(st_, task).hits_at_1) <= 1 / 8
