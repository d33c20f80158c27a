import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import small_model_config
from ppmn.autodiff import Parameter
from ppmn.config import TrainConfig
from ppmn.model import PPMN, assemble_mc
from ppmn.params import ParamStore
from ppmn.train import PairSampler, augment, lr_at, mine_hard_negatives, sgd_step, train


def test_lr_examples():
    assert lr_at(0, 100, 0.1) == 0.1
    assert lr_at(75, 100, 0.1) == pytest.approx(0.05, abs=1e-15)
    assert lr_at(100, 100, 0.1) == 0.0
    with pytest.raises(ValueError):
        lr_at(101, 100, 0.1)


@given(i=st.integers(0, 999), base=st.floats(1e-5, 1.0), p=st.floats(0.1, 3.0))
def test_lr_monotone_and_bounded(i, base, p):
    a, b = lr_at(i, 1000, base, p), lr_at(i + 1, 1000, base, p)
    assert 0.0 <= b <= a <= base


def test_sgd_two_steps_closed_form():
    store = ParamStore()
    p = store.add(Parameter("w", np.array([1.0, -2.0])))
    cfg = TrainConfig(momentum=0.9, weight_decay=0.01)
    g1, g2 = np.array([0.5, 0.25]), np.array([-1.0, 2.0])
    t0 = p.data.copy()
    sgd_step(store, 0.1, cfg, {"w": g1})
    v1 = g1 + 0.01 * t0
    t1 = t0 - 0.1 * v1
    sgd_step(store, 0.05, cfg, {"w": g2})
    v2 = 0.9 * v1 + g2 + 0.01 * t1
    np.testing.assert_allclose(p.data, t1 - 0.05 * v2, rtol=0, atol=1e-12)


def test_sgd_skips_frozen_and_requires_grads():
    store = ParamStore()
    a = store.add(Parameter("a", np.ones(2), frozen=True))
    store.add(Parameter("b", np.ones(2)))
    sgd_step(store, 1.0, TrainConfig(), {"b": np.ones(2)})
    np.testing.assert_array_equal(a.data, np.ones(2))
    with pytest.raises(KeyError, match="b"):
        sgd_step(store, 1.0, TrainConfig(), {})


def test_augment_offsets_in_range():
    # a ramp image lets each crop reveal its own shift
    ys, xs = np.mgrid[0:160, 0:80]
    img = np.stack([ys / 200.0, xs / 100.0, np.zeros_like(ys, dtype=float)], axis=-1)
    crops = augment(img, np.random.default_rng(0), n=200)
    seen = set()
    for c in crops:
        dy = int(round(80 / 200.0 * 200 - c[80, 40, 0] * 200))
        dx = int(round(40 - c[80, 40, 1] * 100))
        assert -8 <= dy <= 8 and -4 <= dx <= 4
        seen.add((dy, dx))
    assert {d[0] for d in seen} == set(range(-8, 9))
    assert {d[1] for d in seen} == set(range(-4, 5))


def test_batch_layout(tiny_dataset):
    s = PairSampler(tiny_dataset, np.random.default_rng(0), ("sc",), augment_images=False)
    a, b, labels = s.batch(3, 5)
    assert len(a) == len(b) == 8
    np.testing.assert_array_equal(labels, [1, 1, 1, 0, 0, 0, 0, 0])


def test_hard_negatives_sorted_and_above_pool_mean(tiny_dataset):
    m = PPMN(small_model_config("sc"), seed=0)
    s = PairSampler(tiny_dataset, np.random.default_rng(1), m.channels, augment_images=False)
    pairs, selected, pool = mine_hard_negatives(m, s, 40, 10)
    assert len(pairs) == 10
    assert np.all(np.diff(selected) <= 0)
    assert selected.mean() >= pool.mean()
    np.testing.assert_array_equal(selected, np.sort(pool)[::-1][:10])
    with pytest.raises(ValueError):
        mine_hard_negatives(m, s, 5, 6)


def _cfg(**kw):
    return dataclasses.replace(TrainConfig(max_iter=3, batch_size=4, n_crops=2), **kw)


def test_zero_iterations_leave_model_untouched(tiny_dataset):
    m = PPMN(small_model_config("sc"), seed=0)
    before = m.store.checksum()
    res = train(m, tiny_dataset, _cfg(max_iter=0))
    assert res.trace == []
    assert m.store.checksum() == before


def test_training_is_deterministic(tiny_dataset, tmp_path):
    runs = []
    for k in range(2):
        m = PPMN(small_model_config("sc"), seed=0)
        res = train(m, tiny_dataset, _cfg(hnm=True, hnm_iters=2, hnm_pool_factor=2))
        res.write_trace(tmp_path / f"t{k}.csv")
        runs.append(m.store.checksum())
    assert runs[0] == runs[1]
    assert (tmp_path / "t0.csv").read_bytes() == (tmp_path / "t1.csv").read_bytes()
    assert len((tmp_path / "t0.csv").read_text().splitlines()) == 1 + 3 + 2


def test_frozen_channels_unchanged_by_training(tiny_dataset):
    mc = assemble_mc(PPMN(small_model_config("sc"), 1), PPMN(small_model_config("ctm"), 2))
    frozen = mc.store.checksum("sc.") + mc.store.checksum("ctm.")
    head = mc.store.checksum("head.")
    train(mc, tiny_dataset, _cfg(max_iter=4))
    assert mc.store.checksum("sc.") + mc.store.checksum("ctm.") == frozen
    assert mc.store.checksum("head.") != head


def test_translation_8_4_on_ramp():
    from ppmn.data import translate
    ys, xs = np.mgrid[0:160, 0:80]
    img = np.stack([ys, xs, ys * 80 + xs], axis=-1).astype(float)
    out = translate(img, 8, 4)
    np.testing.assert_array_equal(out[8:, 4:], img[:-8, :-4])
    np.testing.assert_array_equal(translate(img, 0, 0), img)


def test_zero_head_mining_falls_back_to_pool_order(tiny_dataset):
    m = PPMN(small_model_config("sc"), seed=0)
    m.out.weight.assign(np.zeros_like(m.out.weight.data))
    s = PairSampler(tiny_dataset, np.random.default_rng(2), m.channels, augment_images=False)
    state = s.rng.bit_generator.state
    pairs, selected, pool = mine_hard_negatives(m, s, 12, 4)
    assert np.all(pool == 0.5)
    s.rng.bit_generator.state = state
    assert pairs == [s.negative() for _ in range(12)][:4]
