import numpy as np
import pytest

from ppmn.config import ConfigError, ModelConfig, RunConfig, TrainConfig, parse_overrides, resolve
from ppmn.data import SyntheticSpec, generate_synthetic, load_directory, translate


def test_layering_order(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nbase_lr=0.05\nseed=3\nmax_iter=10\n")
    cfg = resolve(f, {"max_iter": "7"}, env={"PPMN_SEED": "4"})
    assert cfg.train.base_lr == 0.05
    assert cfg.train.seed == 4
    assert cfg.train.max_iter == 7
    assert resolve(f, {}, env={"PPMN_SEED": "4"}, seed=9).train.seed == 9
    assert resolve(None, {}, env={}).train.seed == 0


def test_unknown_key_and_bad_values_rejected():
    with pytest.raises(ConfigError, match="max_itr"):
        resolve(None, {"max_itr": "5"}, env={})
    with pytest.raises(ConfigError):
        resolve(None, {"variant": "rgb"}, env={})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        parse_overrides(["no_equals_sign"])


def test_to_text_round_trips(tmp_path):
    cfg = RunConfig().with_updates({"sc_widths": "4,4,4,4", "augment": "false", "hnm_mix": "0.25"})
    f = tmp_path / "c.txt"
    f.write_text(cfg.to_text())
    assert resolve(f, env={}) == cfg


def test_positive_share_truncates():
    assert TrainConfig(batch_size=16).n_positives == 8
    assert TrainConfig(batch_size=15, pos_ratio=1, neg_ratio=2).n_positives == 5
    assert TrainConfig(batch_size=7).n_positives == 3


def test_synthetic_is_deterministic_and_two_view():
    a = generate_synthetic(SyntheticSpec(n_identities=4, seed=1))
    b = generate_synthetic(SyntheticSpec(n_identities=4, seed=1))
    assert a.identities == [0, 1, 2, 3]
    for ra, rb in zip(a.records, b.records):
        np.testing.assert_array_equal(ra.image, rb.image)
    img = a.images(0, "A")[0].image
    assert img.shape == (160, 80, 3)
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)


def test_zero_perturbation_views_coincide():
    spec = SyntheticSpec(n_identities=2, seed=0, max_shift=(0, 0), hue_jitter=0.0, brightness_jitter=0.0,
                         blob_scale_jitter=0.0, blob_shift=0, noise=0.0)
    ds = generate_synthetic(spec)
    np.testing.assert_array_equal(ds.images(1, "A")[0].image, ds.images(1, "B")[0].image)


def test_degenerate_specs_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(n_identities=1))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(palette_size=1))


def test_translate_replicates_border():
    img = np.arange(12.0).reshape(4, 3, 1)
    out = translate(img, 1, -1)
    np.testing.assert_array_equal(out[..., 0], [[1, 2, 2], [1, 2, 2], [4, 5, 5], [7, 8, 8]])


def test_split_is_disjoint_and_seeded():
    ds = generate_synthetic(SyntheticSpec(n_identities=10, seed=0))
    tr, te = ds.split(6, seed=3)
    assert len(tr.identities) == 6 and len(te.identities) == 4
    assert not set(tr.identities) & set(te.identities)
    assert ds.split(6, seed=3)[0].identities == tr.identities
    with pytest.raises(ValueError):
        ds.split(10, seed=0)


def test_directory_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_identities=3, seed=5))
    ds.save(tmp_path)
    assert (tmp_path / "0002" / "B_0.png").exists()
    back = load_directory(tmp_path)
    assert back.identities == ds.identities
    np.testing.assert_array_equal(back.images(2, "B")[0].load(), ds.images(2, "B")[0].image)
    with pytest.raises(FileNotFoundError):
        load_directory(tmp_path / "nope")


@pytest.mark.parametrize("variant,lr", [("sc", 0.01), ("ctm", 0.1), ("mc", 0.0001)])
def test_full_scale_presets_parse(variant, lr):
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / f"full_scale_{variant}.txt"
    cfg = resolve(path, env={})
    assert cfg.model.variant == variant
    assert cfg.train.base_lr == lr
