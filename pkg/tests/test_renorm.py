import numpy as np
import pytest

from graphstad.data import DigiOccupancyMap, LumisectionMeta
from graphstad.geometry import GeometryConfig, SegmentationMap
from graphstad.renorm import (RenormError, RenormModel, depth_totals, renorm_summary, renormalize,
                              renormalize_dataset, renormalize_values, train_renorm, train_renorm_dataset)
from graphstad.simlab import SyntheticWorld, WorldConfig, generate_dataset


@pytest.fixture(scope="module")
def world_ds():
    return generate_dataset(SyntheticWorld(GeometryConfig.toy(), WorldConfig(seed=3)))


@pytest.fixture(scope="module")
def fitted(world_ds):
    return train_renorm_dataset(world_ds, "train", seed=0)


def test_depth_totals_counts_active():
    mask = np.zeros((4, 5, 3), dtype=bool)
    mask.reshape(-1)[np.arange(0, 60, 3)[:10]] = True  # ten channels, all at depth 1
    t = depth_totals(np.ones((4, 5, 3)), mask)
    assert t.tolist() == [10.0, 0.0, 0.0]
    assert not depth_totals(np.zeros((4, 5, 3)), mask).any()


def test_depth_totals_conserve_sum():
    rng = np.random.default_rng(0)
    mask = rng.random((6, 4, 3)) < 0.6
    v = rng.random((2, 6, 4, 3))
    np.testing.assert_allclose(depth_totals(v, mask).sum(axis=-1), (v * mask).sum(axis=(1, 2, 3)))


def test_renormalize_arithmetic():
    mask = np.ones((1, 1, 1), dtype=bool)
    out = renormalize_values(np.full((1, 1, 1, 1), 10.0), np.array([[20.0]]), 2.0, mask)
    assert out.item() == 1.0
    assert not renormalize_values(np.zeros((1, 1, 1, 1)), np.array([[20.0]]), 2.0, mask).any()


def test_exact_normalizer_gives_unit_mean():
    rng = np.random.default_rng(1)
    mask = rng.random((4, 6, 3)) < 0.7
    v = rng.random((5, 4, 6, 3)) * 100
    totals = depth_totals(v, mask)
    cpd = mask.sum(axis=(0, 1))
    for d in range(3):
        out = renormalize_values(v, totals, float(cpd[d]), mask)
        per_depth = out[..., d][:, mask[..., d]]
        np.testing.assert_allclose(per_depth.mean(axis=1), 1.0)


def test_low_normalizer_names_depth():
    mask = np.ones((1, 1, 2), dtype=bool)
    with pytest.raises(RenormError, match="depth 2"):
        renormalize_values(np.ones((1, 1, 1, 2)), np.array([[5.0, 0.0]]), 1.0, mask)


def test_fits_linear_world():
    rng = np.random.default_rng(2)
    lumi = rng.uniform(0.1, 0.4, 400)
    events = rng.uniform(500, 2000, 400)
    c = np.array([100.0, 250.0, 40.0])
    totals = lumi[:, None] * c
    model = train_renorm(np.c_[events, lumi], totals, K=1.0, seed=0, max_iters=4000)
    pred = model.predict(np.c_[events, lumi])
    assert np.median(np.abs(pred / totals - 1)) < 0.05


def test_duplicate_inputs_constant_model():
    inputs = np.tile([[1000.0, 0.2]], (20, 1))
    totals = np.tile([[50.0, 70.0]], (20, 1))
    with pytest.warns(RuntimeWarning):
        model = train_renorm(inputs, totals, K=1.0)
    np.testing.assert_allclose(model.predict(inputs[:2]), totals[:2], rtol=1e-6)


def test_scale_covariance(fitted, world_ds):
    m = world_ds[0]
    mask = world_ds.segmentation.active_mask
    a = renormalize(m, fitted, mask).values
    b = renormalize(DigiOccupancyMap(m.values * 2, m.meta), fitted, mask).values
    np.testing.assert_allclose(b, 2 * a, rtol=1e-6)


def test_cv_reduction(fitted, world_ds):
    mask = world_ds.segmentation.active_mask
    rows = world_ds.split_indices("train")
    lumi = world_ds.lumi()[rows]
    assert lumi.max() / lumi.min() >= 3
    s = renorm_summary(depth_totals(world_ds.values[rows], mask),
                       depth_totals(renormalize_dataset(world_ds, fitted)[rows], mask), fitted.active_depths)
    assert s["reduction"] >= 0.5


def test_run_medians_centered(fitted, world_ds):
    mask = world_ds.segmentation.active_mask
    norm = depth_totals(renormalize_dataset(world_ds, fitted), mask).sum(axis=1)
    meds = [np.median(norm[world_ds.run_indices(r, "train")]) for r in world_ds.runs()]
    assert max(meds) / min(meds) <= 1.2 / 0.8
    assert all(abs(m / np.median(meds) - 1) <= 0.2 for m in meds)


def test_save_load_round_trip(fitted, tmp_path):
    fitted.save(tmp_path / "r")
    back = RenormModel.load(tmp_path / "r")
    x = np.array([[1500.0, 0.2], [800.0, 0.1]])
    np.testing.assert_array_equal(back.predict(x), fitted.predict(x))
    assert back.K == fitted.K


def test_default_K_is_mean_channel_count(fitted):
    mask = SegmentationMap.synthetic(GeometryConfig.toy()).active_mask
    cpd = mask.sum(axis=(0, 1))
    assert fitted.K == pytest.approx(cpd[cpd > 0].mean())


def test_meta_validation():
    with pytest.raises(ValueError):
        LumisectionMeta(1, 0, 10.0, 1.0)
