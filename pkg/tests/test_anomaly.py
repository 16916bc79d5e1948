from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from graphstad.anomaly import (SIGMA_FLOOR, AnomalyReport, ScoreCalibration, calibrate, calibrate_errors,
                               channel_errors, flags, score_and_flag, score_runs, standardize, window_errors,
                               windowed_mae)
from graphstad.geometry import GeometryConfig
from graphstad.tensor import ContractError, Tensor


class HalfModel:
    """Stub reconstructing every map as half of itself, so errors equal x / 2."""

    def __init__(self, window, temporal=True):
        self.arch = SimpleNamespace(use_rnn=temporal, window=window)

    def forward(self, x, training=False):
        return Tensor(x.data * 0.5), None


def test_constant_errors_hit_floor():
    cal = calibrate_errors(np.full((10, 3), 0.2), "isolated")
    np.testing.assert_array_equal(cal.sigma, SIGMA_FLOOR)


def test_population_std_convention():
    cal = calibrate_errors(np.array([[0.0], [2.0]]), "windowed")
    assert cal.sigma.tolist() == [1.0]


def test_std_matches_loop():
    rng = np.random.default_rng(0)
    e = rng.random((50, 4))
    cal = calibrate_errors(e, "isolated")
    for j in range(4):
        mean = sum(e[:, j]) / 50
        ref = (sum((v - mean) ** 2 for v in e[:, j]) / 50) ** 0.5
        assert cal.sigma[j] == pytest.approx(ref)


def test_calibration_needs_two_samples():
    with pytest.raises(ContractError):
        calibrate_errors(np.zeros((1, 3)), "isolated")


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_standardization_scale_consistent(c, seed):
    rng = np.random.default_rng(seed)
    e, sig = rng.random((5, 3)), rng.uniform(0.1, 1, 3)
    a = standardize(e, ScoreCalibration(sig, "isolated"))
    b = standardize(e * c, ScoreCalibration(sig * c, "isolated"))
    np.testing.assert_allclose(a, b, rtol=1e-9)


@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 1000))
def test_flags_monotone_in_alpha(a1, a2, seed):
    lo, hi = sorted((a1, a2))
    s = np.random.default_rng(seed).random(50) * 10
    assert not (flags(s, hi) & ~flags(s, lo)).any()


def test_flags_strict():
    assert flags(np.array([5.0, 5.0001]), 5.0).tolist() == [False, True]


def test_windowed_equals_isolated_for_constant_error():
    e = np.tile(np.array([0.1, 0.4, 0.7]), (5, 1))
    cal_w = ScoreCalibration(np.array([0.2, 0.2, 0.5]), "windowed")
    cal_i = ScoreCalibration(np.array([0.2, 0.2, 0.5]), "isolated")
    mae = np.repeat(windowed_mae(e)[None], 5, axis=0)
    ch = np.arange(3)
    rw = score_and_flag(e, mae, cal_w, 5.0, np.zeros(5), np.arange(5), ch)
    ri = score_and_flag(e, mae, cal_i, 5.0, np.zeros(5), np.arange(5), ch)
    np.testing.assert_allclose(rw.s, ri.s)


def test_channel_errors_shape_check():
    with pytest.raises(ContractError):
        channel_errors(np.zeros(3), np.zeros(4))


def test_window_errors_temporal_and_single_map_agree():
    seq = np.random.default_rng(1).random((12, 2, 2, 1)).astype(np.float32)
    a = window_errors(HalfModel(3), seq, [0, 3, 6], 3)
    b = window_errors(HalfModel(1, temporal=False), seq, [0, 3, 6], 3)
    np.testing.assert_allclose(a, b)
    np.testing.assert_allclose(a[1, 2], seq[5] / 2, rtol=1e-6)


def test_calibrate_windowed_sliding():
    seq = np.random.default_rng(2).random((9, 2, 2, 1)).astype(np.float32)
    cal = calibrate(HalfModel(3), [seq], "windowed", window=3)
    maes = np.stack([(seq[s:s + 3] / 2).mean(axis=0) for s in range(7)])
    np.testing.assert_allclose(cal.sigma, np.maximum(maes.std(axis=0), SIGMA_FLOOR), rtol=1e-5)


def test_score_runs_tiles_windows():
    g = GeometryConfig(n_ieta=2, n_iphi=2, n_depth=1, active_ieta_min=1, active_ieta_max=1,
                       depth_profile=None, rbx_iphi_span=2)
    mask = np.ones(g.shape, bool)
    mask[0, 0, 0] = False
    seq = np.random.default_rng(3).random((11,) + g.shape).astype(np.float32)
    cal = ScoreCalibration(np.full(g.shape, 0.1), "windowed")
    rep = score_runs(HalfModel(5), {7: (np.arange(100, 111), seq)}, cal, 1.0, mask, window=5)
    assert rep.s.shape == (10, 3)
    assert rep.ls.tolist() == list(range(100, 110))
    assert set(rep.runs.tolist()) == {7}
    expect = (seq[5:10] / 2).mean(axis=0).ravel()[rep.channels] / 0.1
    np.testing.assert_allclose(rep.s[7], expect, rtol=1e-5)


def test_report_labels_and_io(tmp_path):
    rep = score_and_flag(np.ones((2, 3)), np.ones((2, 3)), ScoreCalibration(np.full(8, 0.5), "isolated"), 1.0,
                         np.array([1, 1]), np.array([4, 5]), np.array([0, 3, 6]))
    lab = rep.labels({(1, 5, 3)})
    assert lab.sum() == 1 and lab[1, 1]
    with pytest.raises(ContractError):
        rep.labels({(1, 6, 3)})
    rep.save_arrays(tmp_path / "a")
    back = AnomalyReport.load_arrays(tmp_path / "a", 1.0, "isolated")
    np.testing.assert_array_equal(back.s, rep.s)
    np.testing.assert_array_equal(back.flag, rep.flag)


def test_calibration_save_load(tmp_path):
    cal = ScoreCalibration(np.array([0.0, 0.3]), "windowed")
    cal.save(tmp_path / "c")
    back = ScoreCalibration.load(tmp_path / "c")
    assert back.mode == "windowed"
    np.testing.assert_array_equal(back.sigma, cal.sigma)
