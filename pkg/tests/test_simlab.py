import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphstad.geometry import GeometryConfig
from graphstad.simlab import (GroundTruth, InjectionError, InjectionSpec, SweepRow, SyntheticWorld, WorldConfig,
                              ablation_rows, confusion_at, draw_targets, evaluate, generate_dataset, inject,
                              median_fpr, write_median_csv, write_sweep_csv)

SMALL = WorldConfig(n_runs=2, train_ls=20, test_ls=20)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SyntheticWorld(GeometryConfig.toy(), SMALL))


# --- world ----------------------------------------------------------------

def test_channel_mean_matches_expectation():
    cfg = WorldConfig(n_runs=1, train_ls=500, test_ls=0, ls_gain_sigma=0.0, seed=4)
    world = SyntheticWorld(GeometryConfig.toy(), cfg)
    ds = generate_dataset(world)
    rng = np.random.default_rng([cfg.seed, 1, 0])
    events, lumi = world.schedule(0, rng)
    gains = world.rbx_gains(cfg.ls_per_run, rng)
    lam = world.expected(events, lumi, gains)
    c = np.unravel_index(int(np.argmax(world.baseline)), world.geometry.shape)
    sample = ds.values[(slice(None),) + c].mean()
    assert abs(sample / lam[(slice(None),) + c].mean() - 1) < 0.05


def test_linear_response_doubles():
    world = SyntheticWorld(GeometryConfig.toy(), WorldConfig(lumi_exp=1.0, events_exp=0.0))
    ev, lumi = np.array([1000.0]), np.array([0.1])
    a = world.expected(ev, lumi).sum()
    assert world.expected(ev, 2 * lumi).sum() == pytest.approx(2 * a)


def test_seed_determinism():
    g = GeometryConfig.toy()
    a = generate_dataset(SyntheticWorld(g, SMALL))
    b = generate_dataset(SyntheticWorld(g, SMALL))
    c = generate_dataset(SyntheticWorld(g, WorldConfig(n_runs=2, train_ls=20, test_ls=20, seed=1)))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()


def test_luminosity_spread():
    ds = generate_dataset(SyntheticWorld(GeometryConfig.toy(), WorldConfig()))
    rows = ds.split_indices("train")
    lumi = ds.lumi()[rows]
    assert lumi.max() / lumi.min() >= 3
    assert not ds.values[:, ~ds.segmentation.active_mask].any()


# --- injection ------------------------------------------------------------

def _spec(ds, kind, factor, persistence="window"):
    t, ch = draw_targets(ds, 5, 0.25, 0.04, seed=0)
    return InjectionSpec(kind, factor, t, ch, persistence, 5)


def test_dead_hot_degraded_values():
    from graphstad.data import LumisectionMeta, MapDataset
    g = GeometryConfig(n_ieta=2, n_iphi=2, n_depth=1, active_ieta_min=1, active_ieta_max=1,
                       depth_profile=None, rbx_iphi_span=2)
    base = np.array([37.0, 100.0, 100.0, 5.0], dtype=np.float32).reshape(1, 2, 2, 1)
    ds = MapDataset(np.concatenate([base, base]), [LumisectionMeta(1, 1, 1.0, 1.0), LumisectionMeta(1, 2, 1.0, 1.0)],
                    g, train_ls=1)
    for kind, f, ch, want in [("dead", 0.0, 0, 0.0), ("hot", 2.0, 1, 200.0), ("degraded", 0.2, 2, 20.0)]:
        out, truth = inject(ds, InjectionSpec(kind, f, [(1, 2)], [ch], "isolated"))
        assert out.values[1].ravel()[ch] == pytest.approx(want)
        assert len(truth) == 1


def test_non_target_cells_untouched(small_ds):
    spec = _spec(small_ds, "hot", 2.0)
    out, truth = inject(small_ds, spec)
    changed = np.zeros(small_ds.values.shape, bool).reshape(len(small_ds), -1)
    row = {(m.run_id, m.ls): i for i, m in enumerate(small_ds.metas)}
    for r, l, c, _ in truth.rows:
        changed[row[(r, l)], c] = True
    a = small_ds.values.reshape(len(small_ds), -1)
    b = out.values.reshape(len(out), -1)
    assert a[~changed].tobytes() == b[~changed].tobytes()
    assert small_ds.values is not out.values


def test_injection_density_about_one_percent(small_ds):
    _, truth = inject(small_ds, _spec(small_ds, "dead", 0.0))
    n_test_cells = len(small_ds.split_indices("test")) * small_ds.segmentation.active_mask.sum()
    assert 0.005 <= len(truth) / n_test_cells <= 0.02


def test_targets_align_with_tiling(small_ds):
    t, _ = draw_targets(small_ds, 5)
    assert all((ls - small_ds.train_ls - 1) % 5 == 0 for _, ls in t)


def test_injection_errors(small_ds):
    inactive = int(np.flatnonzero(~small_ds.segmentation.active_mask.ravel())[0])
    with pytest.raises(InjectionError):
        inject(small_ds, InjectionSpec("dead", 0.0, [(1000, 25)], [inactive]))
    active = int(small_ds.segmentation.active_indices()[0])
    with pytest.raises(InjectionError):
        inject(small_ds, InjectionSpec("dead", 0.0, [(1000, 3)], [active]))
    with pytest.raises(InjectionError):
        InjectionSpec("frozen", 0.0, [], [])


def test_ground_truth_csv_round_trip(small_ds, tmp_path):
    _, truth = inject(small_ds, _spec(small_ds, "degraded", 0.4))
    truth.write_csv(tmp_path / "t.csv")
    back = GroundTruth.read_csv(tmp_path / "t.csv", small_ds.geometry)
    assert back.rows == truth.rows


# --- evaluation -----------------------------------------------------------

def _brute(scores, labels, anchor):
    """Scan every distinct threshold from the top; count cells one by one at the first that reaches the anchor."""
    n_pos = int(labels.sum())
    for thr in sorted(set(scores[~np.isnan(scores)].tolist()), reverse=True):
        tp = fp = tn = fn = 0
        for s, l in zip(scores, labels):
            hit = (not np.isnan(s)) and s >= thr
            if hit and l:
                tp += 1
            elif hit:
                fp += 1
            elif l:
                fn += 1
            else:
                tn += 1
        if tp >= anchor * n_pos - 1e-9:
            return thr, tp, fp, tn, fn
    return None


def test_perfect_separation():
    scores = np.r_[np.full(10, 9.0), np.linspace(0, 1, 90)]
    labels = np.r_[np.ones(10, bool), np.zeros(90, bool)]
    for p in evaluate(scores, labels).points:
        assert p.precision == 1.0 and p.fpr == 0.0


def test_worked_example():
    rng = np.random.default_rng(0)
    pos = np.r_[10.0 + np.arange(99), 0.5]
    neg = np.r_[20.0, 30.0, rng.uniform(0, 1, 999_998)]
    scores = np.r_[pos, neg]
    labels = np.r_[np.ones(100, bool), np.zeros(1_000_000, bool)]
    p = evaluate(scores, labels, (0.99,)).point(0.99)
    assert (p.tp, p.fn, p.fp, p.tn) == (99, 1, 2, 999_998)
    assert p.recall == pytest.approx(0.99)
    assert p.fpr == pytest.approx(2.0e-6)


def test_matches_exhaustive_count_oracle():
    rng = np.random.default_rng(1)
    n = 10_000
    labels = rng.random(n) < 0.02
    scores = np.round(rng.normal(0, 1, n) + 2.5 * labels, 2)  # rounding creates ties
    res = evaluate(scores, labels)
    for p in res.points:
        thr, tp, fp, tn, fn = _brute(scores, labels, p.anchor)
        assert (p.threshold, p.tp, p.fp, p.tn, p.fn) == (thr, tp, fp, tn, fn)


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 300), st.floats(0.01, 0.5), st.integers(0, 10_000), st.sampled_from([0.5, 0.9, 0.95, 0.99]))
def test_anchor_properties(n, frac, seed, anchor):
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < frac
    if not labels.any():
        labels[0] = True
    scores = np.round(rng.normal(size=n) + labels, 1)
    p = evaluate(scores, labels, (anchor,)).points[0]
    assert p.tp + p.fn == labels.sum()
    assert p.fp + p.tn == n - labels.sum()
    assert p.recall >= anchor - 1e-12
    higher = np.unique(scores[scores > p.threshold])
    if len(higher):
        tp, *_ = confusion_at(scores, labels, higher.min())
        assert tp / labels.sum() < anchor


def test_nan_scores_never_flagged():
    scores = np.array([np.nan, 3.0, 2.0, 1.0])
    labels = np.array([True, True, False, False])
    p = evaluate(scores, labels, (0.5, 1.0)).points
    assert p[0].reachable and p[0].tp == 1 and p[0].fp == 0
    assert not p[1].reachable


def test_table_format():
    res = evaluate(np.array([3.0, 2.0, 1.0]), np.array([True, False, False]))
    lines = res.table().splitlines()
    assert lines[0].split() == ["anchor", "precision", "recall", "f1", "fpr", "tp", "fp", "tn", "fn"]
    assert len(lines) == 4


# --- sweep ----------------------------------------------------------------

def test_sweep_rows_and_medians(tmp_path):
    rows = []
    for cfg, bump in (("graphstad", 0.0), ("nontemporal", 0.01)):
        for seed in range(3):
            scores = np.r_[np.full(5, 5.0), np.linspace(0, 1, 95) + bump * seed]
            labels = np.r_[np.ones(5, bool), np.zeros(95, bool)]
            for f in (0.8, 0.0):
                rows += ablation_rows(cfg, seed, "degraded", f, evaluate(scores, labels))
    write_sweep_csv(rows, tmp_path / "a.csv")
    write_median_csv(rows, tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        med = list(csv.DictReader(fh))
    assert len(med) == 2 * 2 * 3
    assert len({(r["config"], r["R_D"], r["anchor"]) for r in med}) == len(med)
    assert median_fpr(rows, "graphstad", 0.0, 0.9) == 0.0
    write_sweep_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_median_ignores_unreachable():
    rows = [SweepRow("g", 0, "dead", 0.0, 0.9, 0.1, True), SweepRow("g", 1, "dead", 0.0, 0.9, float("nan"), False)]
    assert median_fpr(rows, "g", 0.0, 0.9) == 0.1
