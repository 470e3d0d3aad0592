import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfire import detectors as det
from crossfire import evaluation as ev
from crossfire import nn
from crossfire.config import ScenarioConfig
from crossfire.simulation import run_scenario
from oracles import brute_counts

TINY = ScenarioConfig(duration=120.0, attack_window=(30.0, 90.0), n_bots=3)
QUICK = nn.TrainConfig(max_epochs=2, patience=1)


# -- metrics --------------------------------------------------------------------

def test_confusion_examples():
    assert ev.confusion([1, 0, 1], [1, 0, 1]) == ev.ConfusionCounts(2, 0, 1, 0)
    c = ev.confusion([1] * 5, [0] * 5)
    assert c.true_positive == 0 and c.false_positive == 5
    with pytest.raises(ValueError):
        ev.confusion([1, 0], [1])


def test_confusion_matches_brute_force_tally():
    rng = np.random.default_rng(0)
    pred, lab = rng.integers(0, 2, 1000), rng.integers(0, 2, 1000)
    c = ev.confusion(pred.astype(bool), lab)
    assert (c.true_positive, c.false_positive, c.true_negative, c.false_negative) == brute_counts(pred, lab)


def test_metric_arithmetic():
    assert ev.precision(ev.ConfusionCounts(true_positive=3, false_positive=1)) == 0.75
    assert ev.recall(ev.ConfusionCounts(true_positive=3, false_negative=3)) == 0.5
    c = ev.ConfusionCounts(true_positive=4, false_positive=1, false_negative=1, true_negative=4)
    assert ev.precision(c) == ev.recall(c) == 0.8
    assert ev.f1(c) == pytest.approx(0.8, abs=1e-15)


def test_undefined_metrics_are_marked_not_coerced():
    none = ev.ConfusionCounts(true_negative=5)
    assert ev.precision(none) is None and ev.recall(none) is None and ev.f1(none) is None
    assert ev.accuracy(none) == 1.0
    zero = ev.ConfusionCounts(false_positive=2, false_negative=3)
    assert ev.precision(zero) == 0.0 and ev.recall(zero) == 0.0 and ev.f1(zero) is None
    assert ev.accuracy(ev.ConfusionCounts()) is None
    row = ev.SweepRow("alpha", 3, "ann", 0, 0, ev.MetricsReport.from_counts(none)).as_record()
    assert row["precision"] == row["f1"] == "NA"


pairs = st.integers(1, 200).flatmap(lambda n: st.tuples(st.lists(st.booleans(), min_size=n, max_size=n),
                                                        st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@settings(max_examples=100, deadline=None)
@given(pairs, st.randoms())
def test_metric_identities(pair, rnd):
    pred, lab = pair
    c = ev.confusion(pred, lab)
    assert c.total == len(pred)
    assert ev.accuracy(c) == (c.true_positive + c.true_negative) / c.total
    p, r, f = ev.precision(c), ev.recall(c), ev.f1(c)
    for m in (p, r, f, ev.accuracy(c)):
        assert m is None or 0.0 <= m <= 1.0
    if f is not None:
        assert abs(f - 2 * p * r / (p + r)) <= 1e-12
    order = list(range(len(pred)))
    rnd.shuffle(order)
    assert ev.confusion([pred[i] for i in order], [lab[i] for i in order]) == c


# -- splits ---------------------------------------------------------------------------

def test_balanced_split_arithmetic():
    labels = [0] * 50 + [1] * 50
    tr, te = ev.split_dataset(labels, 0.7, seed=1)
    y = np.array(labels)
    assert (np.sum(y[tr] == 0), np.sum(y[tr] == 1), np.sum(y[te] == 0), np.sum(y[te] == 1)) == (35, 35, 15, 15)
    tr2, te2 = ev.split_dataset(labels, 0.7, seed=1)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(100))


def test_split_rejects_tiny_classes_and_bad_fractions():
    with pytest.raises(ev.StratificationError):
        ev.split_dataset([0] * 10 + [1], 0.7, 0)
    with pytest.raises(ValueError):
        ev.split_dataset([0, 0, 1, 1], 1.0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 80), st.integers(2, 80), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_split_stratification_bound(n0, n1, frac, seed):
    labels = np.array([0] * n0 + [1] * n1)
    np.random.default_rng(seed).shuffle(labels)
    tr, te = ev.split_dataset(labels, frac, seed)
    assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == len(labels)
    assert abs(labels[tr].mean() - labels.mean()) <= 1 / len(tr)


# -- alarm analysis ------------------------------------------------------------------

def _scores(probs, labels):
    n = len(probs)
    return det.StreamScores(np.arange(n) * 0.5, np.array(probs, float), np.array(labels), 0.5)


def test_alarm_summary_on_a_known_stream():
    # flicker at index 2, attack from index 6 with one dropout at 9
    probs = [0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.2, 0.9, 0.9, 0.9, 0.9]
    labels = [0] * 6 + [1] * 8
    s = _scores(probs, labels)
    one = ev.alarm_summary(s, 1, attack_start=3.0)
    assert (one.false_alarms, one.false_alarm_events, one.missed, one.latency_s) == (1, 1, 1, 0.0)
    three = ev.alarm_summary(s, 3, attack_start=3.0)
    assert (three.false_alarms, three.missed, three.latency_s) == (0, 5, 1.0)
    assert ev.best_alpha([one, three]).alpha == 1


def test_latency_is_monotone_in_alpha_on_a_fixed_stream():
    rng = np.random.default_rng(3)
    probs = np.concatenate([rng.uniform(0, 0.7, 100), rng.uniform(0.3, 1.0, 200)])
    s = _scores(probs, [0] * 100 + [1] * 200)
    points = ev.alpha_tradeoff(s, range(1, 11), attack_start=50.0)
    lat = [p.latency_s for p in points]
    assert lat[0] <= lat[7]
    assert all(a <= b for a, b in zip(lat, lat[1:]))
    fa = [p.false_alarms for p in points]
    assert all(a >= b for a, b in zip(fa, fa[1:]))


def test_best_alpha_prefers_accuracy_then_small_alpha():
    pts = [ev.AlphaPoint(a, 0, 0, 0, 0.0, acc) for a, acc in [(1, 0.9), (2, 0.95), (3, 0.95), (4, 0.8)]]
    assert ev.best_alpha(pts).alpha == 2


def test_detection_latency_none_without_alarm():
    assert ev.detection_latency(np.arange(4.0), np.zeros(4, bool), 1.0) is None


# -- sweeps ---------------------------------------------------------------------------

def _strip_timing(rows):
    return [{k: v for k, v in r.as_record().items() if k not in ("train_s", "detect_s")} for r in rows]


def test_vehicle_sweep_cardinality_and_determinism():
    spec = ev.SweepSpec("vehicles", [10, 20, 30], TINY, seeds=(0, 1), train=QUICK)
    rows = ev.run_sweep(spec)
    assert len(rows) == 18
    assert [(r.value, r.arch, r.rep) for r in rows[:4]] == [(10, "ann", 0), (10, "ann", 1), (10, "cnn", 0),
                                                            (10, "cnn", 1)]
    assert all(r.status == "ok" for r in rows)
    assert _strip_timing(rows) == _strip_timing(ev.run_sweep(spec))


def test_parallel_sweep_matches_sequential():
    spec = ev.SweepSpec("speed_range", [(0.0, 10.0), (20.0, 30.0)], TINY, archs=("ann",), seeds=(0, 1),
                        train=QUICK)
    assert _strip_timing(ev.run_sweep(spec, jobs=2)) == _strip_timing(ev.run_sweep(spec, jobs=1))


def test_alpha_sweep_reuses_training(monkeypatch):
    calls = []
    real = ev.train_point
    monkeypatch.setattr(ev, "train_point", lambda *a, **k: calls.append(a[1]) or real(*a, **k))
    spec = ev.SweepSpec("alpha", list(range(3, 9)), TINY, archs=("ann", "lstm"), seeds=(0, 1), train=QUICK)
    rows = ev.run_sweep(spec)
    assert len(rows) == 6 * 2 * 2
    assert sorted(calls) == ["ann", "ann", "lstm", "lstm"]
    by_unit = {}
    for r in rows:
        by_unit.setdefault((r.arch, r.rep), []).append(r)
    for unit in by_unit.values():
        assert len({r.metrics for r in unit}) == 1
        lat = [r.latency_s for r in unit]
        assert None in lat or lat == sorted(lat)


def test_failed_point_is_isolated(monkeypatch, tmp_path):
    real = ev.train_point

    def flaky(config, *a, **k):
        if config.n_vehicles == 20:
            raise RuntimeError("boom")
        return real(config, *a, **k)

    monkeypatch.setattr(ev, "train_point", flaky)
    spec = ev.SweepSpec("vehicles", [10, 20], TINY, archs=("ann",), seeds=(0,), train=QUICK)
    rows = ev.run_sweep(spec, artifact_dir=tmp_path)
    assert [r.status for r in rows] == ["ok", "failed: RuntimeError"]
    assert rows[1].as_record()["accuracy"] == "NA"
    assert (tmp_path / "vehicles=10" / "ann" / "rep0" / "model.txt").is_file()
    assert not (tmp_path / "vehicles=20").exists()


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        ev.SweepSpec("colour", [1])
    with pytest.raises(ValueError):
        ev.SweepSpec("vehicles", [])
    with pytest.raises(ValueError):
        ev.SweepSpec("vehicles", [10], seeds=(1, 1))


def test_results_round_trip_and_summary(tmp_path):
    m = ev.MetricsReport.from_counts(ev.ConfusionCounts(3, 1, 4, 2))
    rows = [ev.SweepRow("vehicles", 10, "ann", rep, rep, m, 1.5 * rep, 2.0, 0.1, rep) for rep in range(3)]
    rows.append(ev.SweepRow("vehicles", 10, "ann", 3, 3, status="failed: X"))
    path = tmp_path / "r.csv"
    ev.write_results(rows, path)
    assert path.read_text().splitlines()[0] == (
        "variable,value,arch,rep,seed,accuracy,precision,recall,f1,latency_s,train_s,detect_s,false_alarms,status")
    recs = ev.read_results(path)
    assert recs[3]["accuracy"] == "NA" and recs[0]["train_s"] == "2.00"
    (summary,) = ev.summarize([r for r in recs if r["status"] == "ok"])
    assert float(summary["accuracy"]) == pytest.approx(0.7)
    assert float(summary["latency_s"]) == pytest.approx(1.5)
    assert summary["reps"] == "3"


# -- timing -----------------------------------------------------------------------------

def test_time_phases_are_rounded_wall_clock():
    samples = run_scenario(TINY)
    t0 = time.perf_counter()
    train_s, detect_s = ev.time_phases("ann", samples, train_config=QUICK)
    total = time.perf_counter() - t0
    # a two-epoch toy fit can legitimately round to 0.00 s
    assert 0 <= train_s and 0 <= detect_s
    assert round(train_s, 2) == train_s and round(detect_s, 2) == detect_s
    assert train_s + detect_s <= total + 0.01


def test_detection_time_scales_linearly():
    cfg = ScenarioConfig(duration=1800.0, attack_window=(600.0, 1200.0))
    long = run_scenario(cfg)
    short = long[: len(long) // 2]
    model = det.build_detector("lstm", 25, units=8)
    model.normalization = det.Normalization.fit(long)

    def best_of(stream):
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            det.detect_stream(model, stream, 6)
            times.append(time.perf_counter() - t0)
        return min(times)

    ratio = best_of(long) / best_of(short)
    assert 1.5 <= ratio <= 2.5
