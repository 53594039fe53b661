import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ora.discretize import BinGrid, time_bins, value_bins
from ora.events import Event, dumps_event_stream, make_record
from ora.synth import (
    ConfigError,
    GeneratorConfig,
    GroundTruth,
    directional_config,
    first_arrivals,
    generate_cohort,
    oracle_cell_distribution,
    task_labels,
)


def flat_config(rate=1.0, n=10_000, window=30.0, seed=0, numeric=1, nonnumeric=0, H=1):
    K = numeric + nonnumeric
    return GeneratorConfig(n_patients=n, n_numeric=numeric, n_nonnumeric=nonnumeric, latent_dim=H,
                           base_rate=np.full(K, rate), rate_weights=np.zeros((K, H)),
                           value_mean=np.zeros(K), value_weights=np.zeros((K, H)), value_sd=np.ones(K),
                           window=(window, window), seed=seed)


def test_poisson_mean_count():
    records, _ = generate_cohort(flat_config(rate=1.0, n=10_000, window=30.0))
    counts = np.array([len(r.events) for r in records])
    se = math.sqrt(30.0 / counts.size)
    assert abs(counts.mean() - 30.0) < 3 * se


def test_zero_value_weights_decouple_values_from_state():
    records, truth = generate_cohort(flat_config(rate=0.5, n=4000, window=20.0, H=1))
    by_state = {0: [], 1: []}
    for rec, z in zip(records, truth.z[:, 0]):
        by_state[int(z)].extend(e.value for e in rec.events)
    a, b = np.array(by_state[0]), np.array(by_state[1])
    se = math.sqrt(1 / a.size + 1 / b.size)
    assert abs(a.mean() - b.mean()) < 4 * se


def test_same_seed_same_bytes():
    cfg = GeneratorConfig.random(seed=5, n_patients=50)
    r1, t1 = generate_cohort(cfg)
    r2, t2 = generate_cohort(GeneratorConfig.random(seed=5, n_patients=50))
    assert dumps_event_stream(r1) == dumps_event_stream(r2)
    assert t1.dumps_latent() == t2.dumps_latent() and t1.dumps_parameters() == t2.dumps_parameters()
    r3, _ = generate_cohort(GeneratorConfig.random(seed=6, n_patients=50))
    assert dumps_event_stream(r1) != dumps_event_stream(r3)


def test_records_are_sorted_and_valued():
    cfg = GeneratorConfig.random(seed=1, n_patients=40)
    records, truth = generate_cohort(cfg)
    for rec, w in zip(records, truth.window):
        times = [e.time for e in rec.events]
        assert times == sorted(times) and all(0 <= t <= w for t in times)
        for e in rec.events:
            assert (e.value is not None) == e.code.startswith("LAB")


def test_runaway_rates_rejected():
    with pytest.raises(ConfigError, match="runaway"):
        generate_cohort(flat_config(rate=500.0, n=2, window=30.0))
    with pytest.raises(ConfigError):
        flat_config(rate=-1.0, n=2)


def test_oracle_examples():
    cfg = flat_config(rate=0.7)
    single = oracle_cell_distribution(cfg, [0], 0, BinGrid(0, (), (), 1, 1))
    assert single.tolist() == [[1.0]]
    half = oracle_cell_distribution(cfg, [0], 0, BinGrid(0, (math.log(2) / 0.7,), None, 2, 1))
    np.testing.assert_allclose(half[:, 0], [0.5, 0.5], rtol=1e-14)
    vals = oracle_cell_distribution(cfg, [0], 0, BinGrid(0, (), (0.0,), 1, 2))
    np.testing.assert_allclose(vals[0], [0.5, 0.5], rtol=1e-14)


@given(st.integers(0, 2**31 - 1))
def test_oracle_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    cfg = GeneratorConfig.random(seed=seed % 1000, n_patients=1)
    code = int(rng.integers(0, cfg.n_codes))
    z = rng.integers(0, 2, cfg.latent_dim)
    grid = BinGrid(code, tuple(np.sort(rng.exponential(3.0, 3))),
                   tuple(np.sort(rng.normal(0, 2, 2))) if cfg.is_numeric(code) else None, 4, 3)
    assert oracle_cell_distribution(cfg, z, code, grid).sum() == pytest.approx(1.0, abs=1e-14)


def test_first_arrivals_match_oracle():
    cfg = flat_config(rate=0.3)
    grid = BinGrid(0, (1.0, 3.0, 6.0), (-0.5, 0.5), 4, 3)
    dt, v = first_arrivals(0.3, 0.0, 1.0, 20_000, 5.0, np.random.default_rng(0))
    emp = np.zeros((4, 3))
    np.add.at(emp, (time_bins(grid, dt), value_bins(grid, v)), 1.0)
    emp /= dt.size
    assert 0.5 * np.abs(emp - oracle_cell_distribution(cfg, [0], 0, grid)).sum() < 0.02


def test_directional_config_bit_zero_keeps_relative_frequencies():
    cfg = directional_config(0, 10)
    r0 = cfg.rates(np.array([0, 1, 1]))
    r1 = cfg.rates(np.array([1, 0, 0]))
    np.testing.assert_allclose(r0 / r0.sum(), r1 / r1.sum(), rtol=1e-14)
    assert not np.allclose(cfg.value_means(np.array([0, 1, 0])), cfg.value_means(np.array([0, 0, 1])))


def truth_for(pids, windows):
    n = len(pids)
    return GroundTruth(pids, np.zeros((n, 1), int), np.array(windows, float), np.zeros((n, 2)),
                       np.zeros((n, 2)), np.ones(2), ["L", "D"], [True, False])


def test_task_label_examples():
    quiet = make_record("a", [Event(1.0, "L", 2.0), Event(4.0, "L", 3.0)])
    hit = make_record("b", [Event(1.0, "L", 2.0), Event(12.0, "D")])
    truth = truth_for(["a", "b"], [30.0, 30.0])
    tte = task_labels([quiet, hit], truth, "time_to_event", "D", prediction_fraction=1 / 3)
    assert tte[0].prediction_time == pytest.approx(10.0)
    assert tte[0].label == pytest.approx((20.0, 0.0)) and tte[1].label == pytest.approx((2.0, 1.0))
    cls = task_labels([hit], truth, "classification", "D", horizon=5.0, prediction_fraction=1 / 3)
    assert cls[0].label == (1.0,)
    cls = task_labels([hit], truth, "classification", "D", horizon=1.0, prediction_fraction=1 / 3)
    assert cls[0].label == (0.0,)


def test_regression_label_is_next_future_value():
    rec = make_record("a", [Event(2.0, "L", 9.0), Event(12.0, "L", 5.0), Event(14.0, "L", 7.0)])
    ex = task_labels([rec], truth_for(["a"], [30.0]), "regression", "L", prediction_fraction=1 / 3)
    assert ex[0].label == (5.0,)
    with pytest.raises(ValueError, match="anchors"):
        task_labels([rec], truth_for(["a"], [30.0]), "regression", "L", prediction_fraction=0.9)
