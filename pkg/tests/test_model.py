import numpy as np
import pytest

from ora import autodiff as ad
from ora.discretize import BinGrid, quantile_edges
from ora.events import Event, make_record
from ora.model import (
    PRESETS,
    BackboneConfig,
    EventTransformer,
    FactorizedHead,
    count_parameters,
    gap_bucket,
    head_forward,
)
from ora.vocab import Vocabulary

SMALL = BackboneConfig(d_model=16, n_layers=2, n_heads=2, context_length=8, d_hidden=8, time_bins=3, value_bins=4)


def small_model(seed=0, config=SMALL):
    vocab = Vocabulary.from_codes(["A", "B", "L"], [False, False, True])
    grids = {0: BinGrid(0, (1.0, 2.0), None, 3, 4), 1: BinGrid(1, (1.0, 2.0), None, 3, 4),
             2: BinGrid(2, (1.0, 2.0), quantile_edges(np.arange(1.0, 101.0), 4), 3, 4)}
    return EventTransformer(config, vocab, grids, seed=seed)


def rec(*events):
    return make_record("p", [Event(*e) for e in events])


def input_rows(model, record):
    batch = model.make_batch([record])
    return model.embed(batch).data[0]


def test_first_event_gap_bucket_zero():
    model = small_model()
    _, gaps, _ = model.event_indices(rec((3.0, "A"), (4.0, "B")))
    assert gaps[0] == 0 and gaps[1] == gap_bucket(1.0) > 0


def test_identical_simultaneous_events_embed_identically():
    model = small_model()
    x = input_rows(model, rec((0.0, "B"), (2.0, "A"), (2.0, "A")))
    assert np.array_equal(x[1], x[2])


def test_median_value_bucket():
    model = small_model()
    _, _, vals = model.event_indices(rec((0.0, "L", 50.0)))
    V = SMALL.value_bins
    assert vals[0] == 2 * V + V // 2


def test_gap_buckets_cover_log_scale():
    assert gap_bucket(None) == 0
    assert gap_bucket(0.0) == 1
    buckets = [gap_bucket(2.0**e) for e in range(-8, 10)]
    assert buckets == sorted(buckets) and max(buckets) == 15


def test_causality_bit_identical():
    model = small_model(seed=3)
    base = rec((0.0, "A"), (1.0, "L", 10.0), (2.5, "B"), (4.0, "L", 70.0), (6.0, "A"))
    E = model.embed_sequences([base])[0]
    for j in range(len(base.events) - 1):
        changed = list(base.events)
        changed[j + 1] = Event(changed[j + 1].time, "B" if changed[j + 1].code != "B" else "A", None)
        E2 = model.embed_sequences([make_record("p", changed)])[0]
        assert np.array_equal(E[: j + 1], E2[: j + 1])


def test_padding_does_not_leak_into_shorter_records():
    model = small_model(seed=1)
    short = rec((0.0, "A"), (1.0, "B"))
    long = rec((0.0, "A"), (1.0, "B"), (2.0, "L", 5.0), (3.0, "A"))
    alone = model.embed_sequences([short])[0]
    together = model.embed_sequences([short, long])[0]
    assert np.array_equal(alone, together)


def test_single_event_is_finite():
    E = small_model().embed_sequences([rec((0.0, "A"))])[0]
    assert E.shape == (1, SMALL.d_model) and np.isfinite(E).all()


def test_order_sensitivity():
    model = small_model(seed=2)
    a = model.embed_sequences([rec((0.0, "A"), (1.0, "B"), (3.0, "L", 20.0))])[0]
    b = model.embed_sequences([rec((0.0, "B"), (1.0, "A"), (3.0, "L", 20.0))])[0]
    assert not np.allclose(a[-1], b[-1])


def test_truncation_keeps_most_recent():
    model = small_model()
    events = [(float(t), "A") for t in range(12)]
    batch = model.make_batch([rec(*events)])
    assert batch.lengths[0] == SMALL.context_length and batch.truncated == 1
    assert model.truncated == 1
    assert batch.gaps[0, 0] == 0


def test_zero_initialized_head_is_uniform():
    head = FactorizedHead(8, 4, 3, 4, [0, 2], [1], seed=0, zero_init=True)
    out = head_forward(head, np.random.default_rng(0).normal(size=8))
    np.testing.assert_allclose(out.for_code(0), np.full((3, 4), 1 / 12), rtol=1e-14)
    np.testing.assert_allclose(out.for_code(1), np.full(3, 1 / 3), rtol=1e-14)


def test_head_normalized_and_matches_direct_formula():
    rng = np.random.default_rng(5)
    D, D2, T, V = 6, 5, 3, 2
    head = FactorizedHead(D, D2, T, V, [1, 3], [0, 2], seed=4)
    for t in head.params.values():
        t.data = rng.normal(size=t.data.shape)
    E = rng.normal(size=(4, D))
    out = head(ad.Tensor(E))
    p = {k: t.data for k, t in head.params.items()}
    for i in range(4):
        H = (E[i] @ p["head.w1"] + p["head.b1"]).reshape(T, D2)
        for slot, m in enumerate([1, 3]):
            w = p["head.w_num"][:, slot * V : (slot + 1) * V]
            z = H @ w + p["head.b_num"][slot * V : (slot + 1) * V]
            ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            np.testing.assert_allclose(out.for_code(m, i), ref, rtol=1e-12)
            assert abs(out.for_code(m, i).sum() - 1) < 1e-6
        for slot, m in enumerate([0, 2]):
            z = H @ p["head.w_non"][:, slot] + p["head.b_non"][slot]
            ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
            np.testing.assert_allclose(out.for_code(m, i), ref, rtol=1e-12)
            assert np.all((out.for_code(m, i) > 0) & (out.for_code(m, i) < 1))


def test_head_rejects_unknown_code():
    head = FactorizedHead(4, 2, 2, 2, [0], [1])
    with pytest.raises(KeyError):
        head_forward(head, np.zeros(4), codes=[5])
    with pytest.raises(ad.NonFiniteError):
        head_forward(head, np.array([np.nan, 0, 0, 0]))


def test_desk_parameter_counts():
    counts = count_parameters(PRESETS["desk"], 10, 10)
    assert (counts.factorized, counts.direct) == (64 * 4 * 32 + 10 * 32 * 4 + 10 * 32, 12800)
    assert counts.factorized == 9792
    assert counts.reduction == pytest.approx(0.235, abs=1e-12)


def test_head_param_count_matches_instantiated_weights():
    cfg = PRESETS["desk"]
    head = FactorizedHead(cfg.d_model, cfg.d_hidden, cfg.time_bins, cfg.value_bins, range(10), range(10, 20))
    weights = sum(t.data.size for k, t in head.params.items() if ".w" in k)
    assert weights == count_parameters(cfg, 10, 10).factorized


def test_factorization_can_be_larger():
    cfg = BackboneConfig(d_model=8, n_heads=2, d_hidden=8 * 4, time_bins=4, value_bins=1)
    counts = count_parameters(cfg, 0, 5)
    assert counts.reduction < 0


def test_large_preset_counts_reported():
    cfg = PRESETS["large"]
    assert (cfg.d_model, cfg.d_hidden, cfg.time_bins, cfg.value_bins) == (768, 512, 8, 10)
    assert (cfg.context_length, cfg.n_layers, cfg.n_heads) == (8192, 11, 12)
    counts = count_parameters(cfg, 3500, 3500)
    assert counts.factorized == 768 * 8 * 512 + 3500 * 512 * 10 + 3500 * 512
    assert counts.direct == 768 * (8 * 10 * 3500 + 8 * 3500)


def test_config_round_trip_and_validation():
    text = SMALL.dumps()
    assert BackboneConfig.loads(text) == SMALL
    assert BackboneConfig.loads("preset=large\n") == PRESETS["large"]
    with pytest.raises(ValueError):
        BackboneConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        BackboneConfig.loads("width=3\n")
    with pytest.raises(ValueError):
        BackboneConfig(n_layers=0)
