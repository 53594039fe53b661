import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ora.events import (
    Event,
    EventParseError,
    EventValidationError,
    PatientRecord,
    dumps_event_stream,
    extract_all_targets,
    extract_targets,
    make_record,
    parse_event_stream,
    validate_record,
)
from ora.vocab import Vocabulary

import oracles


def vocab_of(*codes):
    return Vocabulary.from_codes(list(codes))


def test_parse_single_event():
    recs, stats = parse_event_stream(b'{"patient_id":"p","events":[[0.0,"A",null]]}\n')
    assert len(recs) == 1 and len(recs[0]) == 1
    assert recs[0].events[0] == Event(0.0, "A", None)
    assert stats.reordered == 0


def test_parse_sorts_and_counts():
    recs, stats = parse_event_stream('{"patient_id":"p","events":[[2.0,"A",null],[1.0,"B",null]]}')
    assert [e.time for e in recs[0].events] == [1.0, 2.0]
    assert stats.reordered == 1


def test_parse_nan_value_names_line():
    text = '{"patient_id":"a","events":[]}\n{"patient_id":"p","events":[[1.0,"A",NaN]]}\n'
    with pytest.raises(EventValidationError, match="line 2"):
        parse_event_stream(text)


@pytest.mark.parametrize("line", [
    "not json",
    '{"patient_id":"p"}',
    '{"patient_id":"p","events":[[1.0,"A"]]}',
    '{"patient_id":"p","events":[["x","A",null]]}',
    '{"patient_id":"p","events":[[1.0,3,null]]}',
])
def test_parse_malformed_lines(line):
    with pytest.raises(EventParseError, match="line 1"):
        parse_event_stream(line)


def test_parse_negative_time_is_validation_error():
    with pytest.raises(EventValidationError):
        parse_event_stream('{"patient_id":"p","events":[[-1.0,"A",null]]}')


def test_simultaneous_events_ordered_by_code():
    recs, _ = parse_event_stream('{"patient_id":"p","events":[[1.0,"B",null],[1.0,"A",null]]}')
    assert [e.code for e in recs[0].events] == ["A", "B"]


def test_extract_targets_hand_walk():
    rec = make_record("p", [Event(1.0, "A"), Event(2.0, "B", 5.0), Event(4.0, "A")])
    ts = extract_targets(rec, vocab_of("A", "B"), 0)
    a, b = ts[0], ts[1]
    assert (a.delta_t, a.observed, a.value) == (3.0, True, None)
    assert (b.delta_t, b.observed, b.value) == (1.0, True, 5.0)


def test_extract_targets_last_position_censored():
    rec = make_record("p", [Event(1.0, "A"), Event(2.0, "B", 5.0), Event(4.0, "A")])
    ts = extract_targets(rec, vocab_of("A", "B"), 2)
    assert all(not t.observed and t.delta_t == 0.0 for t in ts)


def test_extract_targets_simultaneous_not_future():
    rec = make_record("p", [Event(1.0, "A"), Event(1.0, "B")])
    ts = extract_targets(rec, vocab_of("A", "B"), 0)
    assert [(t.observed, t.delta_t) for t in ts] == [(False, 0.0), (False, 0.0)]


def test_extract_targets_bounds():
    rec = make_record("p", [Event(1.0, "A")])
    with pytest.raises(IndexError):
        extract_targets(rec, vocab_of("A"), 1)


def test_target_set_shape():
    rec = make_record("p", [Event(0.0, "A"), Event(3.0, "C")])
    ts = extract_targets(rec, vocab_of("A", "B", "C"), 0)
    assert len(ts) == 3
    assert ts.censor_duration == 3.0
    assert ts[1].observed is False and ts[1].value is None and ts[1].delta_t == 3.0


def test_out_of_vocab_codes_are_not_targets():
    rec = make_record("p", [Event(0.0, "A"), Event(1.0, "Z"), Event(2.0, "A")])
    tg = extract_all_targets(rec, vocab_of("A"))
    assert tg.delta_t[:, 0].tolist() == [2.0, 1.0, 0.0]


def test_validate_record():
    clean = make_record("p", [Event(0.0, "A"), Event(1.0, "B"), Event(2.0, "A")])
    assert validate_record(clean) == []
    assert len(validate_record(PatientRecord("p", (Event(-1.0, "A"),)))) == 1
    assert validate_record(PatientRecord("p", ())) == ["empty"]
    unsorted = PatientRecord("p", (Event(2.0, "A"), Event(1.0, "A")))
    assert any("unsorted" in v for v in validate_record(unsorted))
    assert any("non-finite" in v for v in validate_record(PatientRecord("p", (Event(0.0, "A", math.inf),))))


# ---------------------------------------------------------------------------
# properties

CODES = [f"c{i}" for i in range(6)]

event_st = st.builds(
    Event,
    st.integers(0, 30).map(lambda x: x / 2.0),  # coarse grid to force ties
    st.sampled_from(CODES),
    st.one_of(st.none(), st.floats(-5, 5, allow_nan=False)),
)
record_st = st.lists(event_st, min_size=1, max_size=25).map(lambda evs: make_record("p", evs))


@given(record_st)
def test_targets_match_quadratic_scan(rec):
    vocab = vocab_of(*CODES[:5])  # c5 stays out of vocabulary
    tg = extract_all_targets(rec, vocab)
    ref = oracles.brute_targets(rec, vocab.codes)
    for j, row in enumerate(ref):
        for m, (dt, v, obs) in enumerate(row):
            assert tg.observed[j, m] == obs
            assert tg.delta_t[j, m] == dt
            if obs and v is not None:
                assert tg.value[j, m] == v
            else:
                assert np.isnan(tg.value[j, m])


@given(record_st)
def test_observed_targets_strictly_future_and_censor_monotone(rec):
    tg = extract_all_targets(rec, vocab_of(*CODES))
    assert (tg.delta_t[tg.observed] > 0).all()
    assert (np.diff(tg.censor) <= 0).all()
    assert (tg.delta_t <= tg.censor[:, None]).all()


@given(st.lists(st.lists(event_st, min_size=1, max_size=8), min_size=1, max_size=5))
def test_parse_serialize_round_trip(groups):
    recs = [make_record(f"p{i}", evs) for i, evs in enumerate(groups)]
    text = dumps_event_stream(recs)
    again, stats = parse_event_stream(text)
    assert stats.reordered == 0
    assert again == recs
    assert dumps_event_stream(again) == text


def test_history_includes_ties():
    rec = make_record("p", [Event(0.0, "A"), Event(1.0, "B"), Event(1.0, "C"), Event(2.0, "A")])
    assert len(rec.history(1.0)) == 3
    assert len(rec.history(0.5)) == 1
