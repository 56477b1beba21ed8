import math
from collections import Counter

import numpy as np
import pytest

from urbanpriv.core import Detection, DetectionRecord, StateError, ValidationError, _ContextCounter, partition_timeline
from urbanpriv.ledger import DeviceLedger, ReportOutcome, epoch_of, write_ledger_csv
from urbanpriv.query import (
    RHO_TRACK_CONSERVATIVE,
    RHO_TRACK_P95,
    Aggregate,
    BroadcastMessage,
    FrameScope,
    Individual,
    Mode,
    QueryEngine,
    QuerySpec,
    Scenario,
    compute_node_filter,
    derive_sensitivity,
    epsilon_for,
    evaluate_query,
    multiplicity_pmf,
    parse_query,
    tracked_detection_stream,
    write_cloud_csv,
)


def _frame(*dets):
    return frozenset(Detection(*d) for d in dets)


def test_parse_dashboard_query():
    q = parse_query("COUNT OVER cam WHERE objectType = bicycle WINDOWED BY 60s WITH SIGMA 1")
    assert q.aggregate is Aggregate.COUNT and q.object_types == {"bicycle"}
    assert q.aw_duration == 60 and q.sigma_q == 1.0 and q.mode is Mode.TRUSTED
    assert derive_sensitivity(q).mu_q == 1.0


def test_parse_options_and_predicates():
    q = parse_query("AVG OVER cam WHERE objectType IN (car, bus) AND value > 2 WINDOWED BY 120 "
                    "WITH SIGMA 2.5 MODE untrusted SENSITIVITY 100 VMAX 30")
    assert q.object_types == {"car", "bus"} and q.mode is Mode.UNTRUSTED
    assert q.declared_s == 100 and q.v_max == 30 and len(q.predicate) == 1
    with pytest.raises(ValidationError):
        parse_query("MEDIAN OVER cam WINDOWED BY 60 WITH SIGMA 1")


def test_sensitivity_modes():
    q = QuerySpec(Aggregate.SUM, {"car"}, 60, 1.0, v_max=30.0)
    assert derive_sensitivity(q, RHO_TRACK_CONSERVATIVE).effective_delta == 270.0
    assert derive_sensitivity(q, RHO_TRACK_P95).effective_delta == 150.0
    cum = QuerySpec(Aggregate.COUNT, set(), 60, 1.0, frame_scope=FrameScope("cumulative", 3))
    assert derive_sensitivity(cum, 9.0).effective_delta == 27.0
    un = QuerySpec(Aggregate.COUNT, set(), 60, 1.0, mode=Mode.UNTRUSTED, declared_s=100.0)
    assert derive_sensitivity(un, 9.0).effective_delta == 100.0
    with pytest.raises(ValidationError):
        derive_sensitivity(q, 0.5)


def test_epsilon_for():
    assert epsilon_for(9.0, 1.0) == pytest.approx(9 * math.sqrt(2))


def test_validate_rejections():
    with pytest.raises(ValidationError):
        QuerySpec(Aggregate.COUNT, set(), 90, 1.0).validate(3840, 60)
    with pytest.raises(ValidationError):
        QuerySpec(Aggregate.SUM, set(), 60, 1.0, mode=Mode.UNTRUSTED).validate(3840, 60)
    with pytest.raises(ValidationError):
        QuerySpec(Aggregate.AVG, set(), 60, 1.0).validate(3840, 60)


def test_evaluate_count_sum_avg():
    rec = DetectionRecord(0, [_frame(("a", "car", 10.0), ("b", "bicycle", 5.0)),
                              _frame(("a", "car", 40.0), ("c", "car", 1.0))], v_max=30.0)
    cnt = QuerySpec(Aggregate.COUNT, {"car"}, 60, 1.0)
    assert evaluate_query(cnt, rec) == {"count": 2.0}
    cum = QuerySpec(Aggregate.SUM, {"car"}, 60, 1.0, v_max=30.0, frame_scope=FrameScope("cumulative", 2))
    assert evaluate_query(cum, rec) == {"sum": 41.0}
    avg = QuerySpec(Aggregate.AVG, {"car"}, 60, 1.0, v_max=30.0)
    assert evaluate_query(avg, rec) == {"sum": 31.0, "count": 2.0}
    un = QuerySpec(Aggregate.COUNT, set(), 60, 1.0, mode=Mode.UNTRUSTED, declared_s=100.0)
    assert evaluate_query(un, DetectionRecord(0, [], raw_output=250.0)) == {"value": 100.0}


def test_node_filter_formula():
    assert compute_node_filter([(16, 1.0), (4, 0.5)]) == pytest.approx(6.0 + 2.0)


def test_engine_noiseless_releases_true_sums():
    eng = QueryEngine("L", 60, 480, rho_track=9.0, noiseless=True)
    h = eng.register_query(QuerySpec(Aggregate.COUNT, {"car"}, 60, 1.0))
    tcs = partition_timeline(60, 960, "L", counter=_ContextCounter())
    counts = [3, 0, 1, 4, 1, 5, 9, 2] * 2
    for tc, c in zip(tcs, counts):
        rec = DetectionRecord(0, [_frame(*[(f"{tc.tc_id}/{k}", "car", 0.0) for k in range(c)])])
        eng.process_tc(tc, rec)
    log = h.streams[0].log
    assert log.estimate_interval(0, 15).estimate == sum(counts)
    assert log.estimate_interval(5, 10).estimate == sum(counts[5:11])


def test_registration_pending_until_boundary():
    eng = QueryEngine("L", 60, 240, rho_track=1.0)
    tcs = partition_timeline(60, 720, "L", counter=_ContextCounter())
    eng.process_tc(tcs[0])
    h = eng.register_query(QuerySpec(Aggregate.COUNT, set(), 60, 1.0))
    assert not h.active
    _, msg = eng.process_tc(tcs[1])
    assert msg is None
    eng.process_tc(tcs[2])
    eng.process_tc(tcs[3])
    _, msg = eng.process_tc(tcs[4])
    assert h.active and msg.rho_node == pytest.approx((2 + 2) * math.sqrt(2))
    with pytest.raises(StateError):
        eng.deregister_query(h)


def test_cloud_csv(tmp_path):
    eng = QueryEngine("L", 60, 120, noiseless=True)
    eng.register_query(QuerySpec(Aggregate.COUNT, set(), 60, 1.0, name="q"))
    for tc in partition_timeline(60, 120, "L", counter=_ContextCounter()):
        eng.process_tc(tc)
    p = tmp_path / "cloud.csv"
    write_cloud_csv(eng.cloud, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "locality,query,containerIdx,node,value,sigma"
    assert lines[-1].startswith("L,q.count,0,shadow,0.0")


def test_multiplicity_truncation():
    pmf = multiplicity_pmf(5)
    assert len(pmf) == 5 and pmf.sum() == pytest.approx(1.0)
    assert pmf[-1] == pytest.approx(0.034 + 0.013 + 0.010 + 0.004 + 0.004, rel=1e-2)


def test_tracked_stream_respects_rho_track():
    tcs = partition_timeline(60, 600, "L", counter=_ContextCounter())
    people = [[Individual(f"p{i}", "pedestrian") for i in range(30)] for _ in tcs]
    recs = tracked_detection_stream(Scenario(tcs, people, frames_per_tc=12), 5.0, seed=1)
    ids = {t for r in recs for t in r.track_ids()}
    per_tc = Counter(t.split("/")[0] for t in ids)
    assert all(v <= 30 * 5 for v in per_tc.values())
    # track ids never cross a TC boundary
    assert all(t.split("/")[0] == tc.tc_id for r, tc in zip(recs, tcs) for t in r.track_ids())


def test_ledger_dedup_and_budget():
    dev = DeviceLedger("d", epoch_capacity=1.0)
    m = BroadcastMessage("L", "L:0", 2.5)
    assert dev.receive_broadcast(m) and not dev.receive_broadcast(m)
    assert dev.receive_broadcast(BroadcastMessage("M", "L:0", 1.0))
    assert dev.epsilon_acc == 3.5
    assert [dev.charge_report(0, 0.5) for _ in range(3)] == [ReportOutcome.REAL, ReportOutcome.REAL, ReportOutcome.NULL]
    assert dev.charge_report(1, 0.5) is ReportOutcome.REAL
    assert dev.api3_loss == 1.5 and dev.total_loss() == 5.0
    with pytest.raises(ValidationError):
        dev.receive_broadcast(BroadcastMessage("L", "x", -1.0))


def test_ledger_float_tolerance():
    dev = DeviceLedger("d", epoch_capacity=1.0)
    assert all(dev.charge_report(0, 0.1) is ReportOutcome.REAL for _ in range(10))
    assert dev.charge_report(0, 0.1) is ReportOutcome.NULL


def test_epoch_of_and_csv(tmp_path):
    assert epoch_of(7 * 86400 - 1) == 0 and epoch_of(7 * 86400) == 1
    dev = DeviceLedger("d", epoch_capacity=2.0)
    dev.charge_report(3, 0.5)
    p = tmp_path / "l.csv"
    write_ledger_csv([dev, DeviceLedger("e")], p)
    assert p.read_text().splitlines() == [
        "deviceId,epsilonAcc,epochId,spent,capacity", "d,0.0,3,0.5,2.0", "e,0.0,,,"]


def test_untrusted_clamped_before_release():
    eng = QueryEngine("L", 60, 120, noiseless=True)
    h = eng.register_query(QuerySpec(Aggregate.SUM, set(), 60, 1.0, mode=Mode.UNTRUSTED, declared_s=10.0, name="u"))
    tcs = partition_timeline(60, 120, "L", counter=_ContextCounter())
    eng.process_tc(tcs[0], raw_outputs={"u": 55.0})
    eng.process_tc(tcs[1], raw_outputs={"u": 4.0})
    assert h.streams[0].log.estimate_interval(0, 1).estimate == 14.0
    assert np.isclose(h.streams[0].epsilon, 10 * math.sqrt(2))
