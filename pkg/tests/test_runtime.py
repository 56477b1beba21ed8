import warnings

import pytest
from hypothesis import given, settings, strategies as st

from urbanpriv.core import StateError
from urbanpriv.runtime import (
    ContainerConfig,
    ContainerSlot,
    ForwardDenied,
    InstanceState,
    OutputBuffer,
    Role,
    RotationEvent,
    forward_output,
    write_rotation_trace,
)


def _run(slot, n):
    return [slot.advance_frame(i) for i in range(n)]


def test_rotation_hand_trace_2_10():
    slot = ContainerSlot(ContainerConfig(2, 10))
    events = _run(slot, 11)
    assert events[8] == [(RotationEvent.SHADOW_LAUNCHED, "slot-i1")]
    assert [e for e, _ in events[10]] == [RotationEvent.SWITCHED, RotationEvent.TORN_DOWN]
    old = slot.history[0]
    assert old.frame_count == 10 and old.state is InstanceState.TORN_DOWN and not old.frames
    # the new instance started warming at frame 8
    assert slot.visible_window().indices == (8, 9, 10)


def test_window_below_max_is_everything():
    slot = ContainerSlot(ContainerConfig(2, 10))
    _run(slot, 5)
    assert slot.visible_window().indices == (0, 1, 2, 3, 4)


def test_warming_flag_before_min_ec():
    slot = ContainerSlot(ContainerConfig(3, 10))
    slot.advance_frame("a")
    w = slot.visible_window()
    assert w.warming and w.frames == ("a",)
    _run(slot, 3)
    assert not slot.visible_window().warming


def test_tumbling_tiles_frames():
    slot = ContainerSlot(ContainerConfig(0, 4))
    _run(slot, 12)
    assert [inst.first_frame for inst in slot.history] == [0, 4, 8]
    assert all(inst.frame_count == 4 for inst in slot.history)


def test_half_overlap_launch_offsets():
    # minEC = N/2: each shadow starts exactly N/2 frames before its switch
    n = 8
    slot = ContainerSlot(ContainerConfig(n // 2, n))
    _run(slot, 5 * n)
    launches = [f for f, ev, _ in slot.trace if ev == "shadowLaunched"]
    switches = [f for f, ev, _ in slot.trace if ev == "switched"]
    assert all(s - l == n // 2 for l, s in zip(launches, switches))
    assert switches[:3] == [8, 12, 16]


def test_invalid_config_raises_on_advance():
    slot = ContainerSlot(ContainerConfig(5, 5))
    with pytest.raises(StateError):
        slot.advance_frame(0)


def test_role_bounds():
    slot = ContainerSlot(ContainerConfig(1, 100, Role.APPLICATION, max_ec_app=50))
    with pytest.raises(StateError):
        slot.advance_frame(0)
    ContainerSlot(ContainerConfig(1, 100, Role.SYSTEM, max_ec_app=50, max_ec_sys=200)).advance_frame(0)


def test_warns_when_min_above_half():
    with pytest.warns(UserWarning):
        ContainerConfig(6, 10).validate()


def test_outputs_evicted_at_producer_teardown():
    slot = ContainerSlot(ContainerConfig(2, 10))
    slot.advance_frame(0)
    r1 = slot.emit_output(b"first")
    _run_from(slot, 1, 10)  # switch at frame 10
    r2 = slot.emit_output(b"second")
    assert not slot.buffer.readable(r1)
    with pytest.raises(StateError):
        slot.buffer.read(r1)
    assert slot.buffer.read(r2) == b"second"
    _run_from(slot, 11, 18)
    assert not slot.buffer.readable(r2)


def _run_from(slot, a, b):
    for i in range(a, b + 1):
        slot.advance_frame(i)


def test_shadow_cannot_emit():
    slot = ContainerSlot(ContainerConfig(2, 10))
    _run(slot, 9)
    with pytest.raises(StateError):
        slot.emit_from(slot.shadow, b"x")
    slot.emit_from(slot.active, b"ok")


def test_forwarding_hop_budget():
    a, b, c = OutputBuffer("A"), OutputBuffer("B"), OutputBuffer("C")
    rec = a.new_record(b"p", "i0", 2, False)
    r_b = forward_output(rec, a, b, admin_permitted=True)
    assert r_b.hop_budget == 1
    r_c = forward_output(r_b, b, c, admin_permitted=True)
    assert r_c.hop_budget == 0
    with pytest.raises(ForwardDenied):
        forward_output(r_c, c, OutputBuffer("D"), admin_permitted=True)
    with pytest.raises(ForwardDenied):
        forward_output(rec, a, b, admin_permitted=False)


def test_forward_zero_budget_denied():
    slot = ContainerSlot(ContainerConfig(2, 10))
    slot.advance_frame(0)
    rec = slot.emit_output(b"x")
    with pytest.raises(ForwardDenied):
        forward_output(rec, slot.buffer, OutputBuffer("n"), admin_permitted=True)


def test_forwarded_copies_evicted_with_producer():
    slot = ContainerSlot(ContainerConfig(2, 10))
    slot.advance_frame(0)
    rec = slot.emit_output(b"x", hop_budget=1)
    nb = OutputBuffer("n")
    copy = forward_output(rec, slot.buffer, nb, admin_permitted=True)
    _run_from(slot, 1, 10)
    assert not nb.readable(copy)
    with pytest.raises(StateError):
        forward_output(rec, slot.buffer, nb, admin_permitted=True)


def test_trace_csv(tmp_path):
    slot = ContainerSlot(ContainerConfig(2, 10))
    _run(slot, 11)
    path = tmp_path / "trace.csv"
    write_rotation_trace(slot, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "frameIndex,event,instanceId"
    assert lines[1:] == ["8,shadowLaunched,slot-i1", "10,switched,slot-i1", "10,tornDown,slot-i0"]


@settings(max_examples=60, deadline=None)
@given(max_ec=st.integers(2, 40), frac=st.floats(0, 0.5), steps=st.integers(1, 400))
def test_window_bounds_property(max_ec, frac, steps):
    min_ec = min(int(frac * max_ec), max_ec // 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        slot = ContainerSlot(ContainerConfig(min_ec, max_ec))
    for i in range(steps):
        slot.advance_frame(i)
        w = slot.visible_window()
        assert len(slot.live_instances()) <= 2
        assert all(j >= i - max_ec + 1 for j in w.indices)
        if not w.warming:
            assert min_ec <= len(w) <= max_ec
        assert w.indices == tuple(range(w.indices[0], i + 1))
