import os
import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from genckpt import protocol as p
from genckpt.agent import (
    Agent,
    FdRange,
    Role,
    SectionKind,
    StateSection,
    choose_internal_fd_range,
    current_process_fds,
    header_size,
    restore_state,
    serve,
    snapshot_state,
)
from genckpt.coordinator import Coordinator, Outcome
from genckpt.errors import FdExhaustion, ImageFormatError, SnapshotRace

from oracles import fd_gap_scan

sections = st.lists(
    st.builds(
        StateSection,
        st.text(max_size=12),
        st.binary(max_size=300),
        st.sampled_from(list(SectionKind)),
    ),
    max_size=6,
    unique_by=lambda s: s.name,
)


# -- fd range ---------------------------------------------------------------


def test_fd_examples():
    assert choose_internal_fd_range(range(1024), 16, 65536) == FdRange(1024, 16)
    assert choose_internal_fd_range(list(range(10)) + list(range(12, 20)), 2, 65536) == FdRange(10, 2)
    with pytest.raises(FdExhaustion):
        choose_internal_fd_range(range(65536), 1, 65536)


@given(st.sets(st.integers(0, 200), max_size=150), st.integers(1, 12), st.integers(4, 220))
def test_fd_range_matches_gap_scan(app_fds, needed, max_fd):
    want = fd_gap_scan(app_fds, needed, max_fd)
    if want is None:
        with pytest.raises(FdExhaustion):
            choose_internal_fd_range(app_fds, needed, max_fd)
        return
    got = choose_internal_fd_range(app_fds, needed, max_fd)
    assert got.start == want and got.count == needed
    assert not any(fd in got for fd in app_fds)


# -- snapshot / restore -------------------------------------------------------


def test_snapshot_size_arithmetic():
    secs = [StateSection("meta", b"m" * 10, SectionKind.METADATA), StateSection("heap", b"h" * (1 << 20))]
    image, footprint = snapshot_state(secs)
    assert footprint == len(image) == 1_048_586 + header_size(secs)


def test_empty_snapshot():
    image, footprint = snapshot_state([])
    assert footprint == header_size([])
    assert restore_state(image) == []


@given(sections)
def test_restore_then_snapshot_is_identity(secs):
    image, _ = snapshot_state(secs)
    again, _ = snapshot_state(restore_state(image))
    assert again == image
    assert snapshot_state(secs)[0] == image


@given(sections, st.data())
def test_truncated_image_rejected(secs, data):
    image, _ = snapshot_state(secs)
    cut = data.draw(st.integers(0, len(image) - 1))
    with pytest.raises(ImageFormatError):
        restore_state(image[:cut])


def test_snapshot_race_detected():
    class Sneaky(bytearray):
        def __bytes__(self):
            self[0] ^= 1
            return bytes(bytearray(self))

    with pytest.raises(SnapshotRace):
        snapshot_state([StateSection("heap", Sneaky(b"abc"))])


# -- open files ---------------------------------------------------------------


def test_enumerate_open_files(tmp_path, store):
    agent = Agent(store)
    assert agent.enumerate_open_files() == []
    f1 = agent.open(tmp_path / "a", "w")
    f2 = agent.open(tmp_path / "b", "w")
    assert [o.path for o in agent.enumerate_open_files()] == [str(tmp_path / "a"), str(tmp_path / "b")]
    f1.close()
    # a closed temp file vanishes from the list even if it is still needed
    assert len(agent.enumerate_open_files()) == 1
    f2.close()


# -- socket serve ---------------------------------------------------------------


def test_serve_over_socket_relocates_fd(real_store):
    agent = Agent(real_store, Role.WORKER, 64)
    agent.register_section("heap", b"x" * 64)
    a, b = socket.socketpair()
    held = set(current_process_fds())
    t = threading.Thread(target=serve, args=(agent, p.SocketLink(b)), daemon=True)
    t.start()
    coord = Coordinator(real_store, barrier_timeout=10.0)
    link = p.SocketLink(a)
    pid = coord.attach(link)
    report = coord.run_checkpoint()
    assert report.outcome is Outcome.COMMITTED
    assert agent.internal_fds.start not in held
    link.close()
    t.join(5)
    assert not t.is_alive()
    assert real_store.load_generation(report.generation.index).image_bytes(pid)
    assert os.path.isdir(real_store.root)
