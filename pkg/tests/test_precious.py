import hashlib
import os
import tempfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genckpt.agent import Agent
from genckpt.coordinator import Coordinator, Outcome
from genckpt.errors import CollectError, CorruptImage
from genckpt.fs import SimFS
from genckpt.manifest import Lifecycle, PreciousFileRecord
from genckpt.precious import (
    Classification,
    PreciousPolicy,
    PreciousTracker,
    UnlinkOutcome,
    classify,
    collect_precious_set,
    intercept_unlink,
    restore_precious,
)
from genckpt.protocol import DirectLink
from genckpt.store import GenerationStore

TMP = PreciousPolicy.from_flags(prefixes=("tmp_",), ckpt_enable=True)


def sha(data):
    return hashlib.sha256(data).hexdigest()


# -- classify ---------------------------------------------------------------


def test_classify_examples():
    assert classify("work/tmp_kmers.bin", TMP) is Classification.PRECIOUS
    assert classify("work/contigs.fasta", TMP) is Classification.OUTPUT
    pol = PreciousPolicy.from_flags(precious_dir="work/precious/")
    assert classify("work/precious/a/b.dat", pol) is Classification.PRECIOUS
    assert classify("work/other/b.dat", pol) is Classification.OUTPUT
    assert classify("x.part", PreciousPolicy.from_flags(suffixes=(".part",))) is Classification.PRECIOUS
    assert classify("anything", PreciousPolicy.from_flags(intercept_all=True)) is Classification.PRECIOUS


# -- unlink interception ------------------------------------------------------


@pytest.mark.parametrize(
    "ckpt,name,outcome",
    [(True, "tmp_a", UnlinkOutcome.RETAINED), (False, "tmp_a", UnlinkOutcome.DELETED), (True, "out.txt", UnlinkOutcome.DELETED)],
)
def test_unlink(tmp_path, ckpt, name, outcome):
    pol = PreciousPolicy.from_flags(prefixes=("tmp_",), ckpt_enable=ckpt)
    tr = PreciousTracker(str(tmp_path), pol)
    tr.write(name, b"data")
    assert intercept_unlink(name, tr, pol) is outcome
    assert not tr.exists(name)
    assert not os.path.exists(tmp_path / name)
    retained = tr.abspath(name) in tr.state.deletion_pending
    assert retained == (outcome is UnlinkOutcome.RETAINED)
    if retained:
        assert open(tr.state.deletion_pending[tr.abspath(name)], "rb").read() == b"data"


def test_unlink_pending_twice(tmp_path):
    tr = PreciousTracker(str(tmp_path), TMP)
    tr.write("tmp_a", b"x")
    tr.unlink("tmp_a")
    with pytest.raises(FileNotFoundError):
        tr.unlink("tmp_a")


# -- collect --------------------------------------------------------------------


def test_collect_union(tmp_path):
    tr = PreciousTracker(str(tmp_path), TMP)
    for i in range(4):
        tr.write(f"tmp_{i}", bytes([i]) * 3)
    tr.write("result.txt", b"r")
    tr.unlink("tmp_3")
    recs = collect_precious_set(tr)
    assert len(recs) == 4
    assert [r.lifecycle for r in recs].count(Lifecycle.DELETION_PENDING) == 1


def test_collect_empty(tmp_path):
    assert collect_precious_set(PreciousTracker(str(tmp_path), TMP)) == []


def test_collect_growing_file(tmp_path):
    tr = PreciousTracker(str(tmp_path), TMP)
    tr.write("tmp_g", b"a" * 10)
    first = collect_precious_set(tr)[0]
    tr.append("tmp_g", b"b" * 5)
    second = collect_precious_set(tr)[0]
    assert (first.byte_size, second.byte_size) == (10, 15)
    assert first.checksum == sha(b"a" * 10)
    assert second.checksum == sha(b"a" * 10 + b"b" * 5)


def test_collect_declared(tmp_path):
    tr = PreciousTracker(str(tmp_path), TMP)
    tr.write("scratch.dat", b"s")
    assert collect_precious_set(tr) == []
    tr.declare("scratch.dat")
    assert [r.original_path for r in collect_precious_set(tr)] == [str(tmp_path / "scratch.dat")]


def test_collect_error_names_path(tmp_path):
    tr = PreciousTracker(str(tmp_path), TMP)
    tr.write("tmp_a", b"x")
    tr.unlink("tmp_a")
    os.remove(tr.state.deletion_pending[tr.abspath("tmp_a")])
    with pytest.raises(CollectError) as e:
        collect_precious_set(tr)
    assert "tmp_a" in str(e.value)


# -- restore_precious -------------------------------------------------------------


def _records(root, contents):
    out = []
    for rel, data in contents.items():
        out.append((PreciousFileRecord(os.path.join(root, rel), len(data), sha(data)), data))
    return out


def test_restore_four_records_into_missing_dirs(tmp_path):
    pairs = _records(str(tmp_path), {f"d{i}/sub/tmp_{i}": bytes([i]) * (i + 1) for i in range(4)})
    backups = {r.original_path: d for r, d in pairs}
    res = restore_precious([r for r, _ in pairs], lambda r: backups[r.original_path])
    assert len(res.restored) == 4 and res.overwritten == []
    for r, d in pairs:
        assert open(r.original_path, "rb").read() == d


def test_restore_empty_is_noop():
    res = restore_precious([], lambda r: b"")
    assert res.restored == [] and res.overwritten == []


def test_restore_digest_mismatch_touches_nothing(tmp_path):
    pairs = _records(str(tmp_path), {"tmp_a": b"aaa", "tmp_b": b"bbb"})
    with pytest.raises(CorruptImage):
        restore_precious([r for r, _ in pairs], lambda r: b"aaa")
    assert os.listdir(tmp_path) == []


def test_restore_reports_overwrite(tmp_path):
    (rec, data), = _records(str(tmp_path), {"tmp_a": b"backup"})
    (tmp_path / "tmp_a").write_bytes(b"conflict")
    res = restore_precious([rec], lambda r: data)
    assert res.overwritten == [rec.original_path]
    assert (tmp_path / "tmp_a").read_bytes() == b"backup"


# -- checkpoint/restore round trip (property) -----------------------------------

names = st.sampled_from([f"tmp_{c}" for c in "abcde"] + ["sub/tmp_f", "out.txt", "log.txt"])
ops = st.lists(
    st.one_of(
        st.tuples(st.just("write"), names, st.binary(max_size=64)),
        st.tuples(st.just("append"), names, st.binary(min_size=1, max_size=16)),
        st.tuples(st.just("unlink"), names),
    ),
    max_size=25,
)


def apply(tr, op):
    kind, name = op[0], op[1]
    visible = tr.exists(name)
    if kind == "write":
        tr.write(name, op[2])
    elif kind == "append" and visible:
        tr.append(name, op[2])
    elif kind == "unlink" and visible:
        tr.unlink(name)


def precious_state(tr):
    """(path, lifecycle, digest) of everything a checkpoint must carry."""
    return sorted((r.original_path, r.lifecycle.value, r.checksum) for r in collect_precious_set(tr))


def visible_precious(tr):
    return {
        p: sha(tr.read(p)) for p in tr.walk_visible()
        if tr.classify(p) is Classification.PRECIOUS
    }


def check_roundtrip(before, after):
    with tempfile.TemporaryDirectory() as tmp:
        tr = PreciousTracker(os.path.join(tmp, "work"), TMP)
        store = GenerationStore("/store", fs=SimFS())
        coord = Coordinator(store)
        coord.attach(DirectLink(Agent(store, tracker=tr)))
        for op in before:
            apply(tr, op)
        want_state, want_visible = precious_state(tr), visible_precious(tr)
        assert coord.run_checkpoint().outcome is Outcome.COMMITTED
        for op in after:
            apply(tr, op)
        coord.run_restore()
        assert precious_state(tr) == want_state
        assert visible_precious(tr) == want_visible


@given(ops, ops)
@settings(max_examples=60)
def test_precious_roundtrip(before, after):
    check_roundtrip(before, after)


def test_roundtrip_deleted_file_comes_back_hidden():
    check_roundtrip(
        [("write", "tmp_a", b"keep"), ("unlink", "tmp_a"), ("write", "tmp_b", b"live")],
        [("write", "tmp_a", b"new"), ("unlink", "tmp_b"), ("write", "tmp_c", b"stray")],
    )
