import hashlib

import pytest

from genckpt.bandwidth import BandwidthModel, ConstantCongestion
from genckpt.fs import RealFS, SimFS


def write(fs, path, data, sync=True):
    with fs.create(path) as w:
        w.write(data)
        if sync:
            w.fsync()


def test_unsynced_file_lost_on_crash(simfs):
    simfs.makedirs("/a")
    simfs.fsync_dir("/")
    write(simfs, "/a/x", b"hello", sync=False)
    simfs.fsync_dir("/a")
    after = simfs.crash()
    assert after.exists("/a/x")
    assert after.read_bytes("/a/x") == b""


def test_entry_needs_parent_fsync(simfs):
    simfs.makedirs("/a")
    simfs.fsync_dir("/")
    write(simfs, "/a/x", b"hello")
    assert not simfs.crash().exists("/a/x")
    simfs.fsync_dir("/a")
    assert simfs.crash().read_bytes("/a/x") == b"hello"


def test_rename_is_atomic_and_durable_after_fsync(simfs):
    simfs.makedirs("/s/d")
    write(simfs, "/s/d/f", b"1")
    simfs.fsync_dir("/s/d")
    simfs.makedirs("/g")
    for d in ("/", "/s", "/g"):
        simfs.fsync_dir(d)
    simfs.rename("/s/d", "/g/d")
    before_sync = simfs.crash()
    assert before_sync.exists("/s/d") and not before_sync.exists("/g/d")
    simfs.fsync_dir("/g")
    simfs.fsync_dir("/s")
    after = simfs.crash()
    assert after.read_bytes("/g/d/f") == b"1"
    assert not after.exists("/s/d")


def test_stepwise_rename_exposes_half_moved_dir():
    fs = SimFS(atomic_rename=False)
    fs.makedirs("/s/d")
    for name in ("a", "b"):
        write(fs, f"/s/d/{name}", name.encode())
    for d in ("/", "/s", "/s/d"):
        fs.fsync_dir(d)
    fs.makedirs("/g")
    fs.fsync_dir("/")
    fs.fsync_dir("/g")
    seen = []

    def stop(op, path):
        if op == "rename-step":
            seen.append(path)
            if len(seen) == 2:
                raise RuntimeError("stop")

    fs.on_event = stop
    with pytest.raises(RuntimeError):
        fs.rename("/s/d", "/g/d")
    crashed = fs.crash()
    assert crashed.listdir("/g/d") == ["a"]
    assert crashed.listdir("/s/d") == ["b"]


def test_clone_is_independent(simfs):
    simfs.makedirs("/a")
    write(simfs, "/a/x", b"one")
    c = simfs.clone()
    write(c, "/a/x", b"two")
    assert simfs.read_bytes("/a/x") == b"one"
    assert c.read_bytes("/a/x") == b"two"


def test_digest_and_events(simfs):
    simfs.makedirs("/a")
    n = simfs.events
    write(simfs, "/a/x", b"abc")
    assert simfs.events > n
    assert simfs.sha256("/a/x") == hashlib.sha256(b"abc").hexdigest()
    assert simfs.size("/a/x") == 3


def test_bandwidth_clock():
    fs = SimFS(bandwidth=BandwidthModel(1000.0, ConstantCongestion(0.5)))
    fs.makedirs("/a")
    write(fs, "/a/x", b"\0" * 1000)
    assert fs.now() == pytest.approx(2.0)


def test_exclusive_create(simfs):
    simfs.makedirs("/a")
    write(simfs, "/a/x", b"")
    with pytest.raises(FileExistsError):
        simfs.create("/a/x", exclusive=True)


def test_realfs_roundtrip(tmp_path):
    fs = RealFS()
    d = str(tmp_path / "a")
    fs.makedirs(d)
    write(fs, d + "/x", b"data")
    fs.fsync_dir(d)
    assert fs.read_bytes(d + "/x") == b"data"
    assert fs.sha256(d + "/x") == hashlib.sha256(b"data").hexdigest()
    fs.rename(d, str(tmp_path / "b"))
    assert fs.listdir(str(tmp_path / "b")) == ["x"]
