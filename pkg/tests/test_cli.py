import json

import pytest

from genckpt.agent import Agent, Role
from genckpt.cli import main, rows_from_csv, rows_to_csv
from genckpt.coordinator import Coordinator
from genckpt.protocol import DirectLink
from genckpt.store import GenerationStore

SMALL = ["--scale-divisor", "20000"]


def committed_store(root, n, keep_k=2):
    store = GenerationStore(root, keep=keep_k)
    coord = Coordinator(store, keep_k=keep_k)
    agent = Agent(store, Role.WORKER, 1)
    agent.register_section("heap", b"state")
    coord.attach(DirectLink(agent))
    for _ in range(n):
        coord.run_checkpoint()
    return store


def test_inspect_lists_retained_generations(tmp_path, capsys):
    root = str(tmp_path / "s")
    committed_store(root, 5)
    assert main(["inspect", "--store", root, "--csv", "--verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("generation,valid,latest")
    rows = [line.split(",") for line in lines[1:]]
    assert [(r[0], r[1], r[2]) for r in rows] == [("3", "yes", ""), ("4", "yes", "*")]


def test_inspect_uses_env_store(tmp_path, monkeypatch, capsys):
    root = str(tmp_path / "s")
    committed_store(root, 1)
    monkeypatch.setenv("GENCKPT_STORE", root)
    assert main(["inspect"]) == 0
    assert "*" in capsys.readouterr().out


def test_inspect_missing_store(tmp_path, capsys):
    assert main(["inspect", "--store", str(tmp_path / "none")]) == 1


def test_bench_then_report(tmp_path, capsys):
    rec = str(tmp_path / "rec.json")
    assert main(["bench", "--preset", "bog", "--record", rec]) == 0
    capsys.readouterr()
    assert main(["report", "--record", rec, "--csv"]) == 0
    rows = rows_from_csv(capsys.readouterr().out)
    assert [r.checkpoint_index for r in rows] == [1, 2, 3, 4, 5]
    for field in ("precious_bytes", "precious_seconds"):
        vals = [getattr(r, field) for r in rows]
        assert vals == sorted(vals)
    assert rows_from_csv(rows_to_csv(rows)) == rows
    assert main(["report", "--record", rec]) == 0
    assert "precious" in capsys.readouterr().out


def test_run_stop_and_resume(tmp_path, capsys):
    store, work = str(tmp_path / "s"), str(tmp_path / "w")
    ref = str(tmp_path / "ref.json")
    assert main(["run", "--store", str(tmp_path / "r"), "--workdir", str(tmp_path / "rw"), "--record", ref, *SMALL]) == 0
    assert main(["run", "--store", store, "--workdir", work, "--stop-at-tick", "37", *SMALL]) == 0
    assert "stopped at tick 37" in capsys.readouterr().out
    out = str(tmp_path / "out.json")
    assert main(["run", "--store", store, "--workdir", work, "--resume", "latest", "--record", out, *SMALL]) == 0
    want = json.load(open(ref))["outputs"]
    assert json.load(open(out))["outputs"] == want


def test_checkpoint_command(tmp_path, capsys):
    store, work = str(tmp_path / "s"), str(tmp_path / "w")
    assert main(["checkpoint", "--store", store, "--workdir", work, "--tick", "13", *SMALL]) == 0
    assert "at tick 13" in capsys.readouterr().out
    assert main(["restore", "--store", store, "--workdir", work, *SMALL]) == 0
    assert "restored generation" in capsys.readouterr().out


def test_restore_missing_generation(tmp_path, capsys):
    root = str(tmp_path / "s")
    committed_store(root, 1)
    assert main(["restore", "--store", root, "--workdir", str(tmp_path / "w"), "--gen", "99", *SMALL]) == 1
    assert "NotFound" in capsys.readouterr().err


def test_usage_errors(tmp_path, monkeypatch):
    monkeypatch.delenv("GENCKPT_STORE", raising=False)
    with pytest.raises(SystemExit) as e:
        main(["inspect"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_precious_flags_change_what_is_saved(tmp_path):
    paths = {k: str(tmp_path / f"{k}.json") for k in ("keep", "drop", "none")}
    assert main(["bench", "--record", paths["keep"], "--precious-prefix", "tmp_", "--ckpt-enable"]) == 0
    assert main(["bench", "--record", paths["drop"], "--no-ckpt-enable"]) == 0
    assert main(["bench", "--record", paths["none"], "--precious-prefix", "nothing_"]) == 0
    saved = {k: [r["precious_bytes"] for r in json.load(open(p))["reports"]] for k, p in paths.items()}
    # deleted temporaries are only retained while checkpointing is enabled for them
    assert saved["keep"][-1] > saved["drop"][-1] > 0
    assert saved["none"] == [0] * 5


def test_faultsweep(tmp_path, capsys):
    sc = tmp_path / "sc.ini"
    sc.write_text("[scenario]\nimage_sizes = 4KiB, 64KiB\nprecious_sizes = 1KiB x 3\nn_random = 5\n")
    out = tmp_path / "v.csv"
    assert main(["faultsweep", "--scenario", str(sc), "--csv", str(out)]) == 0
    assert "failures=0" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 1 + 10 + 5
    # the in-place baseline fails somewhere but the sweep itself succeeded
    assert main(["faultsweep", "--scenario", str(sc), "--mode", "overwrite"]) == 0
    assert "failures=0" not in capsys.readouterr().out
