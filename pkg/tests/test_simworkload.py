import json
import math

import pytest

from genckpt.bandwidth import BandwidthModel, ConstantCongestion
from genckpt.coordinator import Outcome
from genckpt.errors import UnknownPreset
from genckpt.fs import SimFS
from genckpt.scheduler import CkptPolicyCfg
from genckpt.simworkload import (
    TABLE_I,
    Pipeline,
    RunRecord,
    footprint_at,
    load_preset,
    output_digests,
    run_pipeline,
    temp_events,
)
from genckpt.store import GenerationStore

GiB = 1 << 30
PERIODIC = CkptPolicyCfg(mode="periodic", period=600)


def sim_store():
    fs = SimFS(bandwidth=BandwidthModel(1.5 * GiB, ConstantCongestion(1.0)))
    return GenerationStore("/ckpt", fs=fs)


@pytest.mark.parametrize("name,reads,bases", [("bog", 31.1, 4.5), ("spikein", 78.7, 11.8), ("rhizosphere", 193, 28.5)])
def test_table_i_presets(name, reads, bases):
    p = load_preset(name)
    assert (p.read_count_millions, p.base_count_billions) == (reads, bases)
    assert TABLE_I[name] == (reads, bases)


def test_unknown_preset():
    with pytest.raises(UnknownPreset):
        load_preset("soil")


def test_scaling_is_proportional():
    bog, rhizo = load_preset("bog"), load_preset("rhizosphere")
    assert rhizo.worker_footprint / bog.worker_footprint == pytest.approx(28.5 / 4.5, rel=1e-3)
    assert bog.driver_footprint < bog.worker_footprint
    assert load_preset("bog", 2000).worker_footprint == pytest.approx(bog.worker_footprint / 2, abs=1)


def test_stage_plan_shape():
    p = load_preset("bog")
    assert footprint_at(p, 0)[0] == "kmer_count"
    assert footprint_at(p, p.duration)[0] == "simplify"
    created = [e for e in temp_events(p) if e[2] == "create"]
    assert len(created) == 10
    assert sum(e[4].size for e in created) == pytest.approx(p.precious_total, rel=1e-6)


def test_five_checkpoints_with_growing_precious(tmp_path):
    rec = run_pipeline("bog", sim_store(), str(tmp_path), PERIODIC, seed=1)
    reports = rec.committed
    assert len(reports) == 5 and all(r.outcome is Outcome.COMMITTED for r in reports)
    sizes = [r.precious_bytes for r in reports]
    times = [r.precious_duration for r in reports]
    assert sizes == sorted(sizes) and times == sorted(times)


def test_deterministic_outputs(tmp_path):
    a = run_pipeline("bog", sim_store(), str(tmp_path / "a"), PERIODIC, seed=3)
    b = run_pipeline("bog", sim_store(), str(tmp_path / "b"), PERIODIC, seed=3)
    c = run_pipeline("bog", sim_store(), str(tmp_path / "c"), PERIODIC, seed=4)
    assert a.outputs == b.outputs == output_digests(str(tmp_path / "a"))
    assert a.outputs != c.outputs


def test_checkpointing_does_not_change_outputs(tmp_path):
    with_ckpt = run_pipeline("bog", sim_store(), str(tmp_path / "a"), PERIODIC, seed=2)
    without = run_pipeline("bog", sim_store(), str(tmp_path / "b"), CkptPolicyCfg(mode="walltime_only"), seed=2)
    assert without.committed == [] and with_ckpt.outputs == without.outputs


def test_kill_and_restore_mid_run(tmp_path):
    want = run_pipeline("bog", sim_store(), str(tmp_path / "ref"), PERIODIC, seed=9).outputs
    store = sim_store()
    work = str(tmp_path / "w")
    killed = run_pipeline("bog", store, work, PERIODIC, seed=9, kill_at_tick=37)
    assert killed.killed and len(killed.committed) == 3
    survivor = GenerationStore("/ckpt", fs=store.fs.crash())
    resumed = run_pipeline("bog", survivor, work, PERIODIC, seed=9, resume_from="latest")
    assert resumed.restored_from == killed.committed[-1].generation.index
    assert resumed.outputs == want


def test_batch_chain_with_manual_checkpoints(tmp_path):
    want = run_pipeline("bog", sim_store(), str(tmp_path / "ref"), PERIODIC, seed=5).outputs
    store, work = sim_store(), str(tmp_path / "w")
    resume = None
    for stop in (13, 29, 44):
        rec = run_pipeline("bog", store, work, PERIODIC, seed=5, resume_from=resume, checkpoint_at_tick=stop)
        assert rec.reports[-1].outcome is Outcome.COMMITTED and rec.last_tick == stop
        resume = "latest"
    final = run_pipeline("bog", store, work, PERIODIC, seed=5, resume_from="latest")
    assert final.outputs == want


def test_degenerate_scale(tmp_path):
    rec = run_pipeline(load_preset("bog", math.inf), sim_store(), str(tmp_path), PERIODIC)
    assert len(rec.committed) == 5
    assert all(r.precious_bytes == 0 for r in rec.committed)
    assert rec.outputs


def test_real_store(tmp_path):
    store = GenerationStore(str(tmp_path / "store"))
    pipe = Pipeline(load_preset("bog", 20000), store, str(tmp_path / "w"), PERIODIC, seed=0)
    rec = pipe.run()
    assert len(rec.committed) == 5
    assert store.latest_committed().index == rec.committed[-1].generation.index


def test_record_roundtrip(tmp_path):
    rec = run_pipeline("bog", sim_store(), str(tmp_path), PERIODIC, seed=1)
    back = RunRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert back.reports == rec.reports and back.outputs == rec.outputs
