import jsonschema
import pytest

from deskpar import model as mdl
from deskpar import parallelize as par
from deskpar import perfmodel as pm
from deskpar.simruntime import spawn_world
from deskpar.trainer import RankTrainer, TrainSpec

CFG = mdl.ModelConfig()
SMALL = mdl.ModelConfig(dim=32, n_layers=2, n_heads=2, vocab_size=64, seq_len=16, ffn_hidden=64)


def test_unsharded_params_equal_model_bytes():
    est = pm.estimate_memory(CFG, pm.ParallelSpec())
    assert est.params_resident == mdl.build_meta_model(CFG).nbytes()
    assert est.total == sum(v for k, v in est.to_json().items() if k != "total")


def test_doubling_dp_shard_halves_params():
    a = pm.estimate_memory(CFG, pm.ParallelSpec(dp_shard=2)).params_resident
    b = pm.estimate_memory(CFG, pm.ParallelSpec(dp_shard=4)).params_resident
    assert a == 2 * b


@pytest.mark.parametrize("tp", [1, 2, 4])
def test_params_nonincreasing_in_dp_shard(tp):
    vals = [pm.estimate_memory(CFG, pm.ParallelSpec(dp_shard=d, tp=tp)).params_resident for d in range(1, 17)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


@pytest.mark.parametrize("dp", [1, 3, 4])
def test_params_nonincreasing_in_tp(dp):
    vals = [pm.estimate_memory(CFG, pm.ParallelSpec(dp_shard=dp, tp=t)).params_resident for t in (1, 2, 4, 8)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_activation_estimate_orders_ac_modes():
    cfg = mdl.ModelConfig(n_layers=4)
    act = {m: pm.estimate_memory(cfg, pm.ParallelSpec(ac_mode=m, local_batch=2)).activations_peak
           for m in ("none", "op", "2", "full")}
    assert act["full"] < act["op"] < act["none"]
    assert act["full"] < act["2"] < act["none"]


def test_ring_collective_latency_is_linear_in_world():
    t = [pm.collective_time("all_gather", 0, w, alpha=1.0) for w in (2, 3, 4, 5)]
    assert t == [1.0, 2.0, 3.0, 4.0]


def test_bubble_nonincreasing_in_microbatches():
    cfg = mdl.ModelConfig(n_layers=8)
    vals = [pm.estimate_step_time(cfg, pm.ParallelSpec(pp=4, microbatches=m, local_batch=16))
            for m in (1, 2, 4, 8, 16)]
    fracs = [v["bubble"] / (v["bubble"] + v["compute"]) for v in vals]
    assert all(x >= y for x, y in zip(fracs, fracs[1:]))


def test_interleaving_beats_1f1b_at_16_stages():
    # compute-bound shapes; with the tiny model, p2p latency dominates instead
    big = mdl.ModelConfig(dim=1024, n_layers=32, n_heads=8, seq_len=2048, ffn_hidden=4096)
    one = pm.estimate_step_time(big, pm.ParallelSpec(pp=16, microbatches=4, local_batch=4))
    two = pm.estimate_step_time(big, pm.ParallelSpec(pp=16, microbatches=4, local_batch=4, stages_per_rank=2,
                                                     schedule="interleaved_1f1b"))
    assert two["total"] < one["total"]


def test_async_tp_credit_is_three_quarters_at_k4():
    base = pm.estimate_step_time(CFG, pm.ParallelSpec(tp=4, local_batch=2))
    k4 = pm.estimate_step_time(CFG, pm.ParallelSpec(tp=4, local_batch=2, async_tp_chunks=4))
    assert base["exposed_comm"] - k4["exposed_comm"] == pytest.approx(0.75 * base["tp_comm"], rel=1e-12)


def test_latency_crossover_scales_with_alpha_and_bandwidth():
    n = 1e6
    w = pm.latency_crossover_world(n, alpha=1e-6, bandwidth=1e9)
    assert w == 1000
    assert pm.collective_time("all_gather", n, w, 1e-6, 1e9) == pytest.approx(2 * (w - 1) * 1e-6, rel=1e-12)
    assert pm.latency_crossover_world(n, alpha=2e-6, bandwidth=1e9) == 500
    assert pm.latency_crossover_world(n, alpha=1e-6, bandwidth=2e9) == 500
    small = pm.fsdp_crossover_world(CFG, pm.ParallelSpec())
    assert small < pm.fsdp_crossover_world(mdl.ModelConfig(dim=1024, n_heads=8, ffn_hidden=4096), pm.ParallelSpec())
    assert pm.fsdp_crossover_world(CFG, pm.ParallelSpec(tp=2)) <= small


def test_step_time_parts_sum_to_total():
    t = pm.estimate_step_time(CFG, pm.ParallelSpec(dp_shard=2, tp=2, pp=2, microbatches=2, local_batch=2))
    assert t["total"] == pytest.approx(t["compute"] + t["exposed_comm"] + t["bubble"], rel=1e-15)


def _run(dims, steps=1, **kw):
    spec = TrainSpec(model=SMALL, dims=dims, **kw).resolved()

    def entry(ctx):
        tr = RankTrainer(spec)
        for _ in range(steps):
            tr.step()

    return spawn_world(spec.dims.world_size, entry).ledger


@pytest.mark.parametrize("fsdp", [1, 2, 4])
def test_estimate_matches_ledger_for_fsdp(fsdp):
    ledger = _run(par.ParallelDims(world_size=fsdp))
    est = pm.estimate_memory(SMALL, pm.ParallelSpec(dp_shard=fsdp, local_batch=2))
    _, doc = pm.ledger_report(ledger, est, tokens_per_step=2 * fsdp * SMALL.seq_len)
    rows = {c["quantity"]: c for c in doc["estimate"]["comparison"]}
    assert rows["parameter_bytes"]["rel_error"] <= 0.1
    assert rows["gradient_bytes"]["rel_error"] <= 0.1
    assert doc["totals"]["conserved"]
    if fsdp > 1:
        kinds = doc["ranks"][0]["bytes_by_kind"]
        assert kinds["all_gather"] > 0 and kinds["reduce_scatter"] > 0


def test_report_round_trips_through_schema():
    ledger = _run(par.ParallelDims(world_size=2))
    text, doc = pm.ledger_report(ledger, tokens_per_step=64)
    jsonschema.validate(doc, pm.report_schema())
    assert "tokens per step 64" in text
    doc["ranks"][0]["bogus"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, pm.report_schema())


def test_report_shows_ac_reduction():
    cfg = mdl.ModelConfig(dim=32, n_layers=4, n_heads=2, vocab_size=64, seq_len=16, ffn_hidden=64)
    peaks = []
    for ac in (par.ACConfig(), par.ACConfig("full")):
        spec = TrainSpec(model=cfg, ac=ac)
        led = spawn_world(1, lambda ctx: RankTrainer(spec).step()).ledger
        peaks.append(pm.ledger_report(led)[1]["ranks"][0]["activation_bytes_peak"])
    assert peaks[1] < peaks[0]


@pytest.mark.parametrize("ac", [par.ACConfig(), par.ACConfig("full"), par.ACConfig("selective", "2"),
                                par.ACConfig("selective", "op")], ids=["none", "full", "k2", "op"])
def test_activation_estimate_tracks_ledger(ac):
    cfg = mdl.ModelConfig(dim=32, n_layers=4, n_heads=2, vocab_size=64, seq_len=16, ffn_hidden=64)
    spec = TrainSpec(model=cfg, ac=ac)
    led = spawn_world(1, lambda ctx: RankTrainer(spec).step()).ledger
    mode = ac.mode if ac.mode != "selective" else str(ac.selective_ac_type)
    est = pm.estimate_memory(cfg, pm.ParallelSpec(ac_mode=mode, local_batch=2)).activations_peak
    assert est == pytest.approx(led[0].activation_bytes_peak, rel=0.1)
