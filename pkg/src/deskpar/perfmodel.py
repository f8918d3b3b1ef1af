"""Analytic memory and step-time estimates, and ledger reports.

All estimates are for the most loaded rank. Collective times follow the ring
model ``(W - 1) * alpha + (W - 1) / W * bytes / bandwidth`` where ``bytes`` is
the full (gathered) payload; all-reduce costs twice that.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from importlib import resources

import jsonschema

from . import pipeline as pl
from .model import ModelConfig, block_param_shapes
from .simruntime import CostLedger

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ParallelSpec:
    dp_shard: int = 1
    dp_replicate: int = 1
    tp: int = 1
    cp: int = 1
    pp: int = 1
    schedule: str = "1f1b"
    microbatches: int = 1
    stages_per_rank: int = 1
    split_points: tuple[str, ...] = ()  # empty: even split of the blocks
    ac_mode: str = "none"  # none | full | op | an integer k as a string
    param_bytes: int = 8
    compute_bytes: int = 8
    reduce_bytes: int = 8
    local_batch: int = 1
    loss_parallel: bool = False
    async_tp_chunks: int = 1
    reshard_after_forward: bool = True
    alpha: float = 1e-6
    bandwidth: float = 100e9
    flops_per_s: float = 100e12

    def __post_init__(self):
        for name in ("dp_shard", "dp_replicate", "tp", "cp", "pp", "microbatches", "stages_per_rank",
                     "local_batch", "async_tp_chunks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.schedule not in pl.SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def world_size(self) -> int:
        return self.dp_shard * self.dp_replicate * self.tp * self.cp * self.pp

    @property
    def num_stages(self) -> int:
        return self.pp * self.stages_per_rank


@dataclass(frozen=True)
class MemoryBreakdown:
    params_resident: int
    grads: int
    optimizer_state: int
    activations_peak: int
    transient_unsharded: int

    @property
    def total(self) -> int:
        return (self.params_resident + self.grads + self.optimizer_state + self.activations_peak
                + self.transient_unsharded)

    def to_json(self) -> dict:
        return {**asdict(self), "total": self.total}


# --------------------------------------------------------------------------
# parameter placement (mirrors the sharding rules of the engine)


_COLWISE = ("wq", "wk", "wv", "w1", "w3")
_ROWWISE = ("wo", "w2")


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    out = {"tok_embeddings.weight": (cfg.vocab_size, cfg.dim)}
    for i in range(cfg.n_layers):
        out.update({f"layers.{i}.{k}": v for k, v in block_param_shapes(cfg).items()})
    out["norm.weight"] = (cfg.dim,)
    out["output.weight"] = (cfg.dim, cfg.vocab_size)
    return out


def _tp_dim(fqn: str, tp: int) -> int | None:
    if tp == 1:
        return None
    leaf = fqn.split(".")[-2]
    if fqn == "output.weight" or leaf in _COLWISE:
        return 1
    if fqn == "tok_embeddings.weight" or leaf in _ROWWISE:
        return 0
    return None


def local_numel(fqn: str, shape: tuple[int, ...], spec: ParallelSpec) -> int:
    """Largest per-rank element count of one parameter."""
    tdim = _tp_dim(fqn, spec.tp)
    fdim = next(d for d in range(len(shape)) if d != tdim)
    w = spec.dp_shard * spec.cp
    n = 1
    for d, e in enumerate(shape):
        if d == tdim:
            e //= spec.tp
        if d == fdim:
            e = -(-e // w)
        n *= e
    return n


def _stages(cfg: ModelConfig, spec: ParallelSpec) -> list[list[str]]:
    modules = ["tok_embeddings", *(f"layers.{i}" for i in range(cfg.n_layers)), "norm", "output"]
    if spec.num_stages == 1:
        return [modules]
    points = spec.split_points or pl.even_split_points(cfg.n_layers, spec.num_stages)
    if len(points) + 1 != spec.num_stages:
        raise ValueError(f"{len(points)} split points for {spec.num_stages} stages")
    cuts = [modules.index(p) for p in points]
    bounds = [0, *cuts, len(modules)]
    return [modules[a:b] for a, b in zip(bounds, bounds[1:])]


def _module(fqn: str) -> str:
    parts = fqn.split(".")
    return ".".join(parts[:2]) if parts[0] == "layers" else parts[0]


def _rank_modules(cfg: ModelConfig, spec: ParallelSpec) -> list[list[str]]:
    stages = _stages(cfg, spec)
    return [[m for s in range(r, len(stages), spec.pp) for m in stages[s]] for r in range(spec.pp)]


def param_bytes_per_rank(cfg: ModelConfig, spec: ParallelSpec) -> int:
    shapes = _param_shapes(cfg)
    best = 0
    for mods in _rank_modules(cfg, spec):
        n = sum(local_numel(f, s, spec) for f, s in shapes.items() if _module(f) in mods)
        best = max(best, n)
    return best * spec.param_bytes


# --------------------------------------------------------------------------
# memory


def _block_activation_bytes(cfg: ModelConfig, spec: ParallelSpec, mb: int, policy: str) -> int:
    """Saved bytes of one transformer block for one microbatch."""
    s = cfg.seq_len // spec.cp
    t = mb * s
    tl = t // spec.tp
    d, f, tp, cb = cfg.dim, cfg.ffn_hidden, spec.tp, spec.compute_bytes
    heads = cfg.n_heads // tp
    inp = tl * d
    if policy == "input":
        return inp * cb
    ops = 2 * t * d // tp + t * f // tp + t * d + t * d // tp  # wq, wv, w1, w2, attention output
    if policy == "ops":
        return (inp + ops) * cb
    gathered = 2 * t * d if tp > 1 else 0  # sequence-parallel gathers alias their input at tp=1
    full = (4 * tl * d + gathered + 6 * t * d // tp + 3 * t * f // tp + t * d) * cb
    full += s * cfg.head_dim * 8  # rotary table
    if spec.cp > 1:
        full += t * heads * cb  # log-sum-exp of ring attention
    return full


def _policy(ac_mode: str, layer: int) -> str:
    if ac_mode == "none":
        return "all"
    if ac_mode == "full":
        return "input"
    if ac_mode == "op":
        return "ops"
    return "input" if layer % int(ac_mode) == 0 else "all"


def activation_bytes_peak(cfg: ModelConfig, spec: ParallelSpec) -> int:
    m = spec.microbatches
    if spec.local_batch % m:
        raise ValueError("local_batch must be divisible by microbatches")
    mb = spec.local_batch // m
    s = cfg.seq_len // spec.cp
    t = mb * s
    cb = spec.compute_bytes
    if spec.pp > 1:
        sched = pl.make_schedule(spec.schedule, spec.pp, spec.num_stages, m)
        inflight = pl.bubble_analysis(sched)["peak_inflight_microbatches"]
    else:
        inflight = 1
    best = 0
    for mods in _rank_modules(cfg, spec):
        layers = [int(x.split(".")[1]) for x in mods if x.startswith("layers.")]
        kept = [_block_activation_bytes(cfg, spec, mb, _policy(spec.ac_mode, i)) for i in layers]
        saved = sum(kept)
        ids = t * 8 if "tok_embeddings" in mods else 0
        head = 0
        if "norm" in mods:
            head += t // spec.tp * cfg.dim * cb
        if "output" in mods:
            v = cfg.vocab_size // spec.tp if spec.loss_parallel else cfg.vocab_size
            head += t * cfg.dim * cb + t * v * cb
            if spec.loss_parallel:
                head += t * v * cb
        per_mb = saved + ids + head
        # block n is recomputed in backward after the head and the later blocks were freed
        full = _block_activation_bytes(cfg, spec, mb, "all")
        backward = max([0] + [sum(kept[:n]) + full + ids for n in range(len(kept))])
        # in-flight counts (stage, microbatch) pairs; use the rank's mean stage
        best = max(best, per_mb * inflight // spec.stages_per_rank + max(0, backward - per_mb))
    return best


def transient_bytes(cfg: ModelConfig, spec: ParallelSpec) -> int:
    """Unsharded parameters held at once by FSDP."""
    if spec.dp_shard * spec.cp == 1:
        return 0
    shapes = _param_shapes(cfg)
    unsharded = ParallelSpec(tp=spec.tp)
    best = 0
    for mods in _rank_modules(cfg, spec):
        per = {mod: sum(local_numel(f, s, unsharded) for f, s in shapes.items() if _module(f) == mod)
               for mod in mods}
        if spec.pp > 1 or not spec.reshard_after_forward:
            need = sum(per.values())
        else:
            # one unit at a time, except the last unit stays gathered into backward
            need = max(max(per.values()), per[mods[-1]] + (per[mods[-2]] if len(mods) > 1 else 0))
        best = max(best, need)
    return best * spec.compute_bytes


def estimate_memory(cfg: ModelConfig, spec: ParallelSpec) -> MemoryBreakdown:
    p = param_bytes_per_rank(cfg, spec)
    return MemoryBreakdown(params_resident=p, grads=p, optimizer_state=p,
                           activations_peak=activation_bytes_peak(cfg, spec),
                           transient_unsharded=transient_bytes(cfg, spec))


# --------------------------------------------------------------------------
# time


def collective_time(kind: str, nbytes: float, world: int, alpha: float = 1e-6, bandwidth: float = 100e9) -> float:
    if world <= 1:
        return 0.0
    t = (world - 1) * alpha + (world - 1) / world * nbytes / bandwidth
    return 2 * t if kind == "all_reduce" else t


def p2p_time(nbytes: float, alpha: float = 1e-6, bandwidth: float = 100e9) -> float:
    return alpha + nbytes / bandwidth


def latency_crossover_world(nbytes: float, alpha: float = 1e-6, bandwidth: float = 100e9) -> int:
    """Smallest ring size at which the latency term of a collective on ``nbytes``
    matches or exceeds its bandwidth term: (W-1)a >= (W-1)/W * n/B, i.e. W >= n/(aB)."""
    return max(2, math.ceil(nbytes / (alpha * bandwidth)))


def fsdp_crossover_world(cfg: ModelConfig, spec: ParallelSpec) -> int:
    """Data-parallel size beyond which per-block FSDP all-gathers become latency bound."""
    block = sum(local_numel(f"layers.0.{k}", v, dataclasses.replace(spec, dp_shard=1, cp=1))
                for k, v in block_param_shapes(cfg).items())
    return latency_crossover_world(block * spec.compute_bytes, spec.alpha, spec.bandwidth)


def _forward_flops(cfg: ModelConfig, spec: ParallelSpec, tokens: int, layers: int, head: bool) -> float:
    d, f, s = cfg.dim, cfg.ffn_hidden, cfg.seq_len
    per_token = layers * (2 * (4 * d * d + 3 * d * f) + 2 * s * d)  # causal attention averages s/2 keys
    if head:
        per_token += 2 * d * cfg.vocab_size
    return per_token * tokens / spec.tp


def estimate_step_time(cfg: ModelConfig, spec: ParallelSpec) -> dict[str, float]:
    """Seconds per optimizer step: ``compute + exposed_comm + bubble = total``."""
    a, bw = spec.alpha, spec.bandwidth
    m = spec.microbatches
    mb = spec.local_batch // m
    s = cfg.seq_len // spec.cp
    t = mb * s
    layers_per_stage = cfg.n_layers / spec.num_stages
    V = spec.stages_per_rank
    ac_extra = {"none": 0.0, "full": 1.0, "op": 0.5}.get(spec.ac_mode, None)
    if ac_extra is None:
        ac_extra = 1.0 / int(spec.ac_mode)
    # per-microbatch, per-stage forward flops (output head charged evenly)
    f_stage = _forward_flops(cfg, spec, t, 0, False) + _forward_flops(
        cfg, spec, t, cfg.n_layers, True) / spec.num_stages
    f_time = f_stage / spec.flops_per_s
    b_time = (2 + ac_extra) * f_time
    compute = m * V * (f_time + b_time)

    # tensor parallel: 4 collectives forward + 4 backward per block, on the full activations
    act = t * cfg.dim * spec.compute_bytes
    tp_block = 8 * collective_time("all_gather", act, spec.tp, a, bw)
    tp_total = m * V * layers_per_stage * tp_block
    tp_exposed = tp_total / spec.async_tp_chunks
    # context parallel: K/V all-gather forward and backward, dK/dV reduce-scatter
    kv = 2 * t * spec.cp * cfg.dim // spec.tp * spec.compute_bytes
    cp_block = 3 * collective_time("all_gather", kv, spec.cp, a, bw)
    cp_total = m * V * layers_per_stage * cp_block
    # data parallel
    params = param_bytes_per_rank(cfg, spec)
    w = spec.dp_shard * spec.cp
    unit = params / (layers_per_stage * V + 1) if params else 0.0
    fsdp_gather = collective_time("all_gather", params * w * spec.compute_bytes / spec.param_bytes, w, a, bw)
    fsdp_rs = collective_time("reduce_scatter", params * w * spec.reduce_bytes / spec.param_bytes, w, a, bw)
    unit_share = unit / params if params else 0.0
    fsdp_exposed = (fsdp_gather + fsdp_rs) * unit_share  # first gather and last reduce are not hidden
    hsdp = collective_time("all_reduce", params, spec.dp_replicate, a, bw)
    # pipeline point-to-point: every microbatch crosses each boundary twice
    act_local = t // spec.tp * cfg.dim * spec.compute_bytes
    pp_exposed = 2 * m * V * p2p_time(act_local, a, bw) if spec.pp > 1 else 0.0
    exposed = tp_exposed + cp_total + fsdp_exposed + hsdp + pp_exposed
    bubble = 0.0
    if spec.pp > 1:
        sched = pl.make_schedule(spec.schedule, spec.pp, spec.num_stages, m)
        frac = float(pl.bubble_analysis(sched, {"F": Fraction(1), "B": Fraction(2) + Fraction(ac_extra)})
                     ["bubble_fraction"])
        bubble = compute * frac / (1 - frac)
    total = compute + exposed + bubble
    return {"compute": compute, "exposed_comm": exposed, "bubble": bubble, "total": total,
            "tp_comm": tp_total, "cp_comm": cp_total, "fsdp_comm": _fsdp_time(fsdp_gather, fsdp_rs, spec),
            "pp_comm": pp_exposed}


def _fsdp_time(gather: float, reduce: float, spec: ParallelSpec) -> float:
    n = 1 if spec.pp > 1 or not spec.reshard_after_forward else 2
    return n * gather + reduce


# --------------------------------------------------------------------------
# reports


def report_schema() -> dict:
    text = resources.files("deskpar").joinpath("schemas/ledger_report.v1.json").read_text()
    return json.loads(text)


def ledger_report(ledger: CostLedger, estimate: MemoryBreakdown | None = None,
                  tokens_per_step: int | None = None) -> tuple[str, dict]:
    """Human-readable summary plus a schema-validated JSON document."""
    ranks = []
    for r in ledger.ranks:
        ranks.append({
            "rank": r.rank, "bytes_sent": r.bytes_sent, "bytes_received": r.bytes_received,
            "overlappable_bytes": r.overlappable_bytes,
            "collective_counts": dict(r.collective_counts), "bytes_by_kind": dict(r.bytes_by_kind),
            "bytes_by_label": dict(r.bytes_by_label),
            "parameter_bytes": r.parameter_bytes_resident, "gradient_bytes": r.gradient_bytes_resident,
            "optimizer_bytes": r.optimizer_bytes_resident, "activation_bytes_peak": r.activation_bytes_peak,
            "transient_bytes_peak": r.transient_bytes_peak,
        })
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "world_size": len(ranks), "ranks": ranks,
           "totals": {"bytes_sent": ledger.total_sent, "bytes_received": ledger.total_received,
                      "conserved": ledger.conserved()}}
    if tokens_per_step is not None:
        doc["totals"]["tokens_per_step"] = int(tokens_per_step)
    if estimate is not None:
        worst = {k: max(x[k] for x in ranks) for k in ("parameter_bytes", "gradient_bytes", "optimizer_bytes",
                                                       "activation_bytes_peak", "transient_bytes_peak")}
        est = estimate.to_json()
        pairs = {"parameter_bytes": "params_resident", "gradient_bytes": "grads",
                 "optimizer_bytes": "optimizer_state", "activation_bytes_peak": "activations_peak",
                 "transient_bytes_peak": "transient_unsharded"}
        doc["estimate"] = {"memory": est, "comparison": [
            {"quantity": k, "measured": worst[k], "estimated": est[v],
             "rel_error": (abs(est[v] - worst[k]) / worst[k]) if worst[k] else 0.0}
            for k, v in pairs.items()]}
    jsonschema.validate(doc, report_schema())
    lines = [f"world size {len(ranks)}; bytes sent {ledger.total_sent}, received {ledger.total_received}"
             f" ({'conserved' if ledger.conserved() else 'NOT conserved'})"]
    if tokens_per_step is not None:
        lines.append(f"tokens per step {tokens_per_step}")
    lines.append(f"{'rank':>4} {'sent':>12} {'params':>10} {'grads':>10} {'optim':>10} {'act peak':>10}")
    for x in ranks:
        lines.append(f"{x['rank']:>4} {x['bytes_sent']:>12} {x['parameter_bytes']:>10} {x['gradient_bytes']:>10}"
                     f" {x['optimizer_bytes']:>10} {x['activation_bytes_peak']:>10}")
    if estimate is not None:
        lines.append("estimate vs measured (worst rank):")
        for c in doc["estimate"]["comparison"]:
            lines.append(f"  {c['quantity']:<22} est {c['estimated']:>10} meas {c['measured']:>10}"
                         f"  rel err {c['rel_error']:.3f}")
    return "\n".join(lines), doc
