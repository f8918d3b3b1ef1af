"""SPMD transforms and the per-rank execution engine for model parts.

A :class:`ModelPart` owns a contiguous run of top-level modules
(``tok_embeddings``, ``layers.i``, ``norm``, ``output``). The ``apply_*``
functions record how it is parallelised; :meth:`ModelPart.materialize` then
creates sharded parameters straight from the counter-based initialiser.

Activation layouts inside a part (``b`` batch, ``s`` the CP-local sequence):

* residual stream ``[b, s / tp, dim]`` (sequence parallel when tp > 1)
* attention / MLP interiors ``[b, s, features / tp]``
* logits ``[b, s, vocab / tp]`` with loss parallel, ``[b, s, vocab]`` otherwise

Parameter DTensors live on a 3-D mesh ``(dp_replicate, dp_shard_cp, tp)``:
Replicate across replicas, Shard along the FSDP dim, and the TP placement.
"""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import contextparallel as cp_mod
from . import ndtensor as nt
from .dtensor import (DTensor, Partial, Placement, PlacementError, Replicate, Shard, gather_shards,
                      local_region, shard_range, vocab_parallel_lookup, vocab_parallel_lookup_backward)
from .model import MetaModel, freqs_cis
from .simruntime import DeviceMesh, current

MESH_DIMS = ("pp", "dp_replicate", "dp_shard", "cp", "tp")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ParallelDims:
    dp_shard: int = -1
    dp_replicate: int = 1
    cp: int = 1
    tp: int = 1
    pp: int = 1
    world_size: int = 1

    def resolve(self) -> "ParallelDims":
        others = self.dp_replicate * self.cp * self.tp * self.pp
        for name in ("dp_replicate", "cp", "tp", "pp"):
            if getattr(self, name) < 1:
                raise ValueError(f"parallelism degree {name} must be >= 1")
        shard = self.dp_shard
        if shard == -1:
            if self.world_size % others:
                raise ValueError(f"world size {self.world_size} not divisible by "
                                 f"dp_replicate*cp*tp*pp = {others}")
            shard = self.world_size // others
        if shard < 1:
            raise ValueError("dp_shard must be -1 or >= 1")
        dims = ParallelDims(shard, self.dp_replicate, self.cp, self.tp, self.pp, self.world_size)
        if dims.product != self.world_size:
            raise ValueError(f"dp_replicate*dp_shard*cp*tp*pp = {dims.product} != world size {self.world_size}")
        return dims

    @property
    def product(self) -> int:
        return self.dp_shard * self.dp_replicate * self.cp * self.tp * self.pp

    @property
    def dp(self) -> int:
        return self.dp_shard * self.dp_replicate

    def mesh(self) -> DeviceMesh:
        d = self.resolve()
        shape = (d.pp, d.dp_replicate, d.dp_shard, d.cp, d.tp)
        return DeviceMesh(np.arange(d.world_size).reshape(shape), MESH_DIMS)


@dataclass(frozen=True)
class DataParallelConfig:
    shard_degree: int = -1
    replicate_degree: int = 1
    param_compute_dtype: str = "F64"
    reduce_dtype: str = "F64"
    reshard_after_forward: bool = True


@dataclass(frozen=True)
class ACConfig:
    mode: str = "none"  # none | full | selective
    selective_ac_type: str = "op"  # "op" or a positive integer k

    def __post_init__(self):
        if self.mode not in ("none", "full", "selective"):
            raise ValueError(f"activation_checkpoint.mode must be none/full/selective, got {self.mode!r}")
        if self.mode == "selective" and str(self.selective_ac_type) != "op":
            try:
                k = int(self.selective_ac_type)
            except ValueError:
                raise ValueError(f"selective_ac_type must be 'op' or an integer, got "
                                 f"{self.selective_ac_type!r}") from None
            if k <= 0:
                raise ValueError("selective_ac_type k must be >= 1")

    def policy(self, layer: int) -> str:
        """What block ``layer`` keeps for backward: all, input or ops."""
        if self.mode == "none":
            return "all"
        if self.mode == "full":
            return "input"
        if str(self.selective_ac_type) == "op":
            return "ops"
        return "input" if layer % int(self.selective_ac_type) == 0 else "all"


@dataclass(frozen=True)
class Float8Config:
    enabled: bool = False
    strategy: str = "dynamic"  # dynamic | delayed | static
    static_scale: float = 1.0
    amax_history_len: int = 16

    def __post_init__(self):
        if self.strategy not in ("dynamic", "delayed", "static"):
            raise ValueError(f"float8.strategy must be dynamic/delayed/static, got {self.strategy!r}")
        if self.static_scale <= 0:
            raise ValueError("float8.static_scale must be positive")
        if self.amax_history_len < 1:
            raise ValueError("float8.amax_history_len must be >= 1")


LAYER_TP_PLAN = {
    "attention_norm": "sequence_parallel",
    "attention": "prepare_input",
    "attention.wq": "colwise",
    "attention.wk": "colwise",
    "attention.wv": "colwise",
    "attention.wo": "rowwise",
    "ffn_norm": "sequence_parallel",
    "feed_forward": "prepare_input",
    "mlp.w1": "colwise",
    "mlp.w2": "rowwise",
    "mlp.w3": "colwise",
}
MODEL_TP_PLAN = {"tok_embeddings": "rowwise", "norm": "sequence_parallel", "output": "colwise"}


def default_tp_plan() -> dict[str, str]:
    return {**MODEL_TP_PLAN, **{f"layers.*.{k}": v for k, v in LAYER_TP_PLAN.items()}}


# --------------------------------------------------------------------------
# standalone numerics: loss parallel, chunked TP, float8


def loss_parallel_ce_local(logits: np.ndarray, targets: np.ndarray, vocab_lo: int, vocab_size: int,
                           tp_group: Sequence[int]) -> tuple[float, tuple]:
    """Mean cross entropy of vocab-sharded ``logits[N, V/tp]`` without gathering them."""
    targets = np.asarray(targets).reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= vocab_size):
        raise IndexError("loss parallel: target index outside the global vocabulary")
    ctx = current()
    n, v_loc = logits.shape
    local_max = logits.max(axis=1) if v_loc else np.full(n, -np.inf, dtype=logits.dtype)
    gmax = ctx.all_reduce(local_max, tp_group, "max", label="loss_parallel_max")
    e = np.exp(logits - gmax[:, None])
    sum_exp = ctx.all_reduce(e.sum(axis=1), tp_group, "sum", label="loss_parallel_sumexp")
    mine = (targets >= vocab_lo) & (targets < vocab_lo + v_loc)
    tgt = np.zeros(n, dtype=logits.dtype)
    tgt[mine] = logits[np.nonzero(mine)[0], targets[mine] - vocab_lo]
    tgt = ctx.all_reduce(tgt, tp_group, "sum", label="loss_parallel_target")
    loss = float(np.mean(np.log(sum_exp) + gmax - tgt))
    if not math.isfinite(loss):
        raise nt.NonFiniteError("loss parallel: non-finite loss")
    return loss, (e, sum_exp, mine, targets, vocab_lo)


def loss_parallel_ce_backward(cache: tuple, d_loss: float = 1.0) -> np.ndarray:
    e, sum_exp, mine, targets, vocab_lo = cache
    g = e / sum_exp[:, None]
    g[np.nonzero(mine)[0], targets[mine] - vocab_lo] -= 1.0
    return g * (d_loss / e.shape[0])


def loss_parallel_ce(logits: DTensor, targets: np.ndarray) -> tuple[float, Callable[[float], DTensor]]:
    """Loss on ``logits`` sharded on the vocab (last) dim over a 1-D mesh.

    Returns the loss and a backward function producing a DTensor gradient with
    the same placement.
    """
    last = len(logits.global_shape) - 1
    if logits.mesh.ndim != 1 or logits.placements[0] not in (Shard(last), Replicate()):
        raise PlacementError(f"loss parallel needs logits Shard({last}) on a 1-D mesh")
    group = tuple(int(r) for r in logits.mesh.ranks)
    if logits.placements[0] == Replicate():
        group = (current().rank,)
    lo = logits.region()[last].start
    flat = logits.local.reshape(-1, logits.local.shape[-1])
    loss, cache = loss_parallel_ce_local(flat, targets, lo, logits.global_shape[-1], group)

    def backward(d_loss: float = 1.0) -> DTensor:
        g = loss_parallel_ce_backward(cache, d_loss).reshape(logits.local.shape)
        return DTensor(g, logits.mesh, logits.placements, logits.global_shape)

    return loss, backward


def _chunk_bounds(n: int, chunks: int) -> list[tuple[int, int]]:
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    return [shard_range(n, chunks, c) for c in range(chunks)]


def chunked_all_gather(x: np.ndarray, group: Sequence[int], dim: int, chunks: int = 1,
                       label: str = "tp_all_gather") -> np.ndarray:
    """All-gather along ``dim`` in ``chunks`` slices; all but the last slice are overlappable."""
    group = tuple(group)
    if len(group) == 1:
        return x
    ctx = current()
    bounds = _chunk_bounds(x.shape[dim], chunks)
    pieces = []
    for c, (a, b) in enumerate(bounds):
        part = np.take(x, np.arange(a, b), axis=dim)
        pieces.append(np.split(ctx.all_gather(part, group, dim=dim, label=label,
                                              overlappable=c < chunks - 1), len(group), axis=dim))
    return np.concatenate([pieces[c][j] for j in range(len(group)) for c in range(len(bounds))], axis=dim)


def chunked_reduce_scatter(x: np.ndarray, group: Sequence[int], dim: int, chunks: int = 1,
                           label: str = "tp_reduce_scatter") -> np.ndarray:
    """Reduce-scatter (sum) along ``dim`` in ``chunks`` slices of every destination block."""
    group = tuple(group)
    if len(group) == 1:
        return x
    ctx = current()
    w = len(group)
    if x.shape[dim] % w:
        raise ValueError(f"sequence extent {x.shape[dim]} not divisible by tp {w}")
    n = x.shape[dim] // w
    outs = []
    for c, (a, b) in enumerate(_chunk_bounds(n, chunks)):
        rows = np.concatenate([np.arange(j * n + a, j * n + b) for j in range(w)])
        outs.append(ctx.reduce_scatter(np.take(x, rows, axis=dim), group, dim=dim, label=label,
                                       overlappable=c < chunks - 1))
    return np.concatenate(outs, axis=dim)


def chunked_tp_matmul(x: DTensor, w: DTensor, chunks: int, style: str = "colwise") -> DTensor:
    """TP matmul with its collective split into ``chunks`` pieces (AsyncTP numerics).

    colwise: ``x`` Shard(0) (sequence parallel rows), ``w`` Shard(1) -> out Shard(last).
    rowwise: ``x`` Shard(last), ``w`` Shard(0) -> out Shard(0) (reduce-scattered rows).
    Each chunk's matmul runs separately; results are bit-identical to ``chunks=1``.
    """
    if chunks < 1:
        raise ValueError("chunks must be >= 1")
    if x.mesh != w.mesh or x.mesh.ndim != 1:
        raise PlacementError("chunked_tp_matmul needs both operands on one 1-D mesh")
    group = tuple(int(r) for r in x.mesh.ranks)
    last = len(x.global_shape) - 1
    out_shape = (*x.global_shape[:-1], w.global_shape[1])
    if style == "colwise":
        if x.placements[0] != Shard(0) or w.placements[0] != Shard(1):
            raise PlacementError("colwise chunked matmul needs x Shard(0), w Shard(1)")
        if len(group) > 1 and x.global_shape[0] % len(group):
            raise ValueError("chunked colwise matmul needs rows divisible by the group size")
        full = chunked_all_gather(x.local, group, 0, chunks)
        rows = _chunk_bounds(full.shape[0], chunks)
        out = np.concatenate([nt.matmul(full[a:b], w.local) for a, b in rows], axis=0)
        return DTensor(out, x.mesh, [Shard(last)], out_shape)
    if style == "rowwise":
        if x.placements[0] != Shard(last) or w.placements[0] != Shard(0):
            raise PlacementError("rowwise chunked matmul needs x Shard(last), w Shard(0)")
        rows = _chunk_bounds(x.local.shape[0], chunks)
        partial = np.concatenate([nt.matmul(x.local[a:b], w.local) for a, b in rows], axis=0)
        return DTensor(chunked_reduce_scatter(partial, group, 0, chunks), x.mesh, [Shard(0)], out_shape)
    raise PlacementError(f"unknown style {style!r}")


def e4m3_scale(amax: float) -> float:
    """Per-tensor scale mapping ``amax`` onto the largest e4m3 value."""
    return float(nt.E4M3_MAX / max(float(amax), 1e-12))


def quantize_dequantize(x: np.ndarray, scale: float) -> np.ndarray:
    return (nt.quantize_e4m3(x * scale).astype(np.float64) / scale).astype(np.float32)


class Float8State:
    """Scales for one float8 linear: dynamic, delayed (amax history) or static."""

    def __init__(self, cfg: Float8Config):
        self.cfg = cfg
        self.history: dict[str, collections.deque] = {}

    def scale(self, key: str, amax: float) -> float:
        cfg = self.cfg
        if cfg.strategy == "static":
            return cfg.static_scale
        if cfg.strategy == "dynamic":
            return e4m3_scale(amax)
        hist = self.history.get(key)
        if hist is None:
            hist = self.history[key] = collections.deque([amax], maxlen=cfg.amax_history_len)
        return e4m3_scale(max(hist))

    def observe(self, key: str, amax: float) -> None:
        if self.cfg.strategy == "delayed":
            self.history[key].append(amax)


def float8_linear(x: np.ndarray, w: np.ndarray, cfg: Float8Config | Float8State,
                  key: str = "linear", amax_group: Sequence[int] | None = None,
                  scales: tuple[float, float] | None = None, x_sharded: bool = False) -> tuple[np.ndarray, tuple]:
    """``x @ w`` with both operands quantised per tensor to emulated e4m3.

    The matmul runs in float32 on dequantised values. Returns the output in
    ``x``'s dtype and a cache ``(xq, wq, scales)`` for the straight-through
    backward. ``amax_group`` all-reduces the weight amax over TP shards, and
    the input amax too when ``x_sharded`` (rowwise inputs).
    """
    state = cfg if isinstance(cfg, Float8State) else Float8State(cfg)
    if scales is None:
        amax_x = float(np.max(np.abs(x))) if x.size else 0.0
        amax_w = float(np.max(np.abs(w))) if w.size else 0.0
        if amax_group is not None and len(amax_group) > 1:
            both = current().all_reduce(np.array([amax_x if x_sharded else 0.0, amax_w]), amax_group, "max",
                                        label="float8_amax")
            amax_x = float(both[0]) if x_sharded else amax_x
            amax_w = float(both[1])
        scales = (state.scale(key + ":x", amax_x), state.scale(key + ":w", amax_w))
        if state.cfg.strategy == "delayed":
            state.observe(key + ":x", amax_x)
            state.observe(key + ":w", amax_w)
    xq = quantize_dequantize(x, scales[0])
    wq = quantize_dequantize(w, scales[1])
    out = nt.matmul(xq, wq).astype(x.dtype)
    return out, (xq, wq, scales)


def float8_linear_backward(d_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray]:
    xq, wq, _ = cache
    d32 = d_out.astype(np.float32)
    return (nt.matmul_backward_input(d32, wq).astype(d_out.dtype),
            nt.matmul_backward_weight(d32, xq).astype(d_out.dtype))


# --------------------------------------------------------------------------
# model part


def top_level_of(fqn: str) -> str:
    parts = fqn.split(".")
    return ".".join(parts[:2]) if parts[0] == "layers" else parts[0]


def _nbytes(obj, seen: set | None = None) -> int:
    """Bytes held by the arrays in ``obj``; views of one buffer count once."""
    seen = set() if seen is None else seen
    if isinstance(obj, np.ndarray):
        base = obj
        while isinstance(base.base, np.ndarray):
            base = base.base
        if id(base) in seen:
            return 0
        seen.add(id(base))
        return int(base.nbytes)
    if isinstance(obj, cp_mod.RingCache):
        return _nbytes([obj.q, obj.k, obj.v, obj.out, obj.lse], seen)
    if isinstance(obj, (list, tuple)):
        return sum(_nbytes(o, seen) for o in obj)
    if isinstance(obj, dict):
        return sum(_nbytes(o, seen) for o in obj.values())
    return 0


SAVED_OPS = ("wq", "wv", "w1", "w2", "sdpa")  # every other block matmul, plus attention


class ModelPart:
    """One rank's share of the model: a run of top-level modules plus parallel state."""

    def __init__(self, meta: MetaModel, modules: Sequence[str], mesh: DeviceMesh,
                 stage_index: int = 0, num_stages: int = 1):
        self.meta = meta
        self.cfg = meta.cfg
        known = meta.top_level()
        for m in modules:
            if m not in known:
                raise KeyError(f"unknown module {m!r}")
        self.modules = list(modules)
        self.fqns = [f for f in meta.fqns() if top_level_of(f) in self.modules]
        self.mesh = mesh
        self.stage_index = stage_index
        self.num_stages = num_stages
        rank = current().rank
        self.rank = rank
        self.tp_group = mesh.group("tp", rank) if "tp" in mesh.dim_names else (rank,)
        self.cp_group = mesh.group("cp", rank) if "cp" in mesh.dim_names else (rank,)
        self.shard_group = (mesh.flatten_group(("dp_shard", "cp"), rank)
                            if "dp_shard" in mesh.dim_names else (rank,))
        self.replicate_group = mesh.group("dp_replicate", rank) if "dp_replicate" in mesh.dim_names else (rank,)
        self.dp_degree = 1
        self.tp_placement: dict[str, Placement] = {f: Replicate() for f in self.fqns}
        self.fsdp_dim: dict[str, int] = {}
        self.dp_cfg: DataParallelConfig | None = None
        self.ac = ACConfig()
        self.float8: Float8State | None = None
        self.loss_parallel = False
        self.tp_chunks = 1
        self.cp_method = "allgather"
        self.params: dict[str, DTensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self._gathered: dict[str, dict[str, np.ndarray]] = {}
        self._caches: dict = {}
        self._deferred: dict = collections.defaultdict(list)
        self._acc: dict[str, np.ndarray] = {}
        self.reduce_per_unit = True
        self._resident: dict[str, int] = {}
        self.grad_scale = 1.0
        self.owns_input = "tok_embeddings" in self.modules
        self.owns_output = "output" in self.modules

    # -- properties --------------------------------------------------------

    @property
    def tp(self) -> int:
        return len(self.tp_group)

    @property
    def cp(self) -> int:
        return len(self.cp_group)

    @property
    def compute_dtype(self) -> np.dtype:
        return nt.DType.parse(self.dp_cfg.param_compute_dtype if self.dp_cfg else "F64").np

    @property
    def reduce_dtype(self) -> np.dtype:
        return nt.DType.parse(self.dp_cfg.reduce_dtype if self.dp_cfg else "F64").np

    @property
    def units(self) -> list[str]:
        return list(self.modules)

    def unit_fqns(self, unit: str) -> list[str]:
        return [f for f in self.fqns if top_level_of(f) == unit]

    def param_mesh(self) -> DeviceMesh:
        names = [n for n in ("dp_replicate", "dp_shard", "cp", "tp") if n in self.mesh.dim_names]
        sub = self.mesh.submesh(names, self.rank)
        if "dp_shard" in names and "cp" in names:
            sub = sub.flatten(("dp_shard", "cp"), "dp_shard_cp")
        return sub

    def placements(self, fqn: str) -> tuple[Placement, ...]:
        out = []
        for name in self.param_mesh().dim_names:
            if name in ("dp_shard_cp", "dp_shard", "cp") and fqn in self.fsdp_dim:
                out.append(Shard(self.fsdp_dim[fqn]))
            elif name == "tp":
                out.append(self.tp_placement[fqn])
            else:
                out.append(Replicate())
        return tuple(out)

    # -- setup -------------------------------------------------------------

    def materialize(self, master_seed: int) -> None:
        """Allocate and initialise this rank's parameter shards (no full tensors)."""
        mesh = self.param_mesh()
        coord = mesh.coordinate(self.rank)
        for fqn in self.fqns:
            spec = self.meta.params[fqn]
            placements = self.placements(fqn)
            region = local_region(spec.shape, mesh.shape, placements, coord)
            local = nt.init_param(fqn, spec.shape, master_seed, region=region, dtype=spec.dtype)
            self.params[fqn] = DTensor(local, mesh, placements, spec.shape)
        self.ledger.parameter_bytes_resident += sum(p.local.nbytes for p in self.params.values())

    @property
    def ledger(self):
        return current().ledger

    def state_dict(self) -> dict[str, DTensor]:
        return dict(self.params)

    # -- collectives helpers ------------------------------------------------

    def _sp_gather(self, x: np.ndarray) -> np.ndarray:
        return chunked_all_gather(x, self.tp_group, 1, self.tp_chunks, "tp_all_gather")

    def _sp_reduce_scatter(self, x: np.ndarray) -> np.ndarray:
        return chunked_reduce_scatter(x, self.tp_group, 1, self.tp_chunks, "tp_reduce_scatter")

    def _unshard(self, unit: str) -> dict[str, np.ndarray]:
        if unit in self._gathered:
            return self._gathered[unit]
        fqns = self.unit_fqns(unit)
        dt = self.compute_dtype
        locs = [self.params[f].local.astype(dt, copy=False) for f in fqns]
        w = len(self.shard_group)
        if w > 1:
            dims = [self.fsdp_dim[f] for f in fqns]
            extents = [self._full_extent(f) for f in fqns]
            padded = []
            for x, d, n in zip(locs, dims, extents):
                chunk = -(-n // w)
                pad = [(0, 0)] * x.ndim
                pad[d] = (0, chunk - x.shape[d])
                padded.append(np.pad(x, pad) if chunk != x.shape[d] else x)
            gathered = current().all_gather_coalesced(padded, self.shard_group, dims, label="fsdp_all_gather")
            locs = []
            for g, d, n in zip(gathered, dims, extents):
                chunk = -(-n // w)
                keep = np.concatenate([j * chunk + np.arange(b - a)
                                       for j, (a, b) in enumerate(shard_range(n, w, j) for j in range(w))])
                locs.append(np.take(g, keep, axis=d))
        out = dict(zip(fqns, locs))
        self.ledger.alloc_transient(sum(x.nbytes for x in locs) if w > 1 else 0)
        self._gathered[unit] = out
        return out

    def _full_extent(self, fqn: str) -> int:
        """Extent of the FSDP dim before FSDP sharding (TP never shards that dim)."""
        return self.meta.params[fqn].shape[self.fsdp_dim[fqn]]

    def _reshard(self, unit: str) -> None:
        g = self._gathered.pop(unit, None)
        if g is not None and len(self.shard_group) > 1:
            self.ledger.free_transient(sum(x.nbytes for x in g.values()))

    def _reduce_grads(self, fqns: Sequence[str]) -> None:
        """Sync accumulated full-over-dp gradients into sharded ``self.grads``."""
        fqns = [f for f in fqns if f in self._acc]
        if not fqns:
            return
        grads = [self._acc.pop(f) for f in fqns]
        if self.tp > 1:  # sequence-parallel norm weights hold per-shard partial sums
            sp = [i for i, f in enumerate(fqns) if f.endswith("norm.weight")]
            if sp:
                flat = np.concatenate([grads[i] for i in sp])
                flat = current().all_reduce(flat, self.tp_group, label="sp_norm_grad")
                for i, piece in zip(sp, np.split(flat, np.cumsum([grads[i].size for i in sp])[:-1])):
                    grads[i] = piece
        rd = self.reduce_dtype
        inv = 1.0 / self.dp_degree
        grads = [g.astype(rd) * inv if self.dp_degree > 1 else g.astype(rd, copy=False) for g in grads]
        w = len(self.shard_group)
        if w > 1:
            dims = [self.fsdp_dim[f] for f in fqns]
            padded = []
            for g, d in zip(grads, dims):
                chunk = -(-g.shape[d] // w)
                pad = [(0, 0)] * g.ndim
                pad[d] = (0, chunk * w - g.shape[d])
                padded.append(np.pad(g, pad) if chunk * w != g.shape[d] else g)
            outs = current().reduce_scatter_coalesced(padded, self.shard_group, dims, label="fsdp_reduce_scatter")
            grads = [np.take(o, np.arange(0, self.params[f].local.shape[d]), axis=d)
                     for o, f, d in zip(outs, fqns, dims)]
        if len(self.replicate_group) > 1:
            sizes = [g.size for g in grads]
            flat = current().all_reduce(np.concatenate([g.reshape(-1) for g in grads]),
                                        self.replicate_group, label="hsdp_all_reduce")
            grads = [p.reshape(g.shape) for p, g in zip(np.split(flat, np.cumsum(sizes)[:-1]), grads)]
        for f, g in zip(fqns, grads):
            g = g.astype(self.params[f].local.dtype, copy=False)
            self.grads[f] = g if f not in self.grads else self.grads[f] + g
        self._set_resident("gradient", sum(g.nbytes for g in self.grads.values()))

    def _accumulate(self, fqn: str, g: np.ndarray) -> None:
        self._acc[fqn] = g if fqn not in self._acc else self._acc[fqn] + g

    # -- linear helpers ------------------------------------------------------

    def _linear(self, key: str, x: np.ndarray, w: np.ndarray, acts: dict, scales: dict,
                rowwise: bool = False) -> np.ndarray:
        if self.float8 is None:
            return nt.matmul(x, w)
        out, cache = float8_linear(x, w, self.float8, key, self.tp_group, scales.get(key), rowwise)
        scales[key] = cache[2]
        acts["f8:" + key] = cache
        return out

    def _linear_backward(self, key: str, d_out: np.ndarray, x: np.ndarray, w: np.ndarray, acts: dict):
        """(d_x, weight-grad thunk)."""
        if self.float8 is None:
            return nt.matmul_backward_input(d_out, w), lambda: nt.matmul_backward_weight(d_out, x)
        cache = acts["f8:" + key]
        d_x, _ = float8_linear_backward(d_out, (cache[0], cache[1], cache[2]))
        return d_x, lambda: float8_linear_backward(d_out, cache)[1]

    # -- unit forwards -----------------------------------------------------

    def _positions(self, seq_local: int) -> np.ndarray:
        seq = seq_local * self.cp
        if self.cp == 1:
            return np.arange(seq)
        return cp_mod.local_positions(seq, self.cp, self.cp_group.index(self.rank))

    def _embed_forward(self, ids, W):
        table = W["tok_embeddings.weight"]
        if self.tp == 1:
            return nt.embedding_lookup(table, ids)
        lo = self.params["tok_embeddings.weight"].region()[0].start
        partial = vocab_parallel_lookup(table, ids, lo, lo + table.shape[0])
        return current().reduce_scatter(partial, self.tp_group, dim=1, label="embedding_reduce_scatter")

    def _embed_backward(self, d_h, ids, W):
        table = W["tok_embeddings.weight"]
        if self.tp == 1:
            return nt.embedding_backward(d_h, ids, table.shape[0])
        lo = self.params["tok_embeddings.weight"].region()[0].start
        full = current().all_gather(d_h, self.tp_group, dim=1, label="embedding_grad_all_gather")
        return vocab_parallel_lookup_backward(full, ids, lo, lo + table.shape[0])

    def _attention(self, q, k, v, acts):
        """Attention over ``[b, heads, s, hd]``; ring attention under CP."""
        if self.cp == 1:
            return nt.sdpa(q, k, v, causal=True)
        out, cache = cp_mod.ring_attention(q, k, v, self.cp_group, self.cp_method, causal=True)
        acts["ring"] = cache
        return out

    def _block_forward(self, i: int, h: np.ndarray, W: dict, op_cache: dict | None = None,
                       scales: dict | None = None):
        """Returns (out, acts). ``op_cache`` supplies saved op outputs during recompute."""
        cfg, pre = self.cfg, f"layers.{i}."
        op_cache = op_cache or {}
        scales = {} if scales is None else scales
        acts: dict = {"h": h}
        b = h.shape[0]
        hd = cfg.head_dim
        heads = cfg.n_heads // self.tp
        xa = nt.rms_norm(h, W[pre + "attention_norm.weight"], cfg.norm_eps)
        xa_full = self._sp_gather(xa)
        s = xa_full.shape[1]
        freqs = freqs_cis(cfg, xa_full.dtype)[self._positions(s)]

        def lin(name, x, w, rowwise=False):
            key = pre + name
            if name not in op_cache:
                return self._linear(key, x, w, acts, scales, rowwise)
            if self.float8 is not None:  # backward still needs the quantised operands
                sx, sw = scales[key]
                acts["f8:" + key] = (quantize_dequantize(x, sx), quantize_dequantize(w, sw), (sx, sw))
            return op_cache[name]

        q_mm = lin("wq", xa_full, W[pre + "attention.wq.weight"])
        k_mm = lin("wk", xa_full, W[pre + "attention.wk.weight"])
        v_mm = lin("wv", xa_full, W[pre + "attention.wv.weight"])
        q = nt.rotary_apply(q_mm.reshape(b, s, heads, hd), freqs)
        k = nt.rotary_apply(k_mm.reshape(b, s, heads, hd), freqs)
        v = v_mm.reshape(b, s, heads, hd)
        qt, kt, vt = (t.transpose(0, 2, 1, 3) for t in (q, k, v))
        if "sdpa" in op_cache:
            att = op_cache["sdpa"]
            if "ring" in op_cache:
                acts["ring"] = op_cache["ring"]
        else:
            att = self._attention(qt, kt, vt, acts)
        o = att.transpose(0, 2, 1, 3).reshape(b, s, heads * hd)
        wo_mm = lin("wo", o, W[pre + "attention.wo.weight"], rowwise=True)
        h2 = h + self._sp_reduce_scatter(wo_mm)
        xf = nt.rms_norm(h2, W[pre + "ffn_norm.weight"], cfg.norm_eps)
        xf_full = self._sp_gather(xf)
        a = lin("w1", xf_full, W[pre + "mlp.w1.weight"])
        c = lin("w3", xf_full, W[pre + "mlp.w3.weight"])
        g = nt.mul(nt.silu(a), c)
        w2_mm = lin("w2", g, W[pre + "mlp.w2.weight"], rowwise=True)
        out = h2 + self._sp_reduce_scatter(w2_mm)
        acts.update(xa=xa, xa_full=xa_full, freqs=freqs, qt=qt, kt=kt, vt=vt, wq=q_mm, wv=v_mm,
                    sdpa=att, o=o, h2=h2, xf=xf, xf_full=xf_full, w1=a, c=c, g=g, w2=w2_mm)
        return out, acts

    def _block_backward(self, i: int, d_out: np.ndarray, W: dict, acts: dict, defer: list):
        cfg, pre = self.cfg, f"layers.{i}."
        b, s = acts["xa_full"].shape[:2]
        heads, hd = cfg.n_heads // self.tp, cfg.head_dim
        d_out_full = self._sp_gather(d_out)
        d_g, t = self._linear_backward(pre + "w2", d_out_full, acts["g"], W[pre + "mlp.w2.weight"], acts)
        defer.append((pre + "mlp.w2.weight", t))
        silu_a = nt.silu(acts["w1"])
        d_silu, d_c = nt.mul_backward(d_g, silu_a, acts["c"])
        d_a = nt.silu_backward(d_silu, acts["w1"])
        d_xf1, t1 = self._linear_backward(pre + "w1", d_a, acts["xf_full"], W[pre + "mlp.w1.weight"], acts)
        d_xf3, t3 = self._linear_backward(pre + "w3", d_c, acts["xf_full"], W[pre + "mlp.w3.weight"], acts)
        defer.append((pre + "mlp.w1.weight", t1))
        defer.append((pre + "mlp.w3.weight", t3))
        d_xf = self._sp_reduce_scatter(d_xf1 + d_xf3)
        d_h2n, d_wf = nt.rms_norm_backward(d_xf, acts["h2"], W[pre + "ffn_norm.weight"], cfg.norm_eps)
        defer.append((pre + "ffn_norm.weight", lambda: d_wf))
        d_h2 = d_out + d_h2n
        d_h2_full = self._sp_gather(d_h2)
        d_o, to = self._linear_backward(pre + "wo", d_h2_full, acts["o"], W[pre + "attention.wo.weight"], acts)
        defer.append((pre + "attention.wo.weight", to))
        d_ot = d_o.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)
        if self.cp == 1:
            d_qt, d_kt, d_vt = nt.sdpa_backward(d_ot, acts["qt"], acts["kt"], acts["vt"], causal=True)
        else:
            d_qt, d_kt, d_vt = cp_mod.ring_attention_backward(d_ot, acts["ring"], self.cp_group, self.cp_method)
        freqs = acts["freqs"]
        d_q = nt.rotary_backward(d_qt.transpose(0, 2, 1, 3), freqs).reshape(b, s, -1)
        d_k = nt.rotary_backward(d_kt.transpose(0, 2, 1, 3), freqs).reshape(b, s, -1)
        d_v = d_vt.transpose(0, 2, 1, 3).reshape(b, s, -1)
        d_x = np.zeros_like(acts["xa_full"])
        for name, d in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
            fqn = f"{pre}attention.{name}.weight"
            dx, tw = self._linear_backward(pre + name, d, acts["xa_full"], W[fqn], acts)
            defer.append((fqn, tw))
            d_x = d_x + dx
        d_xa = self._sp_reduce_scatter(d_x)
        d_hn, d_wa = nt.rms_norm_backward(d_xa, acts["h"], W[pre + "attention_norm.weight"], cfg.norm_eps)
        defer.append((pre + "attention_norm.weight", lambda: d_wa))
        return d_h2 + d_hn

    def _keep(self, i: int, acts: dict) -> dict:
        policy = self.ac.policy(i)
        if policy == "all":
            return acts
        keep = {"h": acts["h"], "scales": acts.get("scales", {})}
        if policy == "ops":
            keep.update({k: acts[k] for k in SAVED_OPS})
            if "ring" in acts:
                keep["ring"] = acts["ring"]
        return keep

    # -- part-level forward / backward --------------------------------------

    def begin_step(self, microbatches: int = 1, zero2: bool = False) -> None:
        self.grad_scale = 1.0 / microbatches
        self.reduce_per_unit = not zero2
        self.grads = {}
        self._acc = {}
        if zero2:
            for u in self.units:
                self._unshard(u)

    def forward(self, mb: int, x: np.ndarray, labels: np.ndarray | None = None):
        """Run this part on microbatch ``mb``; returns activations or, on the last part, the loss."""
        caches = {}
        units = self.units
        for n, unit in enumerate(units):
            W = self._unshard(unit)
            if unit == "tok_embeddings":
                ids = x
                x = self._embed_forward(ids, W).astype(self.compute_dtype, copy=False)
                caches[unit] = {"ids": ids}
            elif unit.startswith("layers."):
                i = int(unit.split(".")[1])
                scales: dict = {}
                x, acts = self._block_forward(i, x, W, scales=scales)
                acts["scales"] = scales
                caches[unit] = self._keep(i, acts)
            elif unit == "norm":
                caches[unit] = {"h": x}
                x = nt.rms_norm(x, W["norm.weight"], self.cfg.norm_eps)
            elif unit == "output":
                hn_full = self._sp_gather(x)
                logits = nt.matmul(hn_full, W["output.weight"])
                caches[unit] = {"hn_full": hn_full}
                x = self._loss_forward(logits, labels, caches[unit])
            self.ledger.alloc_activation(_nbytes(caches[unit]))
            if self.reduce_per_unit and self.dp_cfg is not None and (
                    self.dp_cfg.reshard_after_forward and n < len(units) - 1):
                self._reshard(unit)
        self._caches[mb] = caches
        return x

    def _loss_forward(self, logits, labels, cache):
        flat_labels = labels.reshape(-1)
        scale = 1.0 / self.cp
        if self.tp > 1 and self.loss_parallel:
            lo = self.params["output.weight"].region()[1].start
            loss, lp = loss_parallel_ce_local(logits.reshape(-1, logits.shape[-1]), flat_labels, lo,
                                              self.cfg.vocab_size, self.tp_group)
            cache["lp"] = lp
        else:
            if self.tp > 1:
                logits = current().all_gather(logits, self.tp_group, dim=2, label="logits_all_gather")
            loss = nt.softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), flat_labels)
        cache.update(logits=logits, labels=flat_labels)
        return loss * scale

    def _loss_backward(self, cache):
        d_loss = self.grad_scale / self.cp
        logits = cache["logits"]
        if "lp" in cache:
            return loss_parallel_ce_backward(cache["lp"], d_loss).reshape(logits.shape).astype(logits.dtype)
        d = nt.softmax_cross_entropy_backward(logits.reshape(-1, logits.shape[-1]), cache["labels"],
                                              d_loss).reshape(logits.shape)
        if self.tp > 1:
            v_loc = self.params["output.weight"].local.shape[1]
            j = self.tp_group.index(self.rank)
            d = d[..., j * v_loc:(j + 1) * v_loc]
        return d

    def backward_input(self, mb: int, d_out: np.ndarray | None = None) -> np.ndarray | None:
        """Input gradients for microbatch ``mb``; weight gradients are deferred."""
        caches = self._caches.pop(mb)
        d = d_out
        for unit in reversed(self.units):
            defer = self._deferred[mb]
            W = self._unshard(unit)
            cache = caches[unit]
            extra = 0
            if unit == "output":
                d_logits = self._loss_backward(cache)
                d_hn_full = nt.matmul_backward_input(d_logits, W["output.weight"])
                hn_full = cache["hn_full"]
                defer.append(("output.weight", lambda d_logits=d_logits, hn_full=hn_full:
                              nt.matmul_backward_weight(d_logits, hn_full)))
                d = self._sp_reduce_scatter(d_hn_full)
            elif unit == "norm":
                d, dw = nt.rms_norm_backward(d, cache["h"], W["norm.weight"], self.cfg.norm_eps)
                defer.append(("norm.weight", lambda dw=dw: dw))
            elif unit.startswith("layers."):
                i = int(unit.split(".")[1])
                acts = cache
                if "xa_full" not in cache:  # checkpointed: recompute the interior
                    op_cache = {k: cache[k] for k in (*SAVED_OPS, "ring") if k in cache}
                    _, acts = self._block_forward(i, cache["h"], W, op_cache=op_cache,
                                                  scales=dict(cache["scales"]))
                    extra = _nbytes(acts) - _nbytes(cache)
                    self.ledger.alloc_activation(extra)
                    self.ledger.recompute_flops += 1
                d = self._block_backward(i, d, W, acts, defer)
            elif unit == "tok_embeddings":
                ids = cache["ids"]
                dh = d
                defer.append(("tok_embeddings.weight", lambda dh=dh, ids=ids, W=W: self._embed_backward(dh, ids, W)))
                d = None
            self.ledger.free_activation(_nbytes(cache) + extra)
            if self.reduce_per_unit:
                self.backward_weight(mb)
                self._reduce_grads(self.unit_fqns(unit))
                self._reshard(unit)
        return d

    def backward_weight(self, mb: int) -> None:
        for fqn, thunk in self._deferred.pop(mb, []):
            self._accumulate(fqn, thunk())

    def backward(self, mb: int, d_out: np.ndarray | None = None) -> np.ndarray | None:
        d = self.backward_input(mb, d_out)
        self.backward_weight(mb)
        return d

    def finish_step(self) -> dict[str, np.ndarray]:
        """Reduce any gradients still unsharded (ZeRO-2 / pipeline) and drop gathered params."""
        self._reduce_grads(self.fqns)
        for u in list(self._gathered):
            self._reshard(u)
        return self.grads

    def optimizer_step(self, lr: float, momentum: float) -> None:
        for fqn, g in self.grads.items():
            p = self.params[fqn]
            if momentum:
                buf = self.momentum.get(fqn)
                buf = g.copy() if buf is None else momentum * buf + g
                self.momentum[fqn] = buf
                g = buf
            p.local = p.local - lr * g
        self._set_resident("optimizer", sum(m.nbytes for m in self.momentum.values()))

    def _set_resident(self, what: str, nbytes: int) -> None:
        """Update this part's share of a per-rank resident counter."""
        attr = f"{what}_bytes_resident"
        prev = self._resident.get(what, 0)
        setattr(self.ledger, attr, getattr(self.ledger, attr) - prev + nbytes)
        self._resident[what] = nbytes


# --------------------------------------------------------------------------
# transforms


def _rank_set(mesh: DeviceMesh) -> set[int]:
    return {int(r) for r in mesh.ranks.reshape(-1)}


def apply_tp(part: ModelPart, tp_mesh: DeviceMesh, plan: Mapping[str, str] | None = None,
             enable_loss_parallel: bool = False, async_tp_chunks: int = 1) -> None:
    """Colwise/rowwise sharding of block linears, vocab-parallel embedding, SP norms."""
    if tp_mesh.ndim != 1:
        raise ValueError("tensor parallel mesh must be 1-D")
    if _rank_set(tp_mesh) != set(part.tp_group):
        raise ValueError("tp mesh does not match the part's tp group")
    plan = dict(default_tp_plan() if plan is None else plan)
    if plan != default_tp_plan():
        missing = sorted(set(default_tp_plan()) - set(plan))
        extra = sorted(set(plan) - set(default_tp_plan()))
        changed = sorted(k for k in set(plan) & set(default_tp_plan()) if plan[k] != default_tp_plan()[k])
        raise ValueError(f"unsupported TP plan: missing {missing}, unknown {extra}, changed {changed}")
    tp, cfg = tp_mesh.size, part.cfg
    for what, n in (("n_heads", cfg.n_heads), ("dim", cfg.dim), ("ffn_hidden", cfg.ffn_hidden),
                    ("vocab_size", cfg.vocab_size)):
        if n % tp:
            raise ValueError(f"model.{what}={n} not divisible by tensor parallel degree {tp}")
    if async_tp_chunks < 1:
        raise ValueError("async TP chunks must be >= 1")
    for fqn in part.fqns:
        mod = top_level_of(fqn)
        rest = fqn[len(mod) + 1:].removesuffix(".weight")
        style = plan.get(f"layers.*.{rest}") if mod.startswith("layers.") else plan.get(mod)
        if tp == 1:
            style = None
        if style == "colwise":
            part.tp_placement[fqn] = Shard(1)
        elif style == "rowwise":
            part.tp_placement[fqn] = Shard(0)
        else:
            part.tp_placement[fqn] = Replicate()
    part.loss_parallel = bool(enable_loss_parallel)
    part.tp_chunks = async_tp_chunks


def apply_ac(part: ModelPart, cfg: ACConfig) -> None:
    part.ac = cfg


def apply_float8(part: ModelPart, cfg: Float8Config) -> None:
    part.float8 = Float8State(cfg) if cfg.enabled else None


def apply_cp(part: ModelPart, cfg: cp_mod.CPConfig) -> None:
    if cfg.degree != part.cp:
        raise ValueError(f"CP degree {cfg.degree} does not match the mesh ({part.cp})")
    if part.cfg.seq_len % (2 * cfg.degree):
        raise ValueError(f"seq_len {part.cfg.seq_len} not divisible by 2*cp = {2 * cfg.degree}")
    if (part.cfg.seq_len // cfg.degree) % part.tp:
        raise ValueError("CP-local sequence length must be divisible by the TP degree")
    part.cp_method = cfg.rotate_method


def apply_data_parallel(part: ModelPart, dp_mesh: DeviceMesh, cfg: DataParallelConfig) -> None:
    """FSDP (1-D mesh) or HSDP (2-D replicate x shard mesh) over ``dp_mesh``.

    The shard group also spans CP ranks, which hold disjoint tokens and so
    contribute partial gradients like data-parallel peers do.
    """
    if dp_mesh.ndim not in (1, 2):
        raise ValueError("data parallel mesh must be 1-D (FSDP) or 2-D (HSDP)")
    rank = part.rank
    shard = dp_mesh.group(dp_mesh.dim_names[-1], rank)
    replicate = dp_mesh.group(dp_mesh.dim_names[0], rank) if dp_mesh.ndim == 2 else (rank,)
    if set(shard) != set(part.shard_group) or set(replicate) != set(part.replicate_group):
        raise ValueError(f"dp mesh {dp_mesh} does not match the part's shard/replicate groups")
    if cfg.shard_degree not in (-1, len(shard) // part.cp) or cfg.replicate_degree != len(replicate):
        raise ValueError(f"data parallel degrees ({cfg.replicate_degree} x {cfg.shard_degree}) "
                         f"do not match mesh {dp_mesh}")
    part.dp_cfg = cfg
    part.dp_degree = len(replicate) * len(shard) // part.cp
    for fqn in part.fqns:
        shape = part.meta.params[fqn].shape
        tp_dim = part.tp_placement[fqn].dim if isinstance(part.tp_placement[fqn], Shard) else None
        part.fsdp_dim[fqn] = next(d for d in range(len(shape)) if d != tp_dim)


def build_part(meta: MetaModel, modules: Sequence[str], dims: ParallelDims, *,
               enable_loss_parallel: bool = False, async_tp_chunks: int = 1,
               ac: ACConfig = ACConfig(), float8: Float8Config = Float8Config(),
               dp: DataParallelConfig | None = None, cp_method: str = "allgather",
               master_seed: int = 0, stage_index: int = 0, num_stages: int = 1) -> ModelPart:
    """Compose TP, CP, AC, float8 and data parallelism on one part, then materialise it."""
    dims = dims.resolve()
    mesh = dims.mesh()
    part = ModelPart(meta, modules, mesh, stage_index, num_stages)
    apply_tp(part, mesh["tp"], enable_loss_parallel=enable_loss_parallel, async_tp_chunks=async_tp_chunks)
    apply_cp(part, cp_mod.CPConfig(dims.cp, cp_method))
    apply_ac(part, ac)
    apply_float8(part, float8)
    dp_cfg = dp or DataParallelConfig(dims.dp_shard, dims.dp_replicate)
    dp_mesh = mesh.submesh(("dp_replicate", "dp_shard", "cp"), current().rank).flatten(
        ("dp_shard", "cp"), "dp_shard_cp")
    apply_data_parallel(part, dp_mesh, dp_cfg)
    part.materialize(master_seed)
    return part
