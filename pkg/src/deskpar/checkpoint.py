"""Distributed checkpointing: each rank writes its own shards, rank 0 the index.

Layout of a checkpoint directory::

    metadata.json       format version, tensor table, shard records, rank state
    data_rank{r}.bin    rank r's shards, raw little-endian, back to back

Replicated copies are written once (by the lowest rank holding them), empty
shards are skipped, and the records of every tensor must tile its global shape
exactly. Loading reads, for each local shard of the target layout, the overlap
with every saved record, so any save layout can be loaded into any other.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .dtensor import DTensor, Partial, Replicate, Shard, redistribute
from .simruntime import current

FORMAT_VERSION = 1
METADATA = "metadata.json"


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShardRecord:
    fqn: str
    global_shape: tuple[int, ...]
    dtype: str
    offsets: tuple[int, ...]
    lengths: tuple[int, ...]
    file_id: int
    byte_range: tuple[int, int]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ShardRecord":
        return cls(d["fqn"], tuple(d["global_shape"]), d["dtype"], tuple(d["offsets"]), tuple(d["lengths"]),
                   int(d["file_id"]), tuple(d["byte_range"]))


@dataclass
class CheckpointMetadata:
    world_size: int
    records: list[ShardRecord]
    rank_state: dict[int, Any]
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        tensors = {}
        for r in self.records:
            tensors.setdefault(r.fqn, {"global_shape": list(r.global_shape), "dtype": r.dtype})
        return {"format_version": self.format_version, "world_size": self.world_size, "tensors": tensors,
                "shards": [r.to_json() for r in self.records],
                "rank_state": {str(k): v for k, v in self.rank_state.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "CheckpointMetadata":
        if d.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {d.get('format_version')!r}")
        return cls(int(d["world_size"]), [ShardRecord.from_json(x) for x in d["shards"]],
                   {int(k): v for k, v in d["rank_state"].items()}, d["format_version"])

    def by_fqn(self) -> dict[str, list[ShardRecord]]:
        out: dict[str, list[ShardRecord]] = {}
        for r in self.records:
            out.setdefault(r.fqn, []).append(r)
        return out


def read_metadata(path: str | Path) -> CheckpointMetadata:
    return CheckpointMetadata.from_json(json.loads((Path(path) / METADATA).read_text()))


# --------------------------------------------------------------------------
# state dict helpers


def flatten_state(state: Mapping[str, Any]) -> tuple[dict[str, Any], Any]:
    """Split ``{"model": {...}, "optim": {...}, "extra": obj}`` into tensors and extra."""
    tensors = {}
    for group, items in state.items():
        if group == "extra":
            continue
        for name, t in items.items():
            tensors[f"{group}/{name}"] = t
    return tensors, state.get("extra")


def _region(t) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if isinstance(t, DTensor):
        reg = t.region()
        return tuple(s.start for s in reg), tuple(s.stop - s.start for s in reg)
    return (0,) * t.ndim, tuple(t.shape)


def _is_writer(t) -> bool:
    """Lowest-coordinate holder of each replicated region writes it."""
    if not isinstance(t, DTensor):
        return current().rank == 0
    coord = t.coordinate
    return all(c == 0 for c, p in zip(coord, t.placements) if isinstance(p, Replicate))


def _no_partial(t):
    if isinstance(t, DTensor) and any(isinstance(p, Partial) for p in t.placements):
        return redistribute(t, [Replicate() if isinstance(p, Partial) else p for p in t.placements])
    return t


def check_tiling(records: list[ShardRecord]) -> None:
    """Every tensor's records must cover its global shape exactly once."""
    for fqn, recs in _group(records).items():
        shape = recs[0].global_shape
        count = np.zeros(shape, dtype=np.int64) if shape else np.zeros((), dtype=np.int64)
        for r in recs:
            if r.global_shape != shape:
                raise CheckpointError(f"{fqn}: inconsistent global shapes {shape} vs {r.global_shape}")
            if any(o < 0 or o + n > s for o, n, s in zip(r.offsets, r.lengths, shape)):
                raise CheckpointError(f"{fqn}: shard {r.offsets}+{r.lengths} outside {shape}")
            count[tuple(slice(o, o + n) for o, n in zip(r.offsets, r.lengths))] += 1
        if count.size and (count.min() != 1 or count.max() != 1):
            raise CheckpointError(f"{fqn}: shards do not tile the tensor (coverage {count.min()}..{count.max()})")


def _group(records):
    out: dict[str, list[ShardRecord]] = {}
    for r in records:
        out.setdefault(r.fqn, []).append(r)
    return out


# --------------------------------------------------------------------------
# save


@dataclass
class _Plan:
    path: Path
    rank: int
    blobs: list[np.ndarray]
    metadata: CheckpointMetadata | None


def _plan(state: Mapping[str, Any], path: str | Path, snapshot: bool) -> _Plan:
    ctx = current()
    tensors, extra = flatten_state(state)
    blobs, mine = [], []
    offset = 0
    for key in sorted(tensors):
        t = _no_partial(tensors[key])
        local = t.local if isinstance(t, DTensor) else np.asarray(t)
        gshape = tuple(t.global_shape) if isinstance(t, DTensor) else tuple(local.shape)
        if not _is_writer(t) or local.size == 0:
            continue
        offs, lens = _region(t)
        data = np.ascontiguousarray(local, dtype=local.dtype.newbyteorder("<"))
        if snapshot:
            data = data.copy()
        blobs.append(data)
        mine.append(ShardRecord(key, gshape, local.dtype.name, offs, lens, ctx.rank, (offset, offset + data.nbytes)))
        offset += data.nbytes
    everything = ctx.all_gather_object((mine, copy.deepcopy(extra)), label="checkpoint_plan")
    meta = None
    if ctx.rank == 0:
        records = [r for recs, _ in everything for r in recs]
        check_tiling(records)
        meta = CheckpointMetadata(ctx.world_size, records, {r: e for r, (_, e) in enumerate(everything)})
    return _Plan(Path(path), ctx.rank, blobs, meta)


def _write(plan: _Plan) -> None:
    plan.path.mkdir(parents=True, exist_ok=True)
    with open(plan.path / f"data_rank{plan.rank}.bin", "wb") as f:
        for b in plan.blobs:
            f.write(b.tobytes())
    if plan.metadata is not None:
        (plan.path / METADATA).write_text(json.dumps(plan.metadata.to_json(), indent=2, sort_keys=True) + "\n")


def save(state: Mapping[str, Any], path: str | Path) -> None:
    """Collective: every rank calls this with its local view of the state."""
    plan = _plan(state, path, snapshot=False)
    _write(plan)
    current().barrier(label="checkpoint_save")


class AsyncSaveHandle:
    def __init__(self, plan: _Plan, slot: dict):
        self._error: BaseException | None = None
        self._slot = slot
        self._thread = threading.Thread(target=self._run, args=(plan,), daemon=True)
        self._thread.start()

    def _run(self, plan: _Plan) -> None:
        try:
            _write(plan)
        except BaseException as e:  # surfaced by wait()
            self._error = e

    def done(self) -> bool:
        return not self._thread.is_alive()

    def wait(self) -> None:
        self._thread.join()
        self._slot.pop("async_save", None)
        if self._error is not None:
            raise CheckpointError(f"async save failed: {self._error}") from self._error


def async_save(state: Mapping[str, Any], path: str | Path) -> AsyncSaveHandle:
    """Snapshot the state now and write it in the background.

    Only one save may be in flight per rank; call ``wait()`` before the next.
    Files are identical to those of :func:`save`.
    """
    ctx = current()
    pending = ctx.scratch.get("async_save")
    if pending is not None and not pending.done():
        raise CheckpointError(f"rank {ctx.rank}: an async save is already in flight")
    if pending is not None:
        pending.wait()
    plan = _plan(state, path, snapshot=True)
    handle = AsyncSaveHandle(plan, ctx.scratch)
    ctx.scratch["async_save"] = handle
    return handle


# --------------------------------------------------------------------------
# load


def _read(path: Path, rec: ShardRecord) -> np.ndarray:
    with open(path / f"data_rank{rec.file_id}.bin", "rb") as f:
        f.seek(rec.byte_range[0])
        buf = f.read(rec.byte_range[1] - rec.byte_range[0])
    if len(buf) != rec.byte_range[1] - rec.byte_range[0]:
        raise CheckpointError(f"{rec.fqn}: truncated data file for rank {rec.file_id}")
    return np.frombuffer(buf, dtype=np.dtype(rec.dtype).newbyteorder("<")).reshape(rec.lengths).astype(rec.dtype)


def read_region(path: str | Path, recs: list[ShardRecord], offsets, lengths) -> np.ndarray:
    """Assemble ``[offsets, offsets + lengths)`` of one tensor from its records."""
    path = Path(path)
    out = np.empty(lengths, dtype=recs[0].dtype)
    for rec in recs:
        lo = [max(a, b) for a, b in zip(offsets, rec.offsets)]
        hi = [min(a + n, b + m) for a, n, b, m in zip(offsets, lengths, rec.offsets, rec.lengths)]
        if any(h <= l for l, h in zip(lo, hi)) and len(lengths):
            continue
        data = _read(path, rec)
        src = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, rec.offsets))
        dst = tuple(slice(l - o, h - o) for l, h, o in zip(lo, hi, offsets))
        out[dst] = data[src]
    return out


def load(state: Mapping[str, Any], path: str | Path) -> dict:
    """Fill ``state`` (its DTensors define the target layout) in place; returns it.

    ``state["extra"]`` is replaced by the saved rank state of this rank (or of
    rank 0 when the world size changed).
    """
    path = Path(path)
    meta = read_metadata(path)
    check_tiling(meta.records)
    table = meta.by_fqn()
    tensors, _ = flatten_state(state)
    for key, t in tensors.items():
        if key not in table:
            raise CheckpointError(f"checkpoint has no entry for {key}")
        recs = table[key]
        gshape = tuple(t.global_shape) if isinstance(t, DTensor) else tuple(np.shape(t))
        if recs[0].global_shape != gshape:
            raise CheckpointError(f"{key}: saved shape {recs[0].global_shape} != target {gshape}")
        if isinstance(t, DTensor) and any(isinstance(p, Partial) for p in t.placements):
            raise CheckpointError(f"{key}: cannot load into a Partial placement")
        offs, lens = _region(t)
        data = read_region(path, recs, offs, lens)
        if isinstance(t, DTensor):
            t.local = data.astype(t.local.dtype, copy=False)
        else:
            t[...] = data
    rank = current().rank
    extra = meta.rank_state.get(rank if meta.world_size == current().world_size else 0)
    if "extra" in state:
        state = dict(state)
        state["extra"] = extra
    return state


def consolidate(src: str | Path, dst: str | Path) -> CheckpointMetadata:
    """Rewrite a sharded checkpoint as a single-rank one with full tensors (offline)."""
    src, dst = Path(src), Path(dst)
    meta = read_metadata(src)
    check_tiling(meta.records)
    records, blobs, offset = [], [], 0
    for fqn, recs in sorted(meta.by_fqn().items()):
        shape = recs[0].global_shape
        full = read_region(src, recs, (0,) * len(shape), shape)
        data = np.ascontiguousarray(full, dtype=full.dtype.newbyteorder("<"))
        records.append(ShardRecord(fqn, shape, full.dtype.name, (0,) * len(shape), shape, 0,
                                   (offset, offset + data.nbytes)))
        blobs.append(data)
        offset += data.nbytes
    out = CheckpointMetadata(1, records, {0: meta.rank_state.get(0)})
    _write(_Plan(dst, 0, blobs, out))
    return out


def load_full(path: str | Path) -> dict[str, np.ndarray]:
    """All tensors of a checkpoint as full arrays (offline)."""
    meta = read_metadata(path)
    check_tiling(meta.records)
    return {fqn: read_region(path, recs, (0,) * len(recs[0].global_shape), recs[0].global_shape)
            for fqn, recs in meta.by_fqn().items()}
