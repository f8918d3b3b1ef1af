"""A simulated multi-rank world.

One Python thread per rank; every cross-rank interaction goes through the
collectives and point-to-point channels defined here. Collectives are
rendezvous points: the last member to arrive computes the result (reducing in
group order, so results are bit-deterministic) and every member leaves with
its own copy.

Each call is logged by a flight recorder (logical per-rank timestamps) and
charged to a per-rank cost ledger using ring-algorithm byte counts.
"""

from __future__ import annotations

import collections
import contextlib
import dataclasses
import json
import pickle
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DEFAULT_TIMEOUT = 30.0
COLLECTIVE_KINDS = ("all_reduce", "all_gather", "reduce_scatter", "broadcast",
                    "all_to_all", "barrier")
P2P_KINDS = ("send", "recv")


class WorldError(RuntimeError):
    """Raised by :func:`spawn_world` when any rank fails; carries the recorder."""

    def __init__(self, errors: dict[int, BaseException], records: list["CollectiveRecord"]):
        self.errors = errors
        self.records = records
        self.report = analyze_recorder(records)
        root = {r: e for r, e in errors.items() if not isinstance(e, WorldAborted)}
        failing = sorted(root or errors)
        lines = [f"world failed on rank(s) {failing}"]
        for r in failing:
            lines.append(f"  rank {r}: {type(errors[r]).__name__}: {errors[r]}")
        if self.report.stuck_ranks():
            lines.append(f"straggler rank(s): {sorted(self.report.stuck_ranks())}")
        if not self.report.clean:
            lines.append(self.report.format())
        super().__init__("\n".join(lines))


class CollectiveTimeout(TimeoutError):
    pass


class WorldAborted(RuntimeError):
    pass


class CollectiveMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# device mesh


class DeviceMesh:
    """Row-major n-D arrangement of global ranks with named dims."""

    def __init__(self, ranks: np.ndarray | Sequence, dim_names: Sequence[str]):
        self.ranks = np.asarray(ranks, dtype=np.int64)
        self.dim_names = tuple(dim_names)
        if self.ranks.ndim != len(self.dim_names):
            raise ValueError(f"mesh has {self.ranks.ndim} dims but names {self.dim_names}")
        if len(set(self.dim_names)) != len(self.dim_names):
            raise ValueError(f"mesh dim names must be unique: {self.dim_names}")
        if any(s < 1 for s in self.ranks.shape):
            raise ValueError(f"mesh extents must be positive: {self.ranks.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.ranks.shape)

    @property
    def ndim(self) -> int:
        return self.ranks.ndim

    @property
    def size(self) -> int:
        return int(self.ranks.size)

    def dim_index(self, name: str) -> int:
        try:
            return self.dim_names.index(name)
        except ValueError:
            raise KeyError(f"unknown mesh dim {name!r}; have {self.dim_names}") from None

    def size_of(self, name: str) -> int:
        return self.shape[self.dim_index(name)]

    def coordinate(self, rank: int) -> tuple[int, ...]:
        where = np.argwhere(self.ranks == rank)
        if len(where) != 1:
            raise KeyError(f"rank {rank} is not in this mesh")
        return tuple(int(c) for c in where[0])

    def __contains__(self, rank: int) -> bool:
        return bool((self.ranks == rank).any())

    def submesh(self, names: str | Sequence[str], rank: int) -> "DeviceMesh":
        """The sub-mesh over ``names`` that contains ``rank`` (other coords fixed)."""
        names = (names,) if isinstance(names, str) else tuple(names)
        coord = self.coordinate(rank)
        keep = [self.dim_index(n) for n in names]
        index = tuple(slice(None) if i in keep else coord[i] for i in range(self.ndim))
        sub = self.ranks[index]
        order = sorted(keep)
        sub = np.transpose(sub, [order.index(k) for k in keep]) if sub.ndim > 1 else sub
        return DeviceMesh(sub, names)

    def group(self, name: str, rank: int) -> tuple[int, ...]:
        return tuple(int(r) for r in self.submesh(name, rank).ranks)

    def flatten_group(self, names: Sequence[str], rank: int) -> tuple[int, ...]:
        return tuple(int(r) for r in self.submesh(tuple(names), rank).ranks.reshape(-1))

    def flatten(self, names: Sequence[str], new_name: str) -> "DeviceMesh":
        """Merge adjacent dims ``names`` into one dim called ``new_name``."""
        idx = [self.dim_index(n) for n in names]
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError(f"can only flatten adjacent dims in order, got {names}")
        shape = list(self.shape)
        merged = int(np.prod([shape[i] for i in idx]))
        new_shape = shape[:idx[0]] + [merged] + shape[idx[-1] + 1:]
        new_names = list(self.dim_names[:idx[0]]) + [new_name] + list(self.dim_names[idx[-1] + 1:])
        return DeviceMesh(self.ranks.reshape(new_shape), new_names)

    def __getitem__(self, names: str | tuple[str, ...]) -> "DeviceMesh":
        return self.submesh(names, current().rank)

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, DeviceMesh) and self.dim_names == other.dim_names
                and np.array_equal(self.ranks, other.ranks))

    def __hash__(self) -> int:
        return hash((self.dim_names, self.ranks.tobytes(), self.shape))

    def __repr__(self) -> str:
        dims = ", ".join(f"{n}={s}" for n, s in zip(self.dim_names, self.shape))
        return f"DeviceMesh({dims})"


def device_mesh(shape: Sequence[int], names: Sequence[str],
                world_size: int | None = None) -> DeviceMesh:
    shape = tuple(int(s) for s in shape)
    if len(shape) != len(names):
        raise ValueError(f"shape {shape} and names {tuple(names)} differ in length")
    total = int(np.prod(shape)) if shape else 1
    if world_size is None:
        world_size = current().world_size
    if total != world_size:
        raise ValueError(f"mesh shape {shape} has {total} ranks, world has {world_size}")
    return DeviceMesh(np.arange(total).reshape(shape), names)


def mesh_slice(mesh: DeviceMesh, name: str, rank: int | None = None) -> tuple[int, ...]:
    return mesh.group(name, current().rank if rank is None else rank)


def mesh_flatten(mesh: DeviceMesh, names: Sequence[str], rank: int | None = None) -> tuple[int, ...]:
    return mesh.flatten_group(names, current().rank if rank is None else rank)


# --------------------------------------------------------------------------
# records and ledgers


@dataclass
class CollectiveRecord:
    seq_id: int
    kind: str
    group: tuple[int, ...]
    rank: int
    peer: int | None
    bytes: int
    enqueue_t: int
    start_t: int | None = None
    end_t: int | None = None
    label: str = ""
    tag: str = ""

    @property
    def completed(self) -> bool:
        return self.end_t is not None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["group"] = list(self.group)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CollectiveRecord":
        d = dict(d)
        d["group"] = tuple(d["group"])
        return cls(**d)


@dataclass
class RankLedger:
    rank: int
    bytes_sent: int = 0
    bytes_received: int = 0
    collective_counts: dict[str, int] = field(default_factory=lambda: collections.defaultdict(int))
    bytes_by_kind: dict[str, int] = field(default_factory=lambda: collections.defaultdict(int))
    bytes_by_label: dict[str, int] = field(default_factory=lambda: collections.defaultdict(int))
    overlappable_bytes: int = 0
    activation_bytes: int = 0
    activation_bytes_peak: int = 0
    parameter_bytes_resident: int = 0
    gradient_bytes_resident: int = 0
    optimizer_bytes_resident: int = 0
    transient_bytes: int = 0
    transient_bytes_peak: int = 0
    recompute_flops: int = 0

    def charge(self, kind: str, sent: int, received: int, label: str = "",
               overlappable: bool = False) -> None:
        self.bytes_sent += sent
        self.bytes_received += received
        self.collective_counts[kind] += 1
        self.bytes_by_kind[kind] += sent
        if label:
            self.bytes_by_label[label] += sent
        if overlappable:
            self.overlappable_bytes += sent

    def alloc_activation(self, nbytes: int) -> None:
        self.activation_bytes += int(nbytes)
        self.activation_bytes_peak = max(self.activation_bytes_peak, self.activation_bytes)

    def free_activation(self, nbytes: int) -> None:
        self.activation_bytes -= int(nbytes)
        if self.activation_bytes < 0:
            raise RuntimeError("activation ledger went negative")

    def alloc_transient(self, nbytes: int) -> None:
        self.transient_bytes += int(nbytes)
        self.transient_bytes_peak = max(self.transient_bytes_peak, self.transient_bytes)

    def free_transient(self, nbytes: int) -> None:
        self.transient_bytes -= int(nbytes)

    def reset_peaks(self) -> None:
        self.activation_bytes_peak = self.activation_bytes
        self.transient_bytes_peak = self.transient_bytes

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("collective_counts", "bytes_by_kind", "bytes_by_label"):
            d[key] = dict(d[key])
        return d


@dataclass
class CostLedger:
    ranks: list[RankLedger]

    @property
    def total_sent(self) -> int:
        return sum(r.bytes_sent for r in self.ranks)

    @property
    def total_received(self) -> int:
        return sum(r.bytes_received for r in self.ranks)

    def conserved(self) -> bool:
        return self.total_sent == self.total_received

    def __getitem__(self, rank: int) -> RankLedger:
        return self.ranks[rank]


def ring_bytes(kind: str, nbytes: int, world: int, position: int = 0) -> tuple[int, int]:
    """(sent, received) by one member for a ring implementation of ``kind``.

    ``nbytes`` is the member's input size (for all_gather: its shard).
    """
    if world <= 1 or kind == "barrier":
        return 0, 0
    if kind == "all_reduce":
        b = 2 * (world - 1) * nbytes // world
        return b, b
    if kind == "all_gather":
        b = (world - 1) * nbytes
        return b, b
    if kind in ("reduce_scatter", "all_to_all"):
        b = (world - 1) * nbytes // world
        return b, b
    if kind == "broadcast":
        # pipelined chain starting at the root
        sent = nbytes if position < world - 1 else 0
        received = nbytes if position > 0 else 0
        return sent, received
    raise ValueError(f"unknown collective kind {kind!r}")


# --------------------------------------------------------------------------
# world and rank contexts


class _Slot:
    def __init__(self, size: int):
        self.cond = threading.Condition()
        self.size = size
        self.arrivals: dict[int, tuple[str, Any]] = {}
        self.results: dict[int, Any] | None = None
        self.error: BaseException | None = None
        self.departed = 0


class _Channel:
    def __init__(self):
        self.cond = threading.Condition()
        self.queue: collections.deque = collections.deque()


class World:
    def __init__(self, world_size: int, timeout: float = DEFAULT_TIMEOUT):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        self.world_size = world_size
        self.timeout = timeout
        self._lock = threading.Lock()
        self._slots: dict[tuple, _Slot] = {}
        self._channels: dict[tuple, _Channel] = {}
        self._aborted: str | None = None
        self._waiters: set[threading.Condition] = set()
        self.records: list[list[CollectiveRecord]] = [[] for _ in range(world_size)]
        self.ledger = CostLedger([RankLedger(r) for r in range(world_size)])

    def abort(self, reason: str) -> None:
        with self._lock:
            if self._aborted is None:
                self._aborted = reason
            waiters = list(self._waiters)
        for cond in waiters:
            with cond:
                cond.notify_all()

    @property
    def aborted(self) -> str | None:
        return self._aborted

    def slot(self, key: tuple, size: int) -> _Slot:
        with self._lock:
            s = self._slots.get(key)
            if s is None:
                s = self._slots[key] = _Slot(size)
                self._waiters.add(s.cond)
            return s

    def release_slot(self, key: tuple, slot: _Slot) -> None:
        with self._lock:
            self._slots.pop(key, None)
            self._waiters.discard(slot.cond)

    def channel(self, key: tuple) -> _Channel:
        with self._lock:
            c = self._channels.get(key)
            if c is None:
                c = self._channels[key] = _Channel()
                self._waiters.add(c.cond)
            return c

    def merged_records(self) -> list[CollectiveRecord]:
        out = [r for rank_records in self.records for r in rank_records]
        return sorted(out, key=lambda r: (r.rank, r.enqueue_t))


_local = threading.local()


def _nbytes(x: Any) -> int:
    if isinstance(x, np.ndarray):
        return int(x.nbytes)
    if isinstance(x, (list, tuple)):
        return sum(_nbytes(v) for v in x)
    return 0


def _reduce(values: list[np.ndarray], op: str) -> np.ndarray:
    out = np.array(values[0], copy=True)
    for v in values[1:]:
        if op == "sum":
            out = out + v
        elif op == "max":
            out = np.maximum(out, v)
        elif op == "min":
            out = np.minimum(out, v)
        else:
            raise ValueError(f"unknown reduce op {op!r}")
    return out


def _check_shapes(kind: str, group: tuple[int, ...], payloads: list[np.ndarray]) -> None:
    shapes = {tuple(np.shape(p)) for p in payloads}
    if len(shapes) != 1:
        detail = ", ".join(f"rank {r}: {np.shape(p)}" for r, p in zip(group, payloads))
        raise CollectiveMismatch(f"{kind} over {list(group)}: shape mismatch ({detail})")


class RankContext:
    """Per-rank handle: identity, collectives, point-to-point and ledgers."""

    def __init__(self, world: World, rank: int):
        self.world = world
        self.rank = rank
        self._clock = 0
        self._group_seq: dict[tuple, int] = collections.defaultdict(int)
        self._send_seq: dict[tuple, int] = collections.defaultdict(int)
        self._recv_seq: dict[tuple, int] = collections.defaultdict(int)
        self.scratch: dict[str, Any] = {}

    @property
    def world_size(self) -> int:
        return self.world.world_size

    @property
    def ledger(self) -> RankLedger:
        return self.world.ledger[self.rank]

    @property
    def records(self) -> list[CollectiveRecord]:
        return self.world.records[self.rank]

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def _group(self, group: Iterable[int] | None) -> tuple[int, ...]:
        g = tuple(range(self.world_size)) if group is None else tuple(int(r) for r in group)
        if self.rank not in g:
            raise ValueError(f"rank {self.rank} is not a member of group {list(g)}")
        return g

    def _check_abort(self) -> None:
        if self.world.aborted is not None:
            raise WorldAborted(f"rank {self.rank}: world aborted ({self.world.aborted})")

    def _wait(self, cond: threading.Condition, ready: Callable[[], bool], what: str) -> None:
        deadline = time.monotonic() + self.world.timeout
        while not ready():
            self._check_abort()
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                msg = f"rank {self.rank} timed out after {self.world.timeout}s waiting on {what}"
                self.world.abort(msg)
                raise CollectiveTimeout(msg)
            cond.wait(min(remaining, 0.25))

    # -- collectives ---------------------------------------------------------

    def _collective(self, kind: str, group: tuple[int, ...], payload: Any,
                    compute: Callable[[list], list], label: str = "",
                    overlappable: bool = False) -> Any:
        self._check_abort()
        if len(group) == 1:
            return compute([payload])[0]
        seq = self._group_seq[group]
        self._group_seq[group] += 1
        nbytes = _nbytes(payload)
        rec = CollectiveRecord(seq, kind, group, self.rank, None, nbytes, self._tick(), label=label)
        self.records.append(rec)
        key = ("coll", group, seq)
        slot = self.world.slot(key, len(group))
        with slot.cond:
            slot.arrivals[self.rank] = (kind, payload)
            if len(slot.arrivals) == slot.size:
                try:
                    kinds = {k for k, _ in slot.arrivals.values()}
                    if len(kinds) != 1:
                        raise CollectiveMismatch(
                            f"group {list(group)} seq {seq}: mixed collective kinds {sorted(kinds)}")
                    outs = compute([slot.arrivals[r][1] for r in group])
                    slot.results = dict(zip(group, outs))
                except BaseException as exc:  # every member re-raises it
                    slot.error = exc
                    slot.results = {}
                slot.cond.notify_all()
            else:
                self._wait(slot.cond, lambda: slot.results is not None,
                           f"{kind} seq {seq} on group {list(group)}")
            rec.start_t = self._tick()
            slot.departed += 1
            if slot.departed == slot.size:
                self.world.release_slot(key, slot)
            if slot.error is not None:
                raise slot.error
            out = slot.results[self.rank]
        sent, received = ring_bytes(kind, nbytes, len(group), group.index(self.rank))
        self.ledger.charge(kind, sent, received, label, overlappable)
        rec.end_t = self._tick()
        return out

    def all_reduce(self, x: np.ndarray, group=None, op: str = "sum", label: str = "") -> np.ndarray:
        g = self._group(group)

        def compute(vals):
            _check_shapes("all_reduce", g, vals)
            r = _reduce(vals, op)
            return [r.copy() for _ in vals]

        return self._collective("all_reduce", g, np.asarray(x), compute, label)

    def all_gather(self, x: np.ndarray, group=None, dim: int = 0, label: str = "",
                   overlappable: bool = False) -> np.ndarray:
        g = self._group(group)

        def compute(vals):
            _check_shapes("all_gather", g, vals)
            r = np.concatenate(vals, axis=dim)
            return [r.copy() for _ in vals]

        return self._collective("all_gather", g, np.asarray(x), compute, label, overlappable)

    def all_gather_coalesced(self, xs: Sequence[np.ndarray], group=None,
                             dims: Sequence[int] | None = None, label: str = "") -> list[np.ndarray]:
        """One rendezvous gathering several tensors (FSDP-style flat all-gather)."""
        g = self._group(group)
        dims = [0] * len(xs) if dims is None else list(dims)

        def compute(vals):
            outs = []
            for i, d in enumerate(dims):
                _check_shapes("all_gather", g, [v[i] for v in vals])
                outs.append(np.concatenate([v[i] for v in vals], axis=d))
            return [[o.copy() for o in outs] for _ in vals]

        return self._collective("all_gather", g, [np.asarray(x) for x in xs], compute, label)

    def reduce_scatter(self, x: np.ndarray, group=None, dim: int = 0, op: str = "sum",
                       label: str = "", overlappable: bool = False) -> np.ndarray:
        g = self._group(group)
        if x.shape[dim] % len(g):
            raise ValueError(f"reduce_scatter: dim {dim} extent {x.shape[dim]} not divisible "
                             f"by group size {len(g)}")

        def compute(vals):
            _check_shapes("reduce_scatter", g, vals)
            r = _reduce(vals, op)
            return [c.copy() for c in np.split(r, len(g), axis=dim)]

        return self._collective("reduce_scatter", g, np.asarray(x), compute, label, overlappable)

    def reduce_scatter_coalesced(self, xs: Sequence[np.ndarray], group=None,
                                 dims: Sequence[int] | None = None, label: str = "") -> list[np.ndarray]:
        g = self._group(group)
        dims = [0] * len(xs) if dims is None else list(dims)
        for x, d in zip(xs, dims):
            if x.shape[d] % len(g):
                raise ValueError(f"reduce_scatter: extent {x.shape[d]} not divisible by {len(g)}")

        def compute(vals):
            per_member = [[] for _ in g]
            for i, d in enumerate(dims):
                _check_shapes("reduce_scatter", g, [v[i] for v in vals])
                r = _reduce([v[i] for v in vals], "sum")
                for j, c in enumerate(np.split(r, len(g), axis=d)):
                    per_member[j].append(c.copy())
            return per_member

        return self._collective("reduce_scatter", g, [np.asarray(x) for x in xs], compute, label)

    def broadcast(self, x: np.ndarray, group=None, src: int | None = None, label: str = "") -> np.ndarray:
        g = self._group(group)
        src = g[0] if src is None else src

        def compute(vals):
            r = vals[g.index(src)]
            return [np.array(r, copy=True) for _ in vals]

        return self._collective("broadcast", g, np.asarray(x), compute, label)

    def all_to_all(self, x: np.ndarray, group=None, dim: int = 0, label: str = "") -> np.ndarray:
        g = self._group(group)
        if x.shape[dim] % len(g):
            raise ValueError("all_to_all: extent not divisible by group size")

        def compute(vals):
            _check_shapes("all_to_all", g, vals)
            pieces = [np.split(v, len(g), axis=dim) for v in vals]
            return [np.concatenate([pieces[i][j] for i in range(len(g))], axis=dim)
                    for j in range(len(g))]

        return self._collective("all_to_all", g, np.asarray(x), compute, label)

    def barrier(self, group=None, label: str = "") -> None:
        g = self._group(group)
        self._collective("barrier", g, None, lambda vals: [None] * len(vals), label)

    def all_gather_object(self, obj: Any, group=None, label: str = "") -> list:
        g = self._group(group)
        blob = np.frombuffer(pickle.dumps(obj), dtype=np.uint8)

        def compute(vals):
            objs = [pickle.loads(v.tobytes()) for v in vals]
            return [list(objs) for _ in vals]

        return self._collective("all_gather", g, blob, compute, label)

    # -- point to point ------------------------------------------------------

    def send(self, x: np.ndarray, dst: int, tag: str = "", label: str = "") -> None:
        self._check_abort()
        x = np.array(x, copy=True)
        key = (self.rank, dst, tag)
        seq = self._send_seq[key]
        self._send_seq[key] += 1
        t = self._tick()
        rec = CollectiveRecord(seq, "send", (self.rank, dst), self.rank, dst, int(x.nbytes),
                               t, t, t, label, tag)
        self.records.append(rec)
        ch = self.world.channel(key)
        with ch.cond:
            ch.queue.append((seq, x))
            ch.cond.notify_all()
        self.ledger.bytes_sent += int(x.nbytes)
        self.ledger.collective_counts["send"] += 1
        self.ledger.bytes_by_kind["send"] += int(x.nbytes)

    def recv(self, src: int, shape: Sequence[int], dtype, tag: str = "", label: str = "") -> np.ndarray:
        self._check_abort()
        key = (src, self.rank, tag)
        seq = self._recv_seq[key]
        self._recv_seq[key] += 1
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        rec = CollectiveRecord(seq, "recv", (src, self.rank), self.rank, src, nbytes,
                               self._tick(), label=label, tag=tag)
        self.records.append(rec)
        ch = self.world.channel(key)
        with ch.cond:
            self._wait(ch.cond, lambda: bool(ch.queue),
                       f"recv from rank {src} (tag {tag!r}, seq {seq})")
            got_seq, x = ch.queue.popleft()
        rec.start_t = self._tick()
        if got_seq != seq or tuple(x.shape) != tuple(shape) or x.dtype != np.dtype(dtype):
            raise CollectiveMismatch(
                f"recv on channel {src}->{self.rank} tag {tag!r} seq {seq}: expected "
                f"{tuple(shape)}/{np.dtype(dtype)}, got {x.shape}/{x.dtype} (send seq {got_seq})")
        self.ledger.bytes_received += int(x.nbytes)
        self.ledger.collective_counts["recv"] += 1
        rec.end_t = self._tick()
        return x


def current() -> RankContext:
    """The calling thread's rank context (a private 1-rank world outside spawn_world)."""
    ctx = getattr(_local, "ctx", None)
    if ctx is None:
        ctx = _local.ctx = RankContext(World(1), 0)
    return ctx


@contextlib.contextmanager
def _bind(ctx: RankContext):
    prev = getattr(_local, "ctx", None)
    _local.ctx = ctx
    try:
        yield ctx
    finally:
        _local.ctx = prev


def collective(kind: str, group: Sequence[int] | None, x: np.ndarray | None = None,
               reduce_op: str = "sum", **kwargs) -> np.ndarray | None:
    """Dispatch a collective by name on the calling rank."""
    ctx = current()
    if kind == "all_reduce":
        return ctx.all_reduce(x, group, reduce_op, **kwargs)
    if kind == "all_gather":
        return ctx.all_gather(x, group, **kwargs)
    if kind == "reduce_scatter":
        return ctx.reduce_scatter(x, group, op=reduce_op, **kwargs)
    if kind == "broadcast":
        return ctx.broadcast(x, group, **kwargs)
    if kind == "all_to_all":
        return ctx.all_to_all(x, group, **kwargs)
    if kind == "barrier":
        return ctx.barrier(group, **kwargs)
    raise ValueError(f"unknown collective kind {kind!r}")


@dataclass
class WorldResult:
    results: list[Any]
    records: list[CollectiveRecord]
    ledger: CostLedger

    def __getitem__(self, rank: int) -> Any:
        return self.results[rank]

    def __iter__(self):
        return iter(self.results)

    def __len__(self) -> int:
        return len(self.results)


def spawn_world(world_size: int, entry: Callable[[RankContext], Any],
                timeout: float = DEFAULT_TIMEOUT) -> WorldResult:
    """Run ``entry(ctx)`` once per rank concurrently; return per-rank results."""
    world = World(world_size, timeout)
    results: list[Any] = [None] * world_size
    errors: dict[int, BaseException] = {}

    def run(rank: int) -> None:
        ctx = RankContext(world, rank)
        with _bind(ctx):
            try:
                results[rank] = entry(ctx)
            except BaseException as exc:
                errors[rank] = exc
                world.abort(f"rank {rank} raised {type(exc).__name__}")

    if world_size == 1:
        run(0)
    else:
        threads = [threading.Thread(target=run, args=(r,), name=f"rank{r}", daemon=True)
                   for r in range(world_size)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        err = WorldError(errors, world.merged_records())
        root = [e for _, e in sorted(errors.items()) if not isinstance(e, WorldAborted)]
        raise err from (root or list(errors.values()))[0]
    return WorldResult(results, world.merged_records(), world.ledger)


# --------------------------------------------------------------------------
# flight recorder dump and hang analysis


def dump_records(records: Iterable[CollectiveRecord], path) -> None:
    ordered = sorted(records, key=lambda r: (r.rank, r.enqueue_t))
    with open(path, "w") as fh:
        for r in ordered:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_records(path) -> list[CollectiveRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(CollectiveRecord.from_json(json.loads(line)))
    return out


@dataclass
class CollectiveIssue:
    group: tuple[int, ...]
    seq_id: int
    kind: str
    missing: list[int]
    waiting: list[int]
    last_completed_seq: int
    last_enqueued: dict[int, int]

    def describe(self) -> str:
        who = "world" if self.group == tuple(range(len(self.group))) else str(list(self.group))
        return (f"collective hang: group {who} seq {self.seq_id} kind {self.kind}: "
                f"missing ranks {self.missing}, waiting ranks {self.waiting}; "
                f"last seq completed by all = {self.last_completed_seq}")


@dataclass
class P2PIssue:
    src: int
    dst: int
    tag: str
    state: str  # "recv_blocked" or "send_unmatched"
    seq_id: int
    last_completed_send: int
    last_completed_recv: int

    def describe(self) -> str:
        what = ("recv blocked waiting for" if self.state == "recv_blocked"
                else "send never received:")
        return (f"p2p channel ({self.src}->{self.dst}) tag {self.tag!r}: {what} seq {self.seq_id}; "
                f"last completed send seq {self.last_completed_send}, "
                f"last completed recv seq {self.last_completed_recv}")


@dataclass
class HangReport:
    collectives: list[CollectiveIssue] = field(default_factory=list)
    p2p: list[P2PIssue] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.collectives and not self.p2p

    def stuck_ranks(self) -> set[int]:
        out = set()
        for c in self.collectives:
            out.update(c.missing)
        return out

    def format(self) -> str:
        if self.clean:
            return "no hang detected"
        return "\n".join(i.describe() for i in [*self.collectives, *self.p2p])


def analyze_recorder(records: Iterable[CollectiveRecord]) -> HangReport:
    """Find the earliest collective not completed by every member, and stuck p2p channels."""
    report = HangReport()
    by_group: dict[tuple, dict[int, dict[int, CollectiveRecord]]] = collections.defaultdict(
        lambda: collections.defaultdict(dict))
    sends: dict[tuple, list[CollectiveRecord]] = collections.defaultdict(list)
    recvs: dict[tuple, list[CollectiveRecord]] = collections.defaultdict(list)
    for r in records:
        if r.kind == "send":
            sends[(r.rank, r.peer, r.tag)].append(r)
        elif r.kind == "recv":
            recvs[(r.peer, r.rank, r.tag)].append(r)
        else:
            by_group[tuple(r.group)][r.seq_id][r.rank] = r

    for group, seqs in sorted(by_group.items()):
        last_enqueued = {m: -1 for m in group}
        for seq, per_rank in seqs.items():
            for m in per_rank:
                last_enqueued[m] = max(last_enqueued[m], seq)
        last_all = -1
        for seq in range(max(seqs) + 1):
            per_rank = seqs.get(seq, {})
            done = [m for m in group if m in per_rank and per_rank[m].completed]
            if len(done) == len(group):
                last_all = seq
                continue
            kind = next(iter(per_rank.values())).kind if per_rank else "unknown"
            report.collectives.append(CollectiveIssue(
                group=group, seq_id=seq, kind=kind,
                missing=[m for m in group if m not in per_rank],
                waiting=[m for m in group if m in per_rank and not per_rank[m].completed],
                last_completed_seq=last_all, last_enqueued=last_enqueued))
            break

    for key in sorted(set(sends) | set(recvs), key=lambda k: (k[0], k[1], k[2])):
        s_list, r_list = sends.get(key, []), recvs.get(key, [])
        last_send = max((r.seq_id for r in s_list if r.completed), default=-1)
        last_recv = max((r.seq_id for r in r_list if r.completed), default=-1)
        blocked = [r for r in r_list if not r.completed]
        for r in blocked:
            report.p2p.append(P2PIssue(key[0], key[1], key[2], "recv_blocked", r.seq_id,
                                       last_send, last_recv))
        received = {r.seq_id for r in r_list}
        for s in s_list:
            if s.seq_id not in received:
                report.p2p.append(P2PIssue(key[0], key[1], key[2], "send_unmatched", s.seq_id,
                                           last_send, last_recv))
    return report
