"""Distributed tensors: a local shard plus mesh, placements and global shape.

Sharding follows ceiling-division chunking: along a dim of extent ``n`` split
``W`` ways, chunk ``c`` covers ``[c*ceil(n/W), min((c+1)*ceil(n/W), n))`` so
trailing chunks may be short or empty. Collectives only ever see padded,
equal-sized pieces; padding is stripped immediately afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import ndtensor as nt
from .simruntime import DeviceMesh, current


@dataclass(frozen=True)
class Shard:
    dim: int

    def __repr__(self) -> str:
        return f"Shard({self.dim})"


@dataclass(frozen=True)
class Replicate:
    def __repr__(self) -> str:
        return "Replicate()"


@dataclass(frozen=True)
class Partial:
    reduce_op: str = "sum"

    def __post_init__(self):
        if self.reduce_op != "sum":
            raise ValueError("only Partial(sum) is supported")

    def __repr__(self) -> str:
        return "Partial()"


Placement = Union[Shard, Replicate, Partial]


class PlacementError(ValueError):
    pass


def shard_range(n: int, world: int, index: int) -> tuple[int, int]:
    chunk = -(-n // world) if n else 0
    start = min(index * chunk, n)
    return start, min(start + chunk, n)


def shard_sizes(n: int, world: int) -> list[int]:
    return [b - a for a, b in (shard_range(n, world, i) for i in range(world))]


def validate_placements(global_shape: Sequence[int], mesh: DeviceMesh,
                        placements: Sequence[Placement]) -> tuple[Placement, ...]:
    placements = tuple(placements)
    if len(placements) != mesh.ndim:
        raise PlacementError(f"{len(placements)} placements for a {mesh.ndim}-D mesh")
    seen = set()
    for p in placements:
        if isinstance(p, Shard):
            if not 0 <= p.dim < len(global_shape):
                raise PlacementError(f"{p} out of range for a {len(global_shape)}-D tensor")
            if p.dim in seen:
                raise PlacementError(f"tensor dim {p.dim} sharded twice in {placements}")
            seen.add(p.dim)
        elif not isinstance(p, (Replicate, Partial)):
            raise PlacementError(f"not a placement: {p!r}")
    return placements


def local_region(global_shape: Sequence[int], mesh_shape: Sequence[int],
                 placements: Sequence[Placement], coordinate: Sequence[int]) -> tuple[slice, ...]:
    """Hyperrectangle of the global tensor held at ``coordinate``."""
    region = [slice(0, n) for n in global_shape]
    for extent, p, c in zip(mesh_shape, placements, coordinate):
        if isinstance(p, Shard):
            a, b = shard_range(global_shape[p.dim], extent, c)
            region[p.dim] = slice(a, b)
    return tuple(region)


class DTensor:
    def __init__(self, local: np.ndarray, mesh: DeviceMesh, placements: Sequence[Placement],
                 global_shape: Sequence[int]):
        self.local = local
        self.mesh = mesh
        self.global_shape = tuple(int(s) for s in global_shape)
        self.placements = validate_placements(self.global_shape, mesh, placements)
        expected = tuple(s.stop - s.start for s in self.region())
        if tuple(local.shape) != expected:
            raise PlacementError(f"local shape {local.shape} != expected {expected} for "
                                 f"{self.placements} of {self.global_shape}")

    @property
    def coordinate(self) -> tuple[int, ...]:
        return self.mesh.coordinate(current().rank)

    @property
    def dtype(self) -> np.dtype:
        return self.local.dtype

    def region(self, coordinate: Sequence[int] | None = None) -> tuple[slice, ...]:
        coord = self.coordinate if coordinate is None else coordinate
        return local_region(self.global_shape, self.mesh.shape, self.placements, coord)

    def redistribute(self, placements: Sequence[Placement]) -> "DTensor":
        return redistribute(self, placements)

    def full_tensor(self) -> np.ndarray:
        return full_tensor(self)

    def __repr__(self) -> str:
        return (f"DTensor(global={self.global_shape}, local={self.local.shape}, "
                f"placements={self.placements}, mesh={self.mesh})")


def from_local(local: np.ndarray, mesh: DeviceMesh, placements: Sequence[Placement],
               global_shape: Sequence[int]) -> DTensor:
    return DTensor(local, mesh, placements, global_shape)


def distribute(full: np.ndarray, mesh: DeviceMesh, placements: Sequence[Placement]) -> DTensor:
    """Take this rank's piece of ``full`` (identical on every rank) per ``placements``."""
    placements = validate_placements(full.shape, mesh, placements)
    coord = mesh.coordinate(current().rank)
    local = np.array(full[local_region(full.shape, mesh.shape, placements, coord)], copy=True)
    for i, p in enumerate(placements):
        if isinstance(p, Partial) and coord[i] != 0:
            local = np.zeros_like(local)
    return DTensor(local, mesh, placements, full.shape)


# --------------------------------------------------------------------------
# per-mesh-dim transitions


def _mesh_group(mesh: DeviceMesh, i: int) -> tuple[int, ...]:
    return mesh.group(mesh.dim_names[i], current().rank)


def _pad_to(x: np.ndarray, dim: int, size: int) -> np.ndarray:
    if x.shape[dim] == size:
        return x
    pad = [(0, 0)] * x.ndim
    pad[dim] = (0, size - x.shape[dim])
    return np.pad(x, pad)


def gather_shards(local: np.ndarray, dim: int, n: int, group: Sequence[int],
                  label: str = "", overlappable: bool = False) -> np.ndarray:
    """All-gather ceil-chunked shards of a dim of global extent ``n`` (pads inside)."""
    w = len(group)
    if w == 1:
        return local
    chunk = -(-n // w)
    gathered = current().all_gather(_pad_to(local, dim, chunk), group, dim=dim, label=label,
                                    overlappable=overlappable)
    pieces = [np.take(gathered, np.arange(i * chunk, i * chunk + s), axis=dim)
              for i, s in enumerate(shard_sizes(n, w))]
    return np.concatenate(pieces, axis=dim)


def scatter_reduce(full: np.ndarray, dim: int, group: Sequence[int], label: str = "",
                   overlappable: bool = False) -> np.ndarray:
    """Reduce-scatter (sum) a tensor whose ``dim`` has the unsharded extent."""
    w = len(group)
    n = full.shape[dim]
    if w == 1:
        return full
    chunk = -(-n // w)
    out = current().reduce_scatter(_pad_to(full, dim, chunk * w), group, dim=dim, label=label,
                                   overlappable=overlappable)
    idx = group.index(current().rank)
    a, b = shard_range(n, w, idx)
    return np.take(out, np.arange(0, b - a), axis=dim)


def take_shard(full: np.ndarray, dim: int, world: int, index: int) -> np.ndarray:
    a, b = shard_range(full.shape[dim], world, index)
    return np.array(np.take(full, np.arange(a, b), axis=dim), copy=True)


def redistribute(dt: DTensor, placements: Sequence[Placement]) -> DTensor:
    target = validate_placements(dt.global_shape, dt.mesh, placements)
    mesh = dt.mesh
    coord = dt.coordinate
    cur = list(dt.placements)
    local = dt.local

    # phase 1: lift every changing mesh dim to Replicate (or reduce-scatter straight
    # into a Shard when that dim is free)
    for i in reversed(range(mesh.ndim)):
        src, dst = cur[i], target[i]
        if src == dst:
            continue
        group = _mesh_group(mesh, i)
        if isinstance(src, Shard):
            local = gather_shards(local, src.dim, dt.global_shape[src.dim], group, "redistribute")
        elif isinstance(src, Partial):
            others = {p.dim for j, p in enumerate(cur) if j != i and isinstance(p, Shard)}
            if isinstance(dst, Shard) and dst.dim not in others:
                local = scatter_reduce(local, dst.dim, group, "redistribute")
                cur[i] = dst
                continue
            local = current().all_reduce(local, group, "sum", label="redistribute")
        cur[i] = Replicate()

    # phase 2: descend from Replicate to the targets with local ops
    for i in range(mesh.ndim):
        dst = target[i]
        if cur[i] == dst:
            continue
        if isinstance(dst, Shard):
            local = take_shard(local, dst.dim, mesh.shape[i], coord[i])
        elif isinstance(dst, Partial) and coord[i] != 0:
            local = np.zeros_like(local)
        cur[i] = dst
    if local is dt.local:
        local = dt.local.copy()
    return DTensor(local, mesh, target, dt.global_shape)


def full_tensor(dt: DTensor) -> np.ndarray:
    if all(isinstance(p, Replicate) for p in dt.placements):
        return dt.local
    return redistribute(dt, [Replicate()] * dt.mesh.ndim).local


# --------------------------------------------------------------------------
# sharded operators (rule table, 1-D meshes)


def _one_dim(*dts: DTensor) -> DeviceMesh:
    mesh = dts[0].mesh
    if any(d.mesh != mesh for d in dts):
        raise PlacementError("operands live on different meshes")
    if mesh.ndim != 1:
        raise PlacementError("sharded operator rules are defined for 1-D meshes")
    return mesh


def sharded_matmul(x: DTensor, w: DTensor, style: str) -> DTensor:
    """Column- or row-wise parallel ``x @ w`` (``w`` stored as ``[in, out]``)."""
    mesh = _one_dim(x, w)  # a mesh of one is just a plain matmul under the same rules
    last = len(x.global_shape) - 1
    (px,), (pw,) = x.placements, w.placements
    out_shape = (*x.global_shape[:-1], w.global_shape[1])
    if style == "colwise":
        if px != Replicate() or pw != Shard(1):
            raise PlacementError(f"colwise needs x Replicate, w Shard(1); got {px}, {pw}")
        return DTensor(nt.matmul(x.local, w.local), mesh, [Shard(last)], out_shape)
    if style == "rowwise":
        if px != Shard(last) or pw != Shard(0):
            raise PlacementError(f"rowwise needs x Shard({last}), w Shard(0); got {px}, {pw}")
        return DTensor(nt.matmul(x.local, w.local), mesh, [Partial()], out_shape)
    raise PlacementError(f"unknown matmul style {style!r}")


def sharded_rms_norm(x: DTensor, w: DTensor, eps: float) -> DTensor:
    """Norm over the feature dim; x may be sharded on any other dim."""
    _one_dim(x, w)
    (px,), (pw,) = x.placements, w.placements
    if pw != Replicate() or isinstance(px, Partial) or px == Shard(len(x.global_shape) - 1):
        raise PlacementError(f"rms_norm needs the feature dim whole: x {px}, w {pw}")
    return DTensor(nt.rms_norm(x.local, w.local, eps), x.mesh, x.placements, x.global_shape)


def sharded_embedding(table: DTensor, ids: np.ndarray) -> DTensor:
    """Lookup in a vocab-sharded (Shard(0)) or replicated table; ids replicated."""
    mesh = _one_dim(table)
    (pt,) = table.placements
    out_shape = (*np.shape(ids), table.global_shape[1])
    if pt == Replicate():
        return DTensor(nt.embedding_lookup(table.local, ids), mesh, [Replicate()], out_shape)
    if pt != Shard(0):
        raise PlacementError(f"embedding table must be Shard(0) or Replicate, got {pt}")
    lo, hi = table.region()[0].start, table.region()[0].stop
    return DTensor(vocab_parallel_lookup(table.local, ids, lo, hi), mesh, [Partial()], out_shape)


def vocab_parallel_lookup(table_local: np.ndarray, ids: np.ndarray, lo: int, hi: int) -> np.ndarray:
    ids = np.asarray(ids)
    mine = (ids >= lo) & (ids < hi)
    out = np.zeros((*ids.shape, table_local.shape[1]), dtype=table_local.dtype)
    out[mine] = table_local[ids[mine] - lo]
    return out


def vocab_parallel_lookup_backward(d_out: np.ndarray, ids: np.ndarray, lo: int, hi: int) -> np.ndarray:
    ids = np.asarray(ids)
    mine = (ids >= lo) & (ids < hi)
    d_table = np.zeros((hi - lo, d_out.shape[-1]), dtype=d_out.dtype)
    np.add.at(d_table, ids[mine] - lo, d_out[mine])
    return d_table


def sharded_pointwise(op: str, *xs: DTensor) -> DTensor:
    """add / mul / silu on operands sharing one Shard or Replicate placement."""
    _one_dim(*xs)
    placements = {x.placements for x in xs}
    if len(placements) != 1 or isinstance(xs[0].placements[0], Partial) and op != "add":
        raise PlacementError(f"{op} needs identical non-Partial placements, got {placements}")
    fn = {"add": nt.add, "mul": nt.mul, "silu": nt.silu}[op]
    return DTensor(fn(*(x.local for x in xs)), xs[0].mesh, xs[0].placements, xs[0].global_shape)


def sharded_sdpa(q: DTensor, k: DTensor, v: DTensor, causal: bool = True) -> DTensor:
    """Attention with heads sharded (Shard on the head dim) or replicated."""
    _one_dim(q, k, v)
    head_dim = len(q.global_shape) - 3
    p = q.placements[0]
    if {k.placements[0], v.placements[0]} != {p} or p not in (Replicate(), Shard(head_dim)):
        raise PlacementError(f"sdpa needs q/k/v all Shard({head_dim}) or Replicate")
    return DTensor(nt.sdpa(q.local, k.local, v.local, causal), q.mesh, q.placements, q.global_shape)


def local_nbytes(dt: DTensor) -> int:
    return int(dt.local.nbytes)


def chunk_count(n: int, world: int) -> int:
    return math.ceil(n / world) if world else 0
