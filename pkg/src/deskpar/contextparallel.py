"""Context parallelism: load-balanced sequence sharding and ring attention.

The sequence is cut into ``2W`` equal chunks and rank ``r`` keeps chunks
``r`` and ``2W-1-r``, so every rank gets the same amount of causal work.

Attention against remote K/V is computed block by block (one block per K/V
chunk) and merged with log-sum-exp renormalisation. Merging always happens in
ascending K/V chunk order, which makes the result independent of how the
blocks travelled (one all-gather or a ring of point-to-point sends).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .simruntime import current

ROTATE_METHODS = ("allgather", "alltoall_p2p_ring")


@dataclass(frozen=True)
class CPConfig:
    degree: int = 1
    rotate_method: str = "allgather"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("context parallel degree must be >= 1")
        if self.rotate_method not in ROTATE_METHODS:
            raise ValueError(f"unknown rotate method {self.rotate_method!r}; use one of {ROTATE_METHODS}")


@dataclass(frozen=True)
class CPShardSpec:
    seq_dim: int
    restore: bool = True


def chunk_ids(world: int, rank: int) -> tuple[int, int]:
    return rank, 2 * world - 1 - rank


def chunk_owner(chunk: int, world: int) -> int:
    return chunk if chunk < world else 2 * world - 1 - chunk


def local_positions(seq_len: int, world: int, rank: int) -> np.ndarray:
    """Global token positions held by ``rank`` (in local order)."""
    if seq_len % (2 * world):
        raise ValueError(f"sequence length {seq_len} not divisible by 2*cp = {2 * world}")
    size = seq_len // (2 * world)
    return np.concatenate([np.arange(c * size, (c + 1) * size) for c in chunk_ids(world, rank)])


def shard_sequence(buffers: Mapping[str, np.ndarray], spec: Mapping[str, CPShardSpec | int],
                   cp_group: Sequence[int], rank: int | None = None) -> dict[str, np.ndarray]:
    """Keep this rank's two load-balanced chunks of every buffer."""
    world = len(cp_group)
    rank = current().rank if rank is None else rank
    idx = list(cp_group).index(rank)
    out = {}
    for name, buf in buffers.items():
        s = spec[name]
        dim = s.seq_dim if isinstance(s, CPShardSpec) else int(s)
        if not 0 <= dim < buf.ndim:
            raise ValueError(f"{name}: seq dim {dim} invalid for shape {buf.shape}")
        pos = local_positions(buf.shape[dim], world, idx)
        out[name] = np.take(buf, pos, axis=dim)
    return out


def unshard_sequence(local: np.ndarray, seq_dim: int, cp_group: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`shard_sequence` (all-gather plus reorder)."""
    world = len(cp_group)
    if world == 1:
        return local
    gathered = current().all_gather(local, cp_group, dim=seq_dim, label="cp_unshard")
    seq = gathered.shape[seq_dim]
    order = np.concatenate([local_positions(seq, world, r) for r in range(world)])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(seq)
    return np.take(gathered, inverse, axis=seq_dim)


def count_unmasked_scores(seq_len: int, world: int, rank: int) -> int:
    pos = local_positions(seq_len, world, rank)
    return int(np.sum(pos + 1))


# --------------------------------------------------------------------------
# blockwise attention pieces


def _block_scores(q, k, q_pos, k_pos, causal):
    s = np.matmul(q, np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if causal:
        s = np.where(k_pos[None, :] > q_pos[:, None], -np.inf, s)
    return s


def _block_forward(q, k, v, q_pos, k_pos, causal):
    """Partial attention output and log-sum-exp of one (q chunk, kv chunk) block."""
    s = _block_scores(q, k, q_pos, k_pos, causal)
    m = np.max(s, axis=-1, keepdims=True)
    p = np.exp(s - m)
    total = p.sum(axis=-1, keepdims=True)
    return np.matmul(p / total, v), (m + np.log(total))[..., 0]


def _merge(o1, lse1, o2, lse2):
    if o1 is None:
        return o2, lse2
    lse = np.logaddexp(lse1, lse2)
    return (np.exp(lse1 - lse)[..., None] * o1 + np.exp(lse2 - lse)[..., None] * o2), lse


def _visible(q_chunk: int, kv_chunk: int, causal: bool) -> bool:
    return not causal or kv_chunk <= q_chunk


@dataclass
class RingCache:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    out: np.ndarray
    lse: np.ndarray
    causal: bool

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.q, self.k, self.v, self.out, self.lse))


def _split_chunks(x: np.ndarray) -> list[np.ndarray]:
    half = x.shape[-2] // 2
    return [x[..., :half, :], x[..., half:, :]]


def _gather_kv(k, v, group, method, label):
    """All K/V chunks of the group, keyed by chunk id."""
    world = len(group)
    me = group.index(current().rank)
    blocks = {}
    if method == "allgather":
        kk = current().all_gather(k, group, dim=k.ndim - 2, label=label)
        vv = current().all_gather(v, group, dim=v.ndim - 2, label=label)
        n = k.shape[-2]
        for j in range(world):
            for part, c in enumerate(chunk_ids(world, j)):
                sl = slice(j * n + part * (n // 2), j * n + (part + 1) * (n // 2))
                blocks[c] = (kk[..., sl, :], vv[..., sl, :])
        return blocks
    # ring: W-1 rotations, each rank forwards what it last received
    held_k, held_v, src = k, v, me
    for step in range(world):
        for part, c in enumerate(chunk_ids(world, src)):
            blocks[c] = (_split_chunks(held_k)[part], _split_chunks(held_v)[part])
        if step == world - 1:
            break
        nxt, prv = group[(me + 1) % world], group[(me - 1) % world]
        current().send(np.concatenate([held_k, held_v], axis=-1), nxt, tag=f"{label}:ring", label=label)
        kv = current().recv(prv, (*k.shape[:-1], 2 * k.shape[-1]), k.dtype, tag=f"{label}:ring", label=label)
        held_k, held_v = kv[..., : k.shape[-1]], kv[..., k.shape[-1]:]
        src = (src - 1) % world
    return blocks


def ring_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, cp_group: Sequence[int],
                   rotate_method: str = "allgather", causal: bool = True,
                   label: str = "ring_attention") -> tuple[np.ndarray, RingCache]:
    """Attention of local ``q[..., s_local, hd]`` against the whole CP group's K/V."""
    group = tuple(cp_group)
    world = len(group)
    if rotate_method not in ROTATE_METHODS:
        raise ValueError(f"unknown rotate method {rotate_method!r}")
    if q.shape[-2] % 2 or q.shape != k.shape or k.shape != v.shape:
        raise ValueError(f"ring attention needs equal q/k/v shapes with an even local seq: {q.shape}")
    me = group.index(current().rank)
    n = q.shape[-2] // 2
    blocks = _gather_kv(k, v, group, rotate_method, label) if world > 1 else {
        c: (kc, vc) for c, kc, vc in zip(chunk_ids(1, 0), _split_chunks(k), _split_chunks(v))}
    outs, lses = [], []
    for qc, q_part in zip(chunk_ids(world, me), _split_chunks(q)):
        q_pos = np.arange(qc * n, (qc + 1) * n)
        o, lse = None, None
        for c in range(2 * world):
            if not _visible(qc, c, causal):
                continue
            kc, vc = blocks[c]
            po, pl = _block_forward(q_part, kc, vc, q_pos, np.arange(c * n, (c + 1) * n), causal)
            o, lse = _merge(o, lse, po, pl)
        outs.append(o)
        lses.append(lse)
    out = np.concatenate(outs, axis=-2)
    return out, RingCache(q, k, v, out, np.concatenate(lses, axis=-1), causal)


def ring_attention_backward(d_out: np.ndarray, cache: RingCache, cp_group: Sequence[int],
                            rotate_method: str = "allgather",
                            label: str = "ring_attention") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    group = tuple(cp_group)
    world = len(group)
    me = group.index(current().rank)
    q, k, v, causal = cache.q, cache.k, cache.v, cache.causal
    n = q.shape[-2] // 2
    scale = 1.0 / math.sqrt(q.shape[-1])
    blocks = _gather_kv(k, v, group, rotate_method, label) if world > 1 else {
        c: (kc, vc) for c, kc, vc in zip(chunk_ids(1, 0), _split_chunks(k), _split_chunks(v))}
    d_kv = {c: (np.zeros_like(blocks[c][0]), np.zeros_like(blocks[c][1])) for c in blocks}
    d_q_parts = []
    delta_all = np.sum(d_out * cache.out, axis=-1)
    for part, qc in enumerate(chunk_ids(world, me)):
        sl = slice(part * n, (part + 1) * n)
        q_part, do_part = q[..., sl, :], d_out[..., sl, :]
        lse, delta = cache.lse[..., sl], delta_all[..., sl]
        q_pos = np.arange(qc * n, (qc + 1) * n)
        d_q = np.zeros_like(q_part)
        for c in range(2 * world):
            if not _visible(qc, c, causal):
                continue
            kc, vc = blocks[c]
            s = _block_scores(q_part, kc, q_pos, np.arange(c * n, (c + 1) * n), causal)
            p = np.exp(s - lse[..., None])
            dk, dv = d_kv[c]
            dv += np.matmul(np.swapaxes(p, -1, -2), do_part)
            d_s = p * (np.matmul(do_part, np.swapaxes(vc, -1, -2)) - delta[..., None])
            d_q = d_q + np.matmul(d_s, kc) * scale
            dk += np.matmul(np.swapaxes(d_s, -1, -2), q_part) * scale
        d_q_parts.append(d_q)
    d_q = np.concatenate(d_q_parts, axis=-2)

    def packed(j):  # contributions to rank j's K/V, in its local chunk order
        a, b = chunk_ids(world, j)
        return np.concatenate([np.concatenate([d_kv[a][0], d_kv[b][0]], axis=-2),
                               np.concatenate([d_kv[a][1], d_kv[b][1]], axis=-2)], axis=-1)

    if world == 1:
        mine = packed(0)
    elif rotate_method == "allgather":
        mine = current().reduce_scatter(np.concatenate([packed(j) for j in range(world)], axis=-2),
                                        group, dim=q.ndim - 2, label=label)
    else:
        for j in range(world):
            if j != me:
                current().send(packed(j), group[j], tag=f"{label}:dkv", label=label)
        parts = [packed(j) if j == me else None for j in range(world)]
        for j in range(world):
            if j != me:
                parts[j] = current().recv(group[j], parts[me].shape, parts[me].dtype,
                                          tag=f"{label}:dkv", label=label)
        mine = parts[0].copy()
        for p in parts[1:]:
            mine = mine + p  # same left-to-right order as a reduce-scatter
    hd = k.shape[-1]
    return d_q, mine[..., :hd], mine[..., hd:]
