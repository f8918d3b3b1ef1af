"""Pipeline parallelism: model splitting, schedules, validation and execution.

Stages are numbered ``0..N-1`` with ``N = S * V``; rank ``r`` owns stages
``r, r + S, r + 2S, ...`` (looped placement). A schedule is a per-rank list of
:class:`ScheduleAction`. Compute orders are produced by an event-driven list
scheduler that differs per schedule only in its policy (when to prefer a
forward over a backward, and how many microbatches may be in flight), so every
generated order is feasible by construction. Communication actions are added
afterwards by :func:`insert_comms`.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .model import MetaModel
from .simruntime import current

SCHEDULES = ("gpipe", "1f1b", "interleaved_1f1b", "zero_bubble")

FORWARD = "F"
BACKWARD_INPUT = "I"
BACKWARD_WEIGHT = "W"
SEND_ACT = "SEND_F"
RECV_ACT = "RECV_F"
SEND_GRAD = "SEND_B"
RECV_GRAD = "RECV_B"
COMPUTE_KINDS = (FORWARD, BACKWARD_INPUT, BACKWARD_WEIGHT)
COMM_KINDS = (SEND_ACT, RECV_ACT, SEND_GRAD, RECV_GRAD)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    degree: int = 1
    split_points: tuple[str, ...] = ()
    schedule: str = "1f1b"
    microbatches: int = 1

    def __post_init__(self):
        object.__setattr__(self, "split_points", tuple(self.split_points))
        if self.degree < 1:
            raise ValueError("pipeline degree must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown pipeline schedule {self.schedule!r}; use one of {SCHEDULES}")
        if self.microbatches < 1:
            raise ValueError("microbatches must be >= 1")
        if self.num_stages % self.degree:
            raise ValueError(f"{self.num_stages} stages cannot be spread evenly over {self.degree} ranks")

    @property
    def num_stages(self) -> int:
        return len(self.split_points) + 1

    @property
    def stages_per_rank(self) -> int:
        return self.num_stages // self.degree


@dataclass(frozen=True)
class ScheduleAction:
    kind: str
    stage: int
    mb: int

    def __str__(self) -> str:
        return f"{self.kind}(s={self.stage},mb={self.mb})"


@dataclass
class PipelineSchedule:
    name: str
    num_ranks: int
    num_stages: int
    microbatches: int
    actions: dict[int, list[ScheduleAction]] = field(default_factory=dict)

    @property
    def stages_per_rank(self) -> int:
        return self.num_stages // self.num_ranks

    @property
    def split_backward(self) -> bool:
        """Whether I and W are independent actions (otherwise each I+W pair is one backward)."""
        return self.name == "zero_bubble"

    def owner(self, stage: int) -> int:
        return stage % self.num_ranks

    def local_stages(self, rank: int) -> list[int]:
        return list(range(rank, self.num_stages, self.num_ranks))

    def dump(self) -> str:
        return "\n".join(f"rank {r}: " + " ".join(str(a) for a in self.actions[r])
                         for r in range(self.num_ranks))

    def copy(self) -> "PipelineSchedule":
        return PipelineSchedule(self.name, self.num_ranks, self.num_stages, self.microbatches,
                                {r: list(a) for r, a in self.actions.items()})


# --------------------------------------------------------------------------
# splitting


def split_model(meta: MetaModel, cfg: PipelineConfig) -> list[list[str]]:
    """Top-level module names of every stage, cut before each split point."""
    modules = meta.top_level()
    cuts = []
    for p in cfg.split_points:
        if p not in modules:
            raise ValueError(f"split point {p!r} is not a top-level module")
        idx = modules.index(p)
        if idx == 0:
            raise ValueError(f"split point {p!r} would leave an empty first stage")
        cuts.append(idx)
    if cuts != sorted(set(cuts)):
        raise ValueError(f"split points must be distinct and in model order: {list(cfg.split_points)}")
    bounds = [0, *cuts, len(modules)]
    return [modules[a:b] for a, b in zip(bounds, bounds[1:])]


def even_split_points(n_layers: int, num_stages: int) -> tuple[str, ...]:
    """Split points giving each stage ``n_layers / num_stages`` blocks."""
    if num_stages < 1 or n_layers < num_stages:
        raise ValueError(f"cannot split {n_layers} layers into {num_stages} stages")
    return tuple(f"layers.{(k * n_layers) // num_stages}" for k in range(1, num_stages))


# --------------------------------------------------------------------------
# schedule generation


def _orders(S: int, V: int, m: int, rank: int):
    group = min(S, m)
    fwd, bwd = [], []
    for g0 in range(0, m, group):
        mbs = range(g0, min(g0 + group, m))
        for v in range(V):
            fwd += [(v * S + rank, j) for j in mbs]
        for v in reversed(range(V)):
            bwd += [(v * S + rank, j) for j in mbs]
    return fwd, bwd


def _warmup(name: str, S: int, V: int, m: int, rank: int) -> int:
    """Forwards a rank runs before it starts alternating with backwards."""
    if name == "gpipe":
        return V * m
    if V == 1:
        return min(S - 1 - rank, m)
    return min((V - 1) * S + 2 * (S - 1 - rank), V * m)


def build_schedule(name: str, num_ranks: int, num_stages: int, microbatches: int,
                   costs: Mapping[str, float] | None = None) -> PipelineSchedule:
    """Compute-only schedule; see :func:`insert_comms` for the p2p actions."""
    if name not in SCHEDULES:
        raise ValueError(f"unknown schedule {name!r}")
    S, m, N = num_ranks, microbatches, num_stages
    if S < 1 or m < 1 or N % S:
        raise ValueError(f"bad schedule shape: ranks={S} stages={N} microbatches={m}")
    V = N // S
    costs = _costs(costs)
    split = name == "zero_bubble"
    fwd, bwd = zip(*(_orders(S, V, m, r) for r in range(S)))
    warmup = [_warmup(name, S, V, m, r) for r in range(S)]
    want_b = [False] * S  # strict 1F1B alternation after warmup
    done: dict[tuple, float] = {}
    free = [0.0] * S
    fi, bi, inflight = [0] * S, [0] * S, [0] * S
    pending_w = [collections.deque() for _ in range(S)]
    out: dict[int, list[ScheduleAction]] = {r: [] for r in range(S)}
    total = 3 * N * m
    t = 0.0

    def ready(key, when):
        return key in done and done[key] <= when

    while len(done) < total:
        for r in range(S):
            if free[r] > t:
                continue
            f_ok = fi[r] < len(fwd[r]) and (fwd[r][fi[r]][0] == 0 or ready(("F", fwd[r][fi[r]][0] - 1, fwd[r][fi[r]][1]), t))
            b_ok = False
            if bi[r] < len(bwd[r]):
                s, j = bwd[r][bi[r]]
                b_ok = ready(("F", s, j), t) and (s == N - 1 or ready(("I", s + 1, j), t))
            choice = None
            if name == "gpipe":
                choice = "F" if f_ok else "B" if b_ok else None
            elif split:  # zero bubble: input grads first, weight grads fill idle time
                if b_ok:
                    choice = "B"
                elif f_ok and inflight[r] <= warmup[r]:
                    choice = "F"
                elif pending_w[r]:
                    choice = "W"
            elif fi[r] < warmup[r]:
                choice = "F" if f_ok else None
            elif fi[r] == len(fwd[r]) or want_b[r]:
                choice = "B" if b_ok else None
            else:
                choice = "F" if f_ok else None
            if choice is None:
                continue
            if choice == "F":
                s, j = fwd[r][fi[r]]
                fi[r] += 1
                inflight[r] += 1
                want_b[r] = fi[r] > warmup[r]
                end = t + costs["F"]
                out[r].append(ScheduleAction(FORWARD, s, j))
                done[("F", s, j)] = end
            elif choice == "B":
                s, j = bwd[r][bi[r]]
                bi[r] += 1
                inflight[r] -= 1
                want_b[r] = False
                end = t + costs["I"]
                out[r].append(ScheduleAction(BACKWARD_INPUT, s, j))
                done[("I", s, j)] = end
                if split:
                    pending_w[r].append((s, j))
                else:  # fused backward: the input grad is ready only once W is done too
                    end += costs["W"]
                    out[r].append(ScheduleAction(BACKWARD_WEIGHT, s, j))
                    done[("I", s, j)] = done[("W", s, j)] = end
            else:
                s, j = pending_w[r].popleft()
                end = t + costs["W"]
                out[r].append(ScheduleAction(BACKWARD_WEIGHT, s, j))
                done[("W", s, j)] = end
            free[r] = end
        later = [x for x in (*free, *done.values()) if x > t]
        if not later:
            if len(done) < total:
                raise ScheduleError(f"{name}: generator stalled at t={t} (S={S}, V={V}, m={m})")
            break
        t = min(later)
    return PipelineSchedule(name, S, N, m, out)


def _fused(acts: Sequence[ScheduleAction], n: int, split: bool = False) -> bool:
    """Whether ``acts[n]`` is an I immediately followed by its own W (a plain backward)."""
    a = acts[n]
    return (not split and a.kind == BACKWARD_INPUT and n + 1 < len(acts)
            and acts[n + 1] == ScheduleAction(BACKWARD_WEIGHT, a.stage, a.mb))


def insert_comms(schedule: PipelineSchedule) -> PipelineSchedule:
    """Add send/recv actions for every stage boundary that crosses ranks.

    Sends follow the producing compute; receives sit just before the consumer.
    """
    S, N = schedule.num_ranks, schedule.num_stages
    out = {}
    for r, acts in schedule.actions.items():
        seq = []
        for n, a in enumerate(acts):
            if a.kind in COMM_KINDS:
                raise ScheduleError("insert_comms expects a compute-only schedule")
            if a.kind == FORWARD and a.stage > 0 and schedule.owner(a.stage - 1) != r:
                seq.append(ScheduleAction(RECV_ACT, a.stage, a.mb))
            if a.kind == BACKWARD_INPUT and a.stage < N - 1 and schedule.owner(a.stage + 1) != r:
                seq.append(ScheduleAction(RECV_GRAD, a.stage, a.mb))
            seq.append(a)
            if a.kind == FORWARD and a.stage < N - 1 and schedule.owner(a.stage + 1) != r:
                seq.append(ScheduleAction(SEND_ACT, a.stage, a.mb))
            split = schedule.split_backward
            grad_ready = a.kind == BACKWARD_INPUT and not _fused(acts, n, split)
            grad_ready |= a.kind == BACKWARD_WEIGHT and n > 0 and _fused(acts, n - 1, split)
            if grad_ready and a.stage > 0 and schedule.owner(a.stage - 1) != r:
                seq.append(ScheduleAction(SEND_GRAD, a.stage, a.mb))
        out[r] = seq
    return PipelineSchedule(schedule.name, S, N, schedule.microbatches, out)


def make_schedule(name: str, num_ranks: int, num_stages: int, microbatches: int) -> PipelineSchedule:
    return insert_comms(build_schedule(name, num_ranks, num_stages, microbatches))


# --------------------------------------------------------------------------
# validation


def _producer(a: ScheduleAction, N: int) -> ScheduleAction | None:
    """The send a receive pairs with."""
    if a.kind == RECV_ACT:
        return ScheduleAction(SEND_ACT, a.stage - 1, a.mb)
    if a.kind == RECV_GRAD:
        return ScheduleAction(SEND_GRAD, a.stage + 1, a.mb)
    return None


def validate_schedule(schedule: PipelineSchedule) -> None:
    """Raise :class:`ScheduleError` unless the schedule is complete, ordered and deadlock-free."""
    S, N, m = schedule.num_ranks, schedule.num_stages, schedule.microbatches
    if set(schedule.actions) != set(range(S)):
        raise ScheduleError(f"schedule must list ranks 0..{S - 1}")
    seen: collections.Counter = collections.Counter()
    for r, acts in schedule.actions.items():
        for a in acts:
            if a.kind not in COMPUTE_KINDS + COMM_KINDS:
                raise ScheduleError(f"rank {r}: unknown action kind {a.kind!r}")
            if not (0 <= a.stage < N and 0 <= a.mb < m):
                raise ScheduleError(f"rank {r}: {a} out of range")
            if schedule.owner(a.stage) != r:
                raise ScheduleError(f"rank {r}: {a} runs a stage owned by rank {schedule.owner(a.stage)}")
            seen[a] += 1
    for a, n in seen.items():
        if n > 1:
            raise ScheduleError(f"{a} appears {n} times")
    for s in range(N):
        for j in range(m):
            for kind in COMPUTE_KINDS:
                if ScheduleAction(kind, s, j) not in seen:
                    raise ScheduleError(f"missing {ScheduleAction(kind, s, j)}")
            cross_next = s < N - 1 and schedule.owner(s + 1) != schedule.owner(s)
            cross_prev = s > 0 and schedule.owner(s - 1) != schedule.owner(s)
            for kind, needed in ((SEND_ACT, cross_next), (RECV_ACT, cross_prev),
                                 (SEND_GRAD, cross_prev), (RECV_GRAD, cross_next)):
                a = ScheduleAction(kind, s, j)
                if needed and a not in seen:
                    raise ScheduleError(f"missing {a}")
                if not needed and a in seen:
                    raise ScheduleError(f"{a} has no cross-rank peer")

    # local data dependencies
    for r, acts in schedule.actions.items():
        pos = {a: i for i, a in enumerate(acts)}

        def before(dep: ScheduleAction, a: ScheduleAction):
            if dep not in pos or pos[dep] > pos[a]:
                raise ScheduleError(f"rank {r}: {a} precedes its dependency {dep}")

        for a in acts:
            s, j = a.stage, a.mb
            if a.kind == FORWARD and s > 0:
                before(ScheduleAction(RECV_ACT if schedule.owner(s - 1) != r else FORWARD,
                                      s if schedule.owner(s - 1) != r else s - 1, j), a)
            elif a.kind == BACKWARD_INPUT:
                before(ScheduleAction(FORWARD, s, j), a)
                if s < N - 1:
                    before(ScheduleAction(RECV_GRAD if schedule.owner(s + 1) != r else BACKWARD_INPUT,
                                          s if schedule.owner(s + 1) != r else s + 1, j), a)
            elif a.kind == BACKWARD_WEIGHT:
                before(ScheduleAction(BACKWARD_INPUT, s, j), a)
            elif a.kind == SEND_ACT:
                before(ScheduleAction(FORWARD, s, j), a)
            elif a.kind == SEND_GRAD:
                before(ScheduleAction(BACKWARD_INPUT, s, j), a)

    # global progress with blocking receives and buffered sends
    ptr = [0] * S
    sent: set = set()
    while True:
        moved = False
        for r in range(S):
            acts = schedule.actions[r]
            while ptr[r] < len(acts):
                a = acts[ptr[r]]
                dep = _producer(a, N)
                if dep is not None and dep not in sent:
                    break
                if a.kind in (SEND_ACT, SEND_GRAD):
                    sent.add(a)
                ptr[r] += 1
                moved = True
        if all(ptr[r] == len(schedule.actions[r]) for r in range(S)):
            return
        if not moved:
            stuck = {r: str(schedule.actions[r][ptr[r]]) for r in range(S) if ptr[r] < len(schedule.actions[r])}
            raise ScheduleError(f"deadlock: ranks blocked at {stuck}")


# --------------------------------------------------------------------------
# analysis


def _costs(unit_costs: Mapping[str, float] | None) -> dict:
    c = dict(unit_costs or {})
    f = c.get("F", 1)
    b = c.get("B", 2 * f)
    c.setdefault("F", f)
    c.setdefault("I", Fraction(b) / 2 if isinstance(b, (int, Fraction)) else b / 2)
    c.setdefault("W", b - c["I"])
    return c


def bubble_analysis(schedule: PipelineSchedule, unit_costs: Mapping[str, float] | None = None) -> dict:
    """Replay the per-rank orders with unit costs (communication is free).

    ``unit_costs`` holds F and B (backward defaults to 2F, split evenly into I
    and W). Integer or Fraction costs give an exact bubble fraction.
    """
    costs = _costs(unit_costs)
    S, N = schedule.num_ranks, schedule.num_stages
    finish: dict[tuple, object] = {}
    clock = [0] * S
    ptr = [0] * S
    timeline = []
    inflight = [0] * S
    peak = 0
    busy = 0

    def deps(a):
        s, j = a.stage, a.mb
        if a.kind == FORWARD:
            return [("F", s - 1, j)] if s > 0 else []
        if a.kind == BACKWARD_INPUT:
            return [("F", s, j)] + ([("I", s + 1, j)] if s < N - 1 else [])
        return [("I", s, j)]

    split = schedule.split_backward
    compute = {r: [a for a in schedule.actions[r] if a.kind not in COMM_KINDS] for r in range(S)}
    while any(ptr[r] < len(compute[r]) for r in range(S)):
        moved = False
        for r in range(S):
            acts = compute[r]
            while ptr[r] < len(acts):
                a = acts[ptr[r]]
                fused_w = a.kind == BACKWARD_WEIGHT and ptr[r] > 0 and _fused(acts, ptr[r] - 1, split)
                d = [] if fused_w else deps(a)
                if any(k not in finish for k in d):
                    break
                start = max([clock[r], *(finish[k] for k in d)])
                end = start + costs[a.kind]
                if not (a.kind == BACKWARD_INPUT and _fused(acts, ptr[r], split)):
                    finish[(a.kind, a.stage, a.mb)] = end
                if fused_w:  # the input grad of a plain backward is published here
                    finish[("I", a.stage, a.mb)] = end
                clock[r] = end
                busy += costs[a.kind]
                timeline.append({"rank": r, "action": str(a), "start": start, "end": end})
                if a.kind == FORWARD:
                    inflight[r] += 1
                    peak = max(peak, inflight[r])
                elif a.kind == BACKWARD_INPUT:
                    inflight[r] -= 1
                ptr[r] += 1
                moved = True
        if not moved:
            raise ScheduleError("bubble analysis: schedule cannot make progress")
    makespan = max(clock)
    bubble = 1 - Fraction(busy) / (S * Fraction(makespan)) if all(
        isinstance(v, (int, Fraction)) for v in costs.values()) else 1 - busy / (S * makespan)
    return {"bubble_fraction": bubble, "peak_inflight_microbatches": peak,
            "makespan": makespan, "timeline": timeline}


# --------------------------------------------------------------------------
# execution


def _stage_rank(mesh, rank: int, pp_index: int) -> int:
    coord = list(mesh.coordinate(rank))
    coord[mesh.dim_index("pp")] = pp_index
    return int(mesh.ranks[tuple(coord)])


def run_pipeline(parts: Mapping[int, "object"], schedule: PipelineSchedule, input_ids: np.ndarray,
                 labels: np.ndarray, mesh, act_shape: Sequence[int], act_dtype=np.float64) -> float | None:
    """Execute this rank's actions for one step.

    ``parts`` maps each local stage to its ModelPart; ``input_ids``/``labels``
    are this rank's (data/context sharded) batch, split into equal
    microbatches. Returns the mean microbatch loss on the last stage, else None.
    """
    ctx = current()
    m, N = schedule.microbatches, schedule.num_stages
    n = input_ids.shape[0]
    if n % m:
        raise ValueError(f"local batch {n} not divisible into {m} microbatches")
    size = n // m
    pp_rank = mesh.coordinate(ctx.rank)[mesh.dim_index("pp")]
    acts_in: dict = {}
    grads_in: dict = {}
    outputs: dict = {}
    d_inputs: dict = {}
    losses = {}
    shape = (size, *act_shape)
    for part in parts.values():
        part.begin_step(m, zero2=True)
    for a in schedule.actions[pp_rank]:
        s, j = a.stage, a.mb
        part = parts.get(s)
        if a.kind == FORWARD:
            x = input_ids[j * size:(j + 1) * size] if s == 0 else acts_in.pop((s, j))
            y = part.forward(j, x, labels[j * size:(j + 1) * size] if s == N - 1 else None)
            if s == N - 1:
                losses[j] = y
            elif schedule.owner(s + 1) == pp_rank:
                acts_in[(s + 1, j)] = y
            else:
                outputs[(s, j)] = y
        elif a.kind == BACKWARD_INPUT:
            d = part.backward_input(j, None if s == N - 1 else grads_in.pop((s, j)))
            if s > 0:
                if schedule.owner(s - 1) == pp_rank:
                    grads_in[(s - 1, j)] = d
                else:
                    d_inputs[(s, j)] = d
        elif a.kind == BACKWARD_WEIGHT:
            part.backward_weight(j)
        elif a.kind == SEND_ACT:
            ctx.send(outputs.pop((s, j)), _stage_rank(mesh, ctx.rank, schedule.owner(s + 1)),
                     tag=f"act:{s + 1}:{j}", label="pp_send_act")
        elif a.kind == RECV_ACT:
            acts_in[(s, j)] = ctx.recv(_stage_rank(mesh, ctx.rank, schedule.owner(s - 1)), shape, act_dtype,
                                       tag=f"act:{s}:{j}", label="pp_recv_act")
        elif a.kind == SEND_GRAD:
            ctx.send(d_inputs.pop((s, j)), _stage_rank(mesh, ctx.rank, schedule.owner(s - 1)),
                     tag=f"grad:{s - 1}:{j}", label="pp_send_grad")
        elif a.kind == RECV_GRAD:
            grads_in[(s, j)] = ctx.recv(_stage_rank(mesh, ctx.rank, schedule.owner(s + 1)), shape, act_dtype,
                                        tag=f"grad:{s}:{j}", label="pp_recv_grad")
    for part in parts.values():
        part.finish_step()
    if losses:
        return sum(losses[j] for j in range(m)) / m
    return None
