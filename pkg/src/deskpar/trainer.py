"""Per-rank training loop composing every parallelism on the simulated world."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import contextparallel as cp_mod
from . import dataloader as dl
from . import model as mdl
from . import parallelize as par
from . import pipeline as pl
from .simruntime import current


@dataclass(frozen=True)
class TrainSpec:
    model: mdl.ModelConfig = mdl.ModelConfig()
    dims: par.ParallelDims = par.ParallelDims()
    pipeline: pl.PipelineConfig = pl.PipelineConfig()
    data_parallel: par.DataParallelConfig | None = None
    ac: par.ACConfig = par.ACConfig()
    float8: par.Float8Config = par.Float8Config()
    enable_loss_parallel: bool = False
    async_tp_chunks: int = 1
    cp_rotate_method: str = "allgather"
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    local_batch: int = 2
    data_task: str = "bigram"
    token_file: str | None = None

    def resolved(self) -> "TrainSpec":
        return dataclasses.replace(self, dims=self.dims.resolve())


class RankTrainer:
    """One rank's model parts, optimizer state and data cursor."""

    def __init__(self, spec: TrainSpec):
        spec = spec.resolved()
        self.spec = spec
        dims = spec.dims
        if spec.pipeline.degree != dims.pp:
            raise ValueError(f"pipeline degree {spec.pipeline.degree} != pp mesh size {dims.pp}")
        self.mesh = dims.mesh()
        self.rank = current().rank
        coord = self.mesh.coordinate(self.rank)
        self.pp_rank = coord[0]
        self.dp_rank = coord[1] * dims.dp_shard + coord[2]
        meta = mdl.build_meta_model(spec.model)
        self.meta = meta
        stages = pl.split_model(meta, spec.pipeline)
        if dims.pp > 1:
            self.schedule = pl.make_schedule(spec.pipeline.schedule, dims.pp, len(stages),
                                             spec.pipeline.microbatches)
            pl.validate_schedule(self.schedule)
            local = self.schedule.local_stages(self.pp_rank)
        else:
            self.schedule = None
            local = list(range(len(stages)))
        self.parts = {}
        for s in local:
            self.parts[s] = par.build_part(
                meta, stages[s], dims, enable_loss_parallel=spec.enable_loss_parallel,
                async_tp_chunks=spec.async_tp_chunks, ac=spec.ac, float8=spec.float8,
                dp=spec.data_parallel, cp_method=spec.cp_rotate_method, master_seed=spec.seed,
                stage_index=s, num_stages=len(stages))
        if dims.pp == 1 and len(self.parts) > 1:
            raise ValueError("split points need pipeline_parallel_degree > 1")
        self.loader = dl.LoaderState(spec.seed, spec.model.vocab_size, spec.model.seq_len, spec.local_batch,
                                     self.dp_rank, dims.dp, task=spec.data_task, token_file=spec.token_file)
        self.step_count = 0

    @property
    def cp_group(self):
        return next(iter(self.parts.values())).cp_group

    def step(self) -> float:
        spec, dims = self.spec, self.spec.dims
        batch, self.loader = dl.next_batch(self.loader)
        if dims.cp > 1:
            batch = cp_mod.shard_sequence(batch, {"input_ids": 1, "labels": 1}, self.cp_group)
        ids, labels = batch["input_ids"], batch["labels"]
        m = spec.pipeline.microbatches
        if self.schedule is not None:
            seq = ids.shape[1] // dims.tp
            loss = pl.run_pipeline(self.parts, self.schedule, ids, labels, self.mesh,
                                   (seq, spec.model.dim), np.dtype(self._act_dtype()))
        else:
            part = self.parts[0]
            n = ids.shape[0]
            if n % m:
                raise ValueError(f"local batch {n} not divisible into {m} microbatches")
            size = n // m
            part.begin_step(m)
            total = 0.0
            for j in range(m):
                total += part.forward(j, ids[j * size:(j + 1) * size], labels[j * size:(j + 1) * size])
                part.backward(j)
            part.finish_step()
            loss = total / m
        for part in self.parts.values():
            part.optimizer_step(spec.lr, spec.momentum)
        contrib = 0.0 if loss is None else loss / (dims.dp * dims.tp)
        total = current().all_reduce(np.array([contrib]), label="loss_all_reduce")
        self.step_count += 1
        return float(total[0])

    def _act_dtype(self):
        part = next(iter(self.parts.values()))
        return part.compute_dtype

    # -- checkpoint plumbing ----------------------------------------------

    def state_dict(self) -> dict:
        """Sharded model and optimizer state plus the scalar training state."""
        model, optim = {}, {}
        for part in self.parts.values():
            for fqn, p in part.params.items():
                model[fqn] = p
                if self.spec.momentum and fqn not in part.momentum:
                    # a zero buffer gives the same update as a lazily created one
                    part.momentum[fqn] = np.zeros_like(p.local)
                if fqn in part.momentum:
                    optim[f"momentum.{fqn}"] = par.DTensor(part.momentum[fqn], p.mesh, p.placements,
                                                           p.global_shape)
        return {"model": model, "optim": optim,
                "extra": {"step": self.step_count, "loader": self.loader.to_json()}}

    def load_state_dict(self, state: dict) -> None:
        for part in self.parts.values():
            for fqn in part.params:
                part.params[fqn].local = state["model"][fqn].local.copy()
                key = f"momentum.{fqn}"
                if key in state["optim"]:
                    part.momentum[fqn] = state["optim"][key].local.copy()
        self.step_count = int(state["extra"]["step"])
        loader = dl.LoaderState.from_json(state["extra"]["loader"])
        self.loader = dataclasses.replace(self.loader, cursor=loader.cursor)


def oracle_losses(spec: TrainSpec, steps: int) -> list[float]:
    """Single-rank losses on the same global batches (sum over data-parallel ranks)."""
    spec = spec.resolved()
    gb = spec.local_batch * spec.dims.dp
    state = dl.LoaderState(spec.seed, spec.model.vocab_size, spec.model.seq_len, gb,
                           task=spec.data_task, token_file=spec.token_file)

    def batches():
        s = state
        while True:
            b, s = dl.next_batch(s)
            yield b

    return mdl.train_oracle(spec.model, batches(), steps, spec.seed, mdl.SGDConfig(spec.lr, spec.momentum),
                            microbatches=1)
