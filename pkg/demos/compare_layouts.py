"""Train the tiny model under several layouts and compare each loss curve with one device."""

import time

import numpy as np

from deskpar import parallelize as par
from deskpar import perfmodel as pm
from deskpar import pipeline as pl
from deskpar.simruntime import spawn_world
from deskpar.trainer import RankTrainer, TrainSpec, oracle_losses

STEPS = 10
LAYOUTS = {
    "fsdp4": TrainSpec(dims=par.ParallelDims(world_size=4)),
    "hsdp2x2": TrainSpec(dims=par.ParallelDims(dp_shard=2, dp_replicate=2, world_size=4)),
    "fsdp2_tp2_lp": TrainSpec(dims=par.ParallelDims(tp=2, world_size=4), enable_loss_parallel=True),
    "fsdp2_cp2": TrainSpec(dims=par.ParallelDims(cp=2, world_size=4)),
    "dp2_tp2_pp2_cp2": TrainSpec(dims=par.ParallelDims(dp_shard=2, tp=2, cp=2, pp=2, world_size=16),
                                 pipeline=pl.PipelineConfig(2, ("layers.1", "norm", "output"),
                                                            "interleaved_1f1b", 2),
                                 enable_loss_parallel=True),
}


def train(spec):
    def entry(ctx):
        tr = RankTrainer(spec)
        return [tr.step() for _ in range(STEPS)]

    return spawn_world(spec.resolved().dims.world_size, entry, timeout=120)


def main():
    for name, spec in LAYOUTS.items():
        t0 = time.perf_counter()
        res = train(spec)
        want = np.array(oracle_losses(spec, STEPS))
        err = np.max(np.abs(np.array(res[0]) - want) / want)
        print(f"{name:>16}: final loss {res[0][-1]:.6f}, max rel err vs one device {err:.1e}, "
              f"{time.perf_counter() - t0:.1f}s")
    text, _ = pm.ledger_report(res.ledger)
    print("\nledger of the last layout:\n" + text)


if __name__ == "__main__":
    main()
