"""Inject a fault into a 4-rank FSDP run and print the recorder's diagnosis."""

import sys
import time

from deskpar import model as mdl
from deskpar import parallelize as par
from deskpar.simruntime import WorldError, spawn_world
from deskpar.trainer import RankTrainer, TrainSpec

SPEC = TrainSpec(model=mdl.ModelConfig(dim=32, vocab_size=64, seq_len=16, ffn_hidden=64),
                 dims=par.ParallelDims(world_size=4))


def missing_collective(ctx):
    tr = RankTrainer(SPEC)
    tr.step()
    if ctx.rank != 2:
        tr.step()


def straggler(ctx):
    tr = RankTrainer(SPEC)
    tr.step()
    if ctx.rank == 3:
        time.sleep(1.5)
    tr.step()


def main(kind="missing"):
    fn = {"missing": missing_collective, "straggler": straggler}[kind]
    try:
        spawn_world(4, fn, timeout=0.5)
    except WorldError as e:
        print(e.report.format())
    else:
        print("no hang")


if __name__ == "__main__":
    main(*sys.argv[1:])
