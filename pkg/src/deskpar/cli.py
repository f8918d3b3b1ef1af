"""Command line entry points.

``deskpar train --config job.toml --training.steps=40`` runs a simulated job;
``analyze-trace`` diagnoses a recorder dump; ``convert-checkpoint``
consolidates a sharded checkpoint; ``estimate`` prints the analytic model.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt
from . import model as mdl
from . import parallelize as par
from . import perfmodel as pm
from . import pipeline as pl
from .config import ConfigError, JobConfig, parse_config, serialize
from .simruntime import WorldError, analyze_recorder, dump_records, load_records, spawn_world
from .trainer import RankTrainer, TrainSpec

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_spec(cfg: JobConfig) -> TrainSpec:
    """Translate a job config into a training spec, checking shape constraints."""
    m, p, t = cfg.model, cfg.parallelism, cfg.training
    try:
        model = mdl.ModelConfig(m.dim, m.n_layers, m.n_heads, m.vocab_size, m.seq_len, m.ffn_hidden,
                                m.norm_eps, m.rope_theta)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    tp, cp = p.tensor_parallel_degree, p.context_parallel_degree
    for name in ("n_heads", "dim", "ffn_hidden", "vocab_size"):
        if getattr(m, name) % tp:
            raise ConfigError(f"model.{name}={getattr(m, name)} not divisible by "
                              f"parallelism.tensor_parallel_degree={tp}")
    if m.seq_len % (2 * cp):
        raise ConfigError(f"model.seq_len={m.seq_len} not divisible by 2*context_parallel_degree={2 * cp}")
    if (m.seq_len // cp) % tp:
        raise ConfigError("model.seq_len / context_parallel_degree must be divisible by tensor_parallel_degree")
    split = tuple(p.pipeline_parallel_split_points)
    if p.pipeline_parallel_degree > 1 and not split:
        split = pl.even_split_points(m.n_layers, p.pipeline_parallel_degree)
    try:
        pipe = pl.PipelineConfig(p.pipeline_parallel_degree, split, p.pipeline_parallel_schedule,
                                 p.pipeline_parallel_microbatches)
        pl.split_model(mdl.build_meta_model(model), pipe)
        ac = par.ACConfig(cfg.activation_checkpoint.mode, cfg.activation_checkpoint.selective_ac_type)
        f8 = par.Float8Config(cfg.float8.enabled, cfg.float8.strategy, cfg.float8.static_scale,
                              cfg.float8.amax_history_len)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if p.pipeline_parallel_degree == 1 and split:
        raise ConfigError("parallelism.pipeline_parallel_split_points needs pipeline_parallel_degree > 1")
    dims = par.ParallelDims(p.data_parallel_shard_degree, p.data_parallel_replicate_degree, cp, tp,
                            p.pipeline_parallel_degree, cfg.job.world_size)
    return TrainSpec(
        model=model, dims=dims, pipeline=pipe,
        data_parallel=par.DataParallelConfig(p.data_parallel_shard_degree, p.data_parallel_replicate_degree,
                                             t.param_compute_dtype, t.reduce_dtype),
        ac=ac, float8=f8, enable_loss_parallel=p.enable_loss_parallel,
        async_tp_chunks=p.async_tensor_parallel_chunks if p.enable_async_tensor_parallel else 1,
        cp_rotate_method=p.context_parallel_rotate_method, lr=t.lr, momentum=t.momentum, seed=t.seed,
        local_batch=t.local_batch, data_task=cfg.data.task, token_file=cfg.data.token_file or None,
    ).resolved()


def _latest_step(root: Path) -> Path | None:
    steps = sorted((int(p.name.split("-")[1]), p) for p in root.glob("step-*")
                   if p.name.split("-")[1].isdigit() and (p / ckpt.METADATA).exists())
    return steps[-1][1] if steps else None


def run_job(cfg: JobConfig, out=sys.stdout) -> list[float]:
    """Train per ``cfg``; returns the per-step losses. Raises WorldError on failure."""
    spec = build_spec(cfg)
    dump = Path(cfg.job.dump_folder)
    dump.mkdir(parents=True, exist_ok=True)
    metrics_path = dump / "metrics.jsonl"
    ck = cfg.checkpoint
    resume_from = _latest_step(Path(ck.dir)) if ck.resume else None
    tokens_per_step = spec.local_batch * spec.dims.dp * spec.model.seq_len
    t0 = time.perf_counter()

    def entry(ctx):
        trainer = RankTrainer(spec)
        if resume_from is not None:
            trainer.load_state_dict(ckpt.load(trainer.state_dict(), resume_from))
        losses = []
        pending = None
        with open(metrics_path, "a") if ctx.rank == 0 else contextlib.nullcontext() as sink:
            while trainer.step_count < cfg.training.steps:
                loss = trainer.step()
                losses.append(loss)
                step = trainer.step_count
                if ctx.rank == 0 and (step % cfg.training.log_interval == 0 or step == cfg.training.steps):
                    led = ctx.ledger
                    line = json.dumps({"step": step, "loss": loss, "elapsed_s": round(time.perf_counter() - t0, 4),
                                       "tokens_per_step": tokens_per_step, "bytes_sent": led.bytes_sent,
                                       "activation_bytes_peak": led.activation_bytes_peak,
                                       "parameter_bytes": led.parameter_bytes_resident,
                                       "gradient_bytes": led.gradient_bytes_resident,
                                       "optimizer_bytes": led.optimizer_bytes_resident})
                    print(line, file=out, flush=True)
                    sink.write(line + "\n")
                if ck.interval and step % ck.interval == 0:
                    path = Path(ck.dir) / f"step-{step}"
                    if ck.async_mode:
                        if pending is not None:
                            pending.wait()
                        pending = ckpt.async_save(trainer.state_dict(), path)
                    else:
                        ckpt.save(trainer.state_dict(), path)
            if pending is not None:
                pending.wait()
        return losses

    result = spawn_world(spec.dims.world_size, entry, timeout=600)
    dump_records(result.records, dump / "recorder_trace.jsonl")
    return result[0]


def train_command(argv: Sequence[str], out=sys.stdout, err=sys.stderr) -> int:
    parser = argparse.ArgumentParser(prog="deskpar train")
    parser.add_argument("--config", help="TOML job file")
    parser.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    args, rest = parser.parse_known_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else None
        cfg = parse_config(text, rest)
        if args.print_config:
            print(serialize(cfg), file=out, end="")
            return EXIT_OK
        build_spec(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=err)
        return EXIT_CONFIG
    except OSError as e:
        print(f"config error: {e}", file=err)
        return EXIT_CONFIG
    try:
        run_job(cfg, out)
    except WorldError as e:
        path = Path(cfg.job.dump_folder) / "recorder_dump.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        dump_records(e.records, path)
        print(f"runtime error: {e}\nrecorder dump written to {path}", file=err)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any failure outside the world is a runtime error
        print(f"runtime error: {type(e).__name__}: {e}", file=err)
        return EXIT_RUNTIME
    return EXIT_OK


def analyze_trace_command(argv: Sequence[str], out=sys.stdout, err=sys.stderr) -> int:
    parser = argparse.ArgumentParser(prog="deskpar analyze-trace")
    parser.add_argument("trace", help="recorder dump (JSON)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    args = parser.parse_args(argv)
    try:
        records = load_records(args.trace)
    except (OSError, ValueError, KeyError) as e:
        print(f"runtime error: cannot read {args.trace}: {e}", file=err)
        return EXIT_RUNTIME
    report = analyze_recorder(records)
    if args.json:
        print(json.dumps({
            "clean": report.clean,
            "stuck_ranks": sorted(report.stuck_ranks()),
            "issues": [i.describe() for i in [*report.collectives, *report.p2p]],
        }, indent=2), file=out)
    else:
        print(report.format(), file=out)
    return EXIT_OK


def reshard_checkpoint(cfg: JobConfig, src, dst) -> None:
    """Rewrite checkpoint ``src`` under the layout of ``cfg`` (offline, on a simulated world)."""
    spec = build_spec(cfg)

    def entry(ctx):
        trainer = RankTrainer(spec)
        trainer.load_state_dict(ckpt.load(trainer.state_dict(), src))
        ckpt.save(trainer.state_dict(), dst)

    spawn_world(spec.dims.world_size, entry, timeout=600)


def convert_checkpoint_command(argv: Sequence[str], out=sys.stdout, err=sys.stderr) -> int:
    parser = argparse.ArgumentParser(
        prog="deskpar convert-checkpoint",
        description="Without a target layout, consolidate into one file of full tensors.")
    parser.add_argument("src")
    parser.add_argument("dst")
    parser.add_argument("--config", help="TOML job file describing the target layout")
    args, rest = parser.parse_known_args(argv)
    if args.config or rest:
        try:
            cfg = parse_config(Path(args.config).read_text() if args.config else None, rest)
            build_spec(cfg)
        except (ConfigError, OSError) as e:
            print(f"config error: {e}", file=err)
            return EXIT_CONFIG
    try:
        if args.config or rest:
            reshard_checkpoint(cfg, args.src, args.dst)
            meta = ckpt.read_metadata(args.dst)
        else:
            meta = ckpt.consolidate(args.src, args.dst)
    except (OSError, ckpt.CheckpointError, ValueError, WorldError) as e:
        print(f"runtime error: {e}", file=err)
        return EXIT_RUNTIME
    print(f"wrote {len(meta.records)} shards over {meta.world_size} rank file(s) to {args.dst}", file=out)
    return EXIT_OK


def estimate_command(argv: Sequence[str], out=sys.stdout, err=sys.stderr) -> int:
    parser = argparse.ArgumentParser(prog="deskpar estimate")
    parser.add_argument("--config")
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_text() if args.config else None, rest)
        spec = build_spec(cfg)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=err)
        return EXIT_CONFIG
    d = spec.dims
    nbytes = 8 if cfg.training.param_compute_dtype == "F64" else 4
    ps = pm.ParallelSpec(
        dp_shard=d.dp_shard, dp_replicate=d.dp_replicate, tp=d.tp, cp=d.cp, pp=d.pp,
        schedule=spec.pipeline.schedule, microbatches=spec.pipeline.microbatches,
        stages_per_rank=spec.pipeline.stages_per_rank, split_points=spec.pipeline.split_points,
        ac_mode=_ac_mode(spec.ac), compute_bytes=nbytes,
        reduce_bytes=8 if cfg.training.reduce_dtype == "F64" else 4, local_batch=spec.local_batch,
        loss_parallel=spec.enable_loss_parallel, async_tp_chunks=spec.async_tp_chunks)
    mem = pm.estimate_memory(spec.model, ps)
    print(json.dumps({"memory": mem.to_json(), "time": pm.estimate_step_time(spec.model, ps)}, indent=2), file=out)
    return EXIT_OK


def _ac_mode(ac: par.ACConfig) -> str:
    return str(ac.selective_ac_type) if ac.mode == "selective" else ac.mode


COMMANDS = {"train": train_command, "analyze-trace": analyze_trace_command,
            "convert-checkpoint": convert_checkpoint_command, "estimate": estimate_command}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(f"usage: deskpar {{{','.join(COMMANDS)}}} ...", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
