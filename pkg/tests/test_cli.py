import io
import json
import subprocess
import sys

import pytest

from deskpar import cli
from deskpar.config import ConfigError, parse_config, serialize

JOB = """
[job]
world_size = 4
dump_folder = "{dump}"

[model]
dim = 32
n_layers = 2
n_heads = 2
vocab_size = 64
seq_len = 16
ffn_hidden = 64

[parallelism]
tensor_parallel_degree = 2
enable_loss_parallel = true

[training]
steps = 4
log_interval = 2

[checkpoint]
interval = 2
dir = "{ckpt}"
"""


@pytest.fixture
def job(tmp_path):
    path = tmp_path / "job.toml"
    path.write_text(JOB.format(dump=tmp_path / "out", ckpt=tmp_path / "ck"))
    return path


def _train(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.train_command(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


def test_defaults_and_overrides():
    cfg = parse_config("[training]\nsteps = 3\n", ["--training.steps=7", "--parallelism.enable_loss_parallel=true",
                                                   "--parallelism.pipeline_parallel_split_points=layers.1"])
    assert cfg.training.steps == 7
    assert cfg.parallelism.enable_loss_parallel is True
    assert cfg.parallelism.pipeline_parallel_split_points == ["layers.1"]
    assert cfg.model.dim == 64


def test_round_trip_through_toml():
    cfg = parse_config(None, ["--checkpoint.async=true", "--job.world_size=8", "--parallelism.tensor_parallel_degree=2"])
    text = serialize(cfg)
    assert "async = true" in text
    assert parse_config(text) == cfg


@pytest.mark.parametrize("text,overrides,match", [
    ("[training]\nstepz = 1\n", [], "training.stepz"),
    ("[nope]\nx = 1\n", [], "nope"),
    ("", ["--training.steps=abc"], "training.steps"),
    ("", ["training.steps=3"], "--section.key=value"),
    ("", ["--job.world_size=4", "--parallelism.tensor_parallel_degree=3"], "product"),
    ("", ["--job.world_size=4", "--parallelism.data_parallel_shard_degree=3"], "product"),
    ("", ["--checkpoint.async_mode=true"], "checkpoint.async_mode"),
    ("[training]\nsteps = 'x'\n", [], "training.steps"),
    ("steps = 3\n", [], "steps"),
    ("[training\n", [], "invalid TOML"),
])
def test_config_errors_name_the_key(text, overrides, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, overrides)


def test_train_writes_metrics_and_checkpoints(job, tmp_path):
    code, out, err = _train("--config", str(job))
    assert code == 0, err
    lines = [json.loads(x) for x in out.splitlines()]
    assert [x["step"] for x in lines] == [2, 4]
    assert {"loss", "tokens_per_step", "bytes_sent", "activation_bytes_peak"} <= set(lines[0])
    assert lines[0]["tokens_per_step"] == 2 * 2 * 16
    assert (tmp_path / "out" / "metrics.jsonl").read_text().count("\n") == 2
    assert (tmp_path / "ck" / "step-4" / "metadata.json").exists()


def test_resume_continues_the_same_trajectory(job, tmp_path):
    code, straight, _ = _train("--config", str(job), "--checkpoint.interval=0", "--training.steps=4")
    assert code == 0
    assert _train("--config", str(job), "--training.steps=2")[0] == 0
    code, resumed, _ = _train("--config", str(job), "--checkpoint.resume=true", "--checkpoint.async=true")
    assert code == 0
    want = [json.loads(x)["loss"] for x in straight.splitlines()][-1]
    assert json.loads(resumed.splitlines()[-1])["loss"] == want


FSDP4 = ["--parallelism.tensor_parallel_degree=1", "--parallelism.enable_loss_parallel=false"]


def test_convert_then_resume_equals_direct_resume(job, tmp_path):
    assert _train("--config", str(job), "--training.steps=2")[0] == 0
    src, dst = tmp_path / "ck" / "step-2", tmp_path / "ck2" / "step-2"
    out, err = io.StringIO(), io.StringIO()
    assert cli.convert_checkpoint_command([str(src), str(dst), "--config", str(job), *FSDP4], out, err) == 0, \
        err.getvalue()
    assert json.loads((dst / "metadata.json").read_text())["world_size"] == 4
    common = ["--config", str(job), *FSDP4, "--checkpoint.resume=true", "--checkpoint.interval=0"]
    code, direct, _ = _train(*common)
    assert code == 0
    code, converted, _ = _train(*common, f"--checkpoint.dir={tmp_path / 'ck2'}")
    assert code == 0
    losses = [[json.loads(x)["loss"] for x in run.splitlines()] for run in (direct, converted)]
    assert losses[0] and losses[0] == losses[1]


def test_identity_conversion_keeps_data_files(job, tmp_path):
    assert _train("--config", str(job), "--training.steps=2")[0] == 0
    src, dst = tmp_path / "ck" / "step-2", tmp_path / "same"
    assert cli.convert_checkpoint_command([str(src), str(dst), "--config", str(job)], io.StringIO()) == 0
    for f in sorted(src.glob("data_rank*.bin")):
        assert (dst / f.name).read_bytes() == f.read_bytes()


def test_config_error_exit_code(job):
    code, _, err = _train("--config", str(job), "--model.n_heads=3")
    assert code == 1 and "n_heads" in err
    assert _train("--config", str(job) + ".missing")[0] == 1


def test_runtime_error_exit_code_dumps_recorder(job, tmp_path):
    code, _, err = _train("--config", str(job), "--data.task=file", f"--data.token_file={tmp_path / 'none.txt'}")
    assert code == 2
    assert "recorder dump" in err
    assert (tmp_path / "out" / "recorder_dump.jsonl").exists()


def test_print_config(job):
    code, out, _ = _train("--config", str(job), "--print-config")
    assert code == 0 and "tensor_parallel_degree = 2" in out


def test_other_commands(job, tmp_path):
    assert _train("--config", str(job))[0] == 0
    out = io.StringIO()
    assert cli.analyze_trace_command([str(tmp_path / "out" / "recorder_trace.jsonl")], out) == 0
    assert "no hang detected" in out.getvalue()
    out = io.StringIO()
    assert cli.convert_checkpoint_command([str(tmp_path / "ck" / "step-4"), str(tmp_path / "full")], out) == 0
    out = io.StringIO()
    assert cli.estimate_command(["--config", str(job)], out) == 0
    assert json.loads(out.getvalue())["memory"]["params_resident"] > 0
    err = io.StringIO()
    assert cli.convert_checkpoint_command([str(tmp_path / "nothing"), str(tmp_path / "x")], err=err) == 2


def test_console_script(job):
    proc = subprocess.run([sys.executable, "-m", "deskpar.cli", "train", "--config", str(job),
                           "--training.steps=1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout.splitlines()[-1])["step"] == 1
    proc = subprocess.run([sys.executable, "-m", "deskpar.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1
