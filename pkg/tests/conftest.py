import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def finite_diff(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to every element of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def schedule_mutants(schedule, n, seed=0):
    """Single-action corruptions of a valid schedule, each of which must be rejected."""
    from deskpar import pipeline as pl

    rng = np.random.default_rng(seed)
    kinds = ("drop", "duplicate", "retarget", "wrong_rank", "hoist")
    out = []
    while len(out) < n:
        kind = kinds[len(out) % len(kinds)]
        sched = schedule.copy()
        r = int(rng.integers(sched.num_ranks))
        acts = sched.actions[r]
        i = int(rng.integers(len(acts)))
        a = acts[i]
        if kind == "drop":
            del acts[i]
        elif kind == "duplicate":
            acts.insert(int(rng.integers(len(acts) + 1)), a)
        elif kind == "retarget":
            other = int(rng.integers(sched.microbatches + 1))
            if other == a.mb:
                continue
            acts[i] = pl.ScheduleAction(a.kind, a.stage, other)
        elif kind == "wrong_rank":
            if sched.num_ranks == 1:
                continue
            del acts[i]
            dst = sched.actions[(r + 1) % sched.num_ranks]
            dst.insert(int(rng.integers(len(dst) + 1)), a)
        else:
            # move a consumer in front of the action it depends on
            deps = {pl.BACKWARD_INPUT: pl.FORWARD, pl.BACKWARD_WEIGHT: pl.BACKWARD_INPUT,
                    pl.SEND_ACT: pl.FORWARD}
            if a.kind not in deps:
                continue
            j = acts.index(pl.ScheduleAction(deps[a.kind], a.stage, a.mb))
            del acts[i]
            acts.insert(j, a)
        out.append((kind, str(a), sched))
    return out


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
