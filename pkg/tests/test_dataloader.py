import numpy as np
import pytest

from deskpar.dataloader import DataLoader, LoaderState, next_batch


def test_labels_are_inputs_shifted_by_one():
    batch, _ = next_batch(LoaderState(0, 64, 16, 3))
    assert batch["input_ids"].shape == (3, 16)
    assert np.array_equal(batch["input_ids"][:, 1:], batch["labels"][:, :-1])


@pytest.mark.parametrize("task", ["bigram", "uniform"])
def test_dp_shards_union_is_global_batch(task):
    full, _ = next_batch(LoaderState(5, 64, 16, 8, task=task, cursor=3))
    parts = [next_batch(LoaderState(5, 64, 16, 2, r, 4, cursor=3, task=task))[0]["input_ids"] for r in range(4)]
    assert np.array_equal(np.concatenate(parts), full["input_ids"])


def test_state_round_trip_resumes_exactly():
    loader = DataLoader(LoaderState(1, 64, 16, 2, 1, 2))
    next(loader)
    saved = loader.state_dict()
    expected = [next(loader)["input_ids"] for _ in range(3)]
    other = DataLoader(LoaderState(1, 64, 16, 2, 1, 2))
    other.load_state_dict(saved)
    assert all(np.array_equal(a, next(other)["input_ids"]) for a in expected)


def test_bigram_is_predictable():
    batch, _ = next_batch(LoaderState(0, 64, 64, 16))
    ids = batch["input_ids"]
    pairs = ids[:, :-1] * 64 + ids[:, 1:]
    counts = np.bincount(pairs.ravel(), minlength=64 * 64).reshape(64, 64)
    top4 = np.sort(counts, axis=1)[:, -4:].sum()
    assert top4 / counts.sum() > 0.8


def test_token_file_task(tmp_path):
    path = tmp_path / "tokens.txt"
    path.write_text("\n".join(str(i % 50) for i in range(500)))
    batch, _ = next_batch(LoaderState(0, 64, 16, 2, task="file", token_file=str(path)))
    assert batch["input_ids"].max() < 50
    with pytest.raises(ValueError):
        LoaderState(0, 64, 16, 2, task="file")


def test_rejects_bad_rank():
    with pytest.raises(ValueError):
        LoaderState(0, 64, 16, 2, dp_rank=2, dp_degree=2)
