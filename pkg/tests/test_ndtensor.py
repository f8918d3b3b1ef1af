import math

import numpy as np
import pytest

from deskpar import ndtensor as nt
from conftest import finite_diff, rel_err


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nt.matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(nt.matmul(a, np.array([[5.0], [6.0]])), [[17.0], [39.0]])


def test_matmul_errors():
    with pytest.raises(nt.ShapeError):
        nt.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(TypeError):
        nt.matmul(np.ones((2, 3)), np.ones((3, 2), dtype=np.float32))


def test_matmul_row_subset_invariant(rng):
    # sharding rows of the left operand must not change any output bit
    for m, k, n in [(7, 33, 5), (128, 64, 128), (64, 128, 256), (5, 300, 17)]:
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        full = nt.matmul(a, b)
        for lo, hi in [(0, m // 2), (m // 2, m), (1, m)]:
            np.testing.assert_array_equal(nt.matmul(a[lo:hi], b), full[lo:hi])
        np.testing.assert_array_equal(nt.matmul(a, b[:, : n // 2 + 1]), full[:, : n // 2 + 1])


def _check_grad(loss, params, grads, tol=1e-6):
    for x, g in zip(params, grads):
        fd = finite_diff(loss, x)
        assert rel_err(g, fd) <= tol


def test_matmul_backward_fd(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    r = rng.standard_normal((3, 2))
    d_a, d_b = nt.matmul_backward(r, a, b)
    _check_grad(lambda: float(np.sum(nt.matmul(a, b) * r)), [a, b], [d_a, d_b])


def test_sdpa_examples(rng):
    v = rng.standard_normal((2, 1, 4))
    q, k = rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 1, 4))
    np.testing.assert_allclose(nt.sdpa(q, k, v, causal=False), v, rtol=0, atol=0)
    z = np.zeros((1, 3, 4))
    v = rng.standard_normal((1, 3, 4))
    out = nt.sdpa(z, z, v, causal=True)
    for i in range(3):
        np.testing.assert_allclose(out[0, i], v[0, : i + 1].mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("causal", [True, False])
def test_sdpa_backward_fd(rng, causal):
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    r = rng.standard_normal((2, 5, 4))
    grads = nt.sdpa_backward(r, q, k, v, causal)
    _check_grad(lambda: float(np.sum(nt.sdpa(q, k, v, causal) * r)), [q, k, v], grads)


def test_rms_norm_examples(rng):
    np.testing.assert_allclose(nt.rms_norm(np.ones(4), np.ones(4), 0.0), np.ones(4))
    x, w = rng.standard_normal((3, 6)), rng.standard_normal(6)
    np.testing.assert_allclose(nt.rms_norm(7.5 * x, w, 0.0), nt.rms_norm(x, w, 0.0), rtol=1e-14)
    with pytest.raises(nt.ShapeError):
        nt.rms_norm(np.ones((2, 0)), np.ones(0), 1e-5)


def test_rms_norm_backward_fd(rng):
    x, w = rng.standard_normal((2, 3, 6)), rng.standard_normal(6)
    r = rng.standard_normal((2, 3, 6))
    grads = nt.rms_norm_backward(r, x, w, 1e-5)
    _check_grad(lambda: float(np.sum(nt.rms_norm(x, w, 1e-5) * r)), [x, w], grads)


def test_cross_entropy_examples(rng):
    assert nt.softmax_cross_entropy(np.zeros((3, 16)), [0, 5, 15]) == pytest.approx(math.log(16), abs=1e-14)
    logits = np.zeros((2, 8))
    logits[0, 3] = logits[1, 1] = 1e6
    assert nt.softmax_cross_entropy(logits, [3, 1]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(IndexError):
        nt.softmax_cross_entropy(np.zeros((1, 4)), [4])


def test_cross_entropy_backward_fd(rng):
    logits = rng.standard_normal((5, 7))
    t = rng.integers(0, 7, 5)
    g = nt.softmax_cross_entropy_backward(logits, t)
    _check_grad(lambda: nt.softmax_cross_entropy(logits, t), [logits], [g])


def test_softmax_rows_sum_to_one(rng):
    p = nt.softmax(rng.standard_normal((20, 31)) * 10)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12


def test_pointwise_backward_fd(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    r = rng.standard_normal((3, 4))
    _check_grad(lambda: float(np.sum(nt.mul(a, b) * r)), [a, b], nt.mul_backward(r, a, b))
    _check_grad(lambda: float(np.sum(nt.add(a, b) * r)), [a, b], nt.add_backward(r))
    _check_grad(lambda: float(np.sum(nt.silu(a) * r)), [a], [nt.silu_backward(r, a)])
    assert nt.silu(np.zeros(1))[0] == 0.0


def test_shape_ops_backward(rng):
    x = rng.standard_normal((2, 3, 4))
    r = rng.standard_normal((4, 2, 3))
    axes = (2, 0, 1)
    _check_grad(lambda: float(np.sum(nt.transpose(x, axes) * r)), [x], [nt.transpose_backward(r, axes)])
    r2 = rng.standard_normal((6, 4))
    _check_grad(lambda: float(np.sum(nt.reshape(x, (6, 4)) * r2)), [x],
                [nt.reshape_backward(r2, x.shape)])


def test_embedding_backward_matches_onehot(rng):
    table = rng.standard_normal((10, 4))
    ids = rng.integers(0, 10, (3, 5))
    d_out = rng.standard_normal((3, 5, 4))
    onehot = np.eye(10)[ids.reshape(-1)]
    np.testing.assert_allclose(nt.embedding_lookup(table, ids).reshape(-1, 4), onehot @ table)
    np.testing.assert_allclose(nt.embedding_backward(d_out, ids, 10), onehot.T @ d_out.reshape(-1, 4),
                               rtol=1e-13, atol=1e-13)


def test_rotary(rng):
    freqs = nt.precompute_freqs_cis(6, 8)
    x = rng.standard_normal((2, 6, 3, 8))
    out = nt.rotary_apply(x, freqs)
    np.testing.assert_array_equal(out[:, 0], x[:, 0])
    # rotations preserve pair norms
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-13)
    r = rng.standard_normal(x.shape)
    _check_grad(lambda: float(np.sum(nt.rotary_apply(x, freqs) * r)), [x], [nt.rotary_backward(r, freqs)])


def test_non_finite_is_an_error():
    with pytest.raises(nt.NonFiniteError):
        nt.matmul(np.array([[np.inf]]), np.array([[1.0]]))


def test_init_param_determinism_and_shard_consistency():
    a = nt.init_param("layers.0.attention.wq.weight", (13, 7), 5)
    b = nt.init_param("layers.0.attention.wq.weight", (13, 7), 5)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a) <= 2 * nt.INIT_STD)
    for cuts in [(0, 4, 8, 13), (0, 1, 13), (0, 13)]:
        parts = [nt.init_param("layers.0.attention.wq.weight", (13, 7), 5,
                               region=(slice(lo, hi), slice(0, 7))) for lo, hi in zip(cuts, cuts[1:])]
        np.testing.assert_array_equal(np.concatenate(parts), a)
    block = nt.init_param("layers.0.attention.wq.weight", (13, 7), 5, region=(slice(3, 9), slice(2, 5)))
    np.testing.assert_array_equal(block, a[3:9, 2:5])


def test_init_param_names_differ():
    a = nt.init_param("x.weight", (32, 32), 0)
    b = nt.init_param("y.weight", (32, 32), 0)
    assert np.any(a != b)
    assert abs(a.std() - 0.02 * 0.88) < 0.002  # truncated normal at 2 sigma has std ~0.88 sigma
    np.testing.assert_array_equal(nt.init_param("norm.weight", (4,), 0), np.ones(4))
    with pytest.raises(ValueError):
        nt.init_param("", (2,), 0)


def test_e4m3_enumeration():
    table = nt.e4m3_table()
    finite = table[np.isfinite(table)]
    assert finite.max() == 448.0 == nt.E4M3_MAX
    assert np.isnan(table).sum() == 2
    # every finite value is a fixed point of quantisation and round-trips through the encoder
    q = nt.quantize_e4m3(finite)
    np.testing.assert_array_equal(q, finite)
    np.testing.assert_array_equal(nt.e4m3_decode(nt.e4m3_encode(q)), q)


def test_e4m3_quantize_error_bound(rng):
    x = rng.uniform(2.0 ** -6, 448.0, 20000) * rng.choice([-1.0, 1.0], 20000)
    q = nt.quantize_e4m3(x).astype(np.float64)
    assert np.all(np.abs(q - x) <= 2.0 ** -4 * np.abs(x))  # half of 2**-3 spacing
    assert nt.quantize_e4m3(np.array([1e6]))[0] == 448.0
    with pytest.raises(ValueError):
        nt.e4m3_encode(np.array([1.01]))
