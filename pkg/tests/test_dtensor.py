import numpy as np
import pytest

from deskpar import ndtensor as nt
from deskpar.dtensor import (DTensor, Partial, PlacementError, Replicate, Shard, distribute,
                             from_local, local_region, redistribute, shard_sizes, sharded_embedding,
                             sharded_matmul, sharded_pointwise, sharded_rms_norm, sharded_sdpa)
from deskpar.simruntime import current, device_mesh, spawn_world


def run(world, fn):
    return list(spawn_world(world, lambda ctx: fn(device_mesh((world,), ("x",)))))


def test_distribute_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    locs = run(2, lambda m: distribute(x, m, [Shard(0)]).local)
    np.testing.assert_array_equal(locs[0], [[1.0, 2.0]])
    np.testing.assert_array_equal(locs[1], [[3.0, 4.0]])
    for loc in run(2, lambda m: distribute(x, m, [Replicate()]).local):
        np.testing.assert_array_equal(loc, x)
    assert shard_sizes(5, 4) == [2, 2, 1, 0]
    sizes = run(4, lambda m: distribute(np.ones((5, 3)), m, [Shard(0)]).local.shape[0])
    assert sizes == [2, 2, 1, 0]


def test_invalid_placements():
    mesh = device_mesh((1,), ("x",))
    with pytest.raises(PlacementError):
        distribute(np.ones((2, 2)), mesh, [Shard(2)])
    mesh2 = device_mesh((1, 1), ("a", "b"))
    with pytest.raises(PlacementError):
        distribute(np.ones((2, 2)), mesh2, [Shard(0), Shard(0)])


def test_redistribute_examples():
    x = np.arange(16.0).reshape(4, 4)

    def entry(m):
        a = distribute(x, m, [Shard(0)])
        back = a.redistribute([Replicate()]).redistribute([Shard(0)])
        s1 = a.redistribute([Shard(1)])
        p = from_local(np.array([1.0, 2.0]) if current().rank == 0 else np.array([3.0, 4.0]),
                       m, [Partial()], (2,))
        return a.local, back.local, s1.local, distribute(x, m, [Shard(1)]).local, p.full_tensor()

    for a, back, s1, direct, p in run(2, entry):
        np.testing.assert_array_equal(a, back)
        np.testing.assert_array_equal(s1, direct)
        np.testing.assert_array_equal(p, [4.0, 6.0])


def test_replicate_full_tensor_is_free():
    def entry(m):
        d = distribute(np.ones((3, 3)), m, [Replicate()])
        before = current().ledger.bytes_sent
        out = d.full_tensor()
        same = d.redistribute([Replicate()])
        return out is d.local, current().ledger.bytes_sent - before, len(current().records), same.local

    for is_local, sent, nrec, _ in run(2, entry):
        assert is_local and sent == 0 and nrec == 0


def _random_placement(rng, ndim, allow_partial=True):
    choices = [Replicate()] + [Shard(d) for d in range(ndim)] + ([Partial()] if allow_partial else [])
    return choices[rng.integers(len(choices))]


def _random_layout(rng, ndim, mesh_ndim):
    while True:
        ps = [_random_placement(rng, ndim) for _ in range(mesh_ndim)]
        dims = [p.dim for p in ps if isinstance(p, Shard)]
        if len(dims) == len(set(dims)):
            return ps


def _cases(n, seed):
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        ndim = int(rng.integers(1, 4))
        shape = tuple(int(s) for s in rng.integers(1, 8, ndim))
        x = rng.standard_normal(shape)
        cases.append((x, _random_layout(rng, ndim, 2), _random_layout(rng, ndim, 2)))
    return cases


@pytest.mark.parametrize("mesh_shape", [(2, 2), (1, 4), (4, 1), (2, 1)])
def test_redistribute_property(mesh_shape):
    cases = _cases(260, seed=sum(mesh_shape) * 7 + mesh_shape[0])
    world = int(np.prod(mesh_shape))

    def entry(ctx):
        mesh = device_mesh(mesh_shape, ("a", "b"))
        for x, src, dst in cases:
            a = distribute(x, mesh, src)
            assert np.array_equal(a.full_tensor(), x)
            b = redistribute(a, dst)
            assert np.array_equal(b.full_tensor(), x)
            direct = distribute(x, mesh, dst)
            if not any(isinstance(p, Partial) for p in dst):
                assert np.array_equal(b.local, direct.local)
            assert b.local.shape == direct.local.shape
        return len(cases)

    assert sum(spawn_world(world, entry)) == world * len(cases)


def test_partial_semantics_with_arbitrary_addends():
    rng = np.random.default_rng(3)
    cases = [rng.integers(-50, 50, (4, int(rng.integers(1, 9)), 3)).astype(np.float64) for _ in range(100)]

    def entry(ctx):
        mesh = device_mesh((4,), ("x",))
        for addends in cases:
            total = addends[0] + addends[1] + addends[2] + addends[3]
            p = from_local(addends[ctx.rank].copy(), mesh, [Partial()], addends.shape[1:])
            assert np.array_equal(p.full_tensor(), total)
            s = p.redistribute([Shard(0)])
            a, b = local_region(total.shape, (4,), [Shard(0)], (ctx.rank,))[0].indices(total.shape[0])[:2]
            assert np.array_equal(s.local, total[a:b])
        return True

    assert all(spawn_world(4, entry))


def test_sharded_matmul_examples():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((2, 4)), rng.standard_normal((4, 8))
    x2, w2 = rng.standard_normal((2, 8)), rng.standard_normal((8, 4))

    def entry(m):
        col = sharded_matmul(distribute(x, m, [Replicate()]), distribute(w, m, [Shard(1)]), "colwise")
        row = sharded_matmul(distribute(x2, m, [Shard(1)]), distribute(w2, m, [Shard(0)]), "rowwise")
        assert col.placements == (Shard(1),) and row.placements == (Partial(),)
        with pytest.raises(PlacementError):
            sharded_matmul(distribute(x, m, [Shard(1)]), distribute(w, m, [Shard(1)]), "colwise")
        return col.full_tensor(), row.full_tensor()

    for col, row in run(2, entry):
        np.testing.assert_array_equal(col, nt.matmul(x, w))
        np.testing.assert_allclose(row, nt.matmul(x2, w2), rtol=1e-14)
    col, row = run(1, entry)[0]
    np.testing.assert_array_equal(row, nt.matmul(x2, w2))


def test_sharded_ops_single_device_semantics():
    """Random uneven shapes; integer-valued data makes split-k sums exact."""
    rng = np.random.default_rng(5)
    cases = []
    for _ in range(300):
        m, k, n = (int(v) for v in rng.integers(1, 10, 3))
        cases.append((rng.integers(-8, 9, (m, k)).astype(np.float64),
                      rng.integers(-8, 9, (k, n)).astype(np.float64),
                      rng.standard_normal((m, n)), rng.standard_normal(n),
                      rng.integers(0, k, (2, m)), rng.standard_normal((3, 2, 3, m, 4))))

    def entry(ctx):
        W = ctx.world_size
        mesh = device_mesh((W,), ("x",))
        for x, w, y, g, ids, qkv in cases:
            dense = nt.matmul(x, w)
            col = sharded_matmul(distribute(x, mesh, [Replicate()]), distribute(w, mesh, [Shard(1)]), "colwise")
            row = sharded_matmul(distribute(x, mesh, [Shard(1)]), distribute(w, mesh, [Shard(0)]), "rowwise")
            assert np.array_equal(col.full_tensor(), dense)
            assert np.array_equal(row.full_tensor(), dense)
            ys = distribute(y, mesh, [Shard(0)])
            normed = sharded_rms_norm(ys, distribute(g, mesh, [Replicate()]), 1e-6)
            assert np.array_equal(normed.full_tensor(), nt.rms_norm(y, g, 1e-6))
            act = sharded_pointwise("mul", sharded_pointwise("silu", ys), ys)
            assert np.array_equal(act.full_tensor(), nt.mul(nt.silu(y), y))
            emb = sharded_embedding(distribute(w, mesh, [Shard(0)]), ids)
            assert np.array_equal(emb.full_tensor(), nt.embedding_lookup(w, ids))
            q, k, v = (distribute(t, mesh, [Shard(1)]) for t in qkv)
            att = sharded_sdpa(q, k, v, causal=True)
            assert np.array_equal(att.full_tensor(), nt.sdpa(qkv[0], qkv[1], qkv[2], True))
        return True

    for world in (2, 3, 4):
        assert all(spawn_world(world, entry))


def test_local_shape_checked():
    mesh = device_mesh((1,), ("x",))
    with pytest.raises(PlacementError):
        DTensor(np.ones((2, 2)), mesh, [Replicate()], (3, 2))
