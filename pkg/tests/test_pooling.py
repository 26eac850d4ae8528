"""Pooling: oracle equivalence, concatenation order, batch determinism."""
import numpy as np
import pytest

from poolrank.errors import DataError, UsageError
from poolrank.pooling import (
    Descriptor,
    descriptor_filename,
    parse_descriptor_filename,
    pool,
    pool_batch,
    read_descriptor,
    write_descriptor,
)
from poolrank.tensor_store import FeatureMapStack


def oracle_pool(maps: np.ndarray, strategy: str):
    """Scalar-loop reference: per map, builtin max / mean over a flat list."""
    out_max, out_avg = [], []
    for m in range(maps.shape[0]):
        cells = [float(v) for row in maps[m].tolist() for v in row]
        out_max.append(max(cells))
        out_avg.append(sum(cells) / len(cells))
    if strategy == "max":
        return out_max
    if strategy == "avg":
        return out_avg
    return out_max + out_avg


def stack_of(values, image_id="s", view="rot0"):
    return FeatureMapStack(image_id, view, np.asarray(values, dtype=np.float32))


TWO_MAPS = stack_of([[[1, 2], [3, 4]], [[0, 0], [0, 5]]])


def test_max_example():
    assert pool(TWO_MAPS, "max").values.tolist() == [4.0, 5.0]


def test_avg_example():
    assert pool(TWO_MAPS, "avg").values.tolist() == [2.5, 1.25]


def test_hybrid_example_concat_order():
    d = pool(TWO_MAPS, "hybrid")
    assert d.values.tolist() == [4.0, 5.0, 2.5, 1.25]
    assert d.dim == 2 * TWO_MAPS.k


def test_hybrid_equals_concatenation():
    rng = np.random.default_rng(3)
    stack = stack_of(rng.standard_normal((16, 5, 5)))
    h = pool(stack, "hybrid").values
    assert np.array_equal(h[:16], pool(stack, "max").values)
    assert np.array_equal(h[16:], pool(stack, "avg").values)


def test_pool_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    stack = stack_of(rng.standard_normal((256, 6, 6)))
    for strategy in ("max", "avg", "hybrid"):
        got = pool(stack, strategy).values.astype(np.float64)
        want = np.array(oracle_pool(np.asarray(stack.maps, dtype=np.float64), strategy))
        if strategy == "max":
            assert np.array_equal(got, want)
        else:
            np.testing.assert_allclose(got, want, rtol=1e-6)


def test_one_by_one_map_is_identity():
    stack = stack_of(np.arange(6, dtype=np.float32).reshape(6, 1, 1))
    for strategy in ("max", "avg"):
        assert pool(stack, strategy).values.tolist() == [0, 1, 2, 3, 4, 5]


def test_constant_map_max_equals_avg():
    stack = stack_of(np.full((3, 4, 4), 2.75))
    assert pool(stack, "max").values.tolist() == pool(stack, "avg").values.tolist()


def test_cell_permutation_invariance():
    rng = np.random.default_rng(5)
    maps = rng.standard_normal((4, 3, 3)).astype(np.float32)
    shuffled = maps.reshape(4, -1).copy()
    for row in shuffled:
        rng.shuffle(row)
    shuffled = shuffled.reshape(4, 3, 3)
    for strategy in ("max", "avg"):
        a = pool(stack_of(maps), strategy).values
        b = pool(stack_of(shuffled), strategy).values
        np.testing.assert_allclose(a, b, rtol=1e-6)


def test_constant_shift_moves_both_pools_by_constant():
    rng = np.random.default_rng(6)
    maps = rng.standard_normal((4, 3, 3)).astype(np.float32)
    shifted = maps.copy()
    shifted[2] += 2.0
    for strategy in ("max", "avg"):
        a = pool(stack_of(maps), strategy).values
        b = pool(stack_of(shifted), strategy).values
        np.testing.assert_allclose(b[2] - a[2], 2.0, atol=1e-6)
        mask = np.arange(4) != 2
        assert np.array_equal(a[mask], b[mask])


def test_upscaled_blob_changes_avg_not_max():
    small = np.zeros((1, 6, 6), dtype=np.float32)
    small[0, 2:4, 2:4] = 1.0  # 4 active cells, peak 1
    big = np.zeros((1, 6, 6), dtype=np.float32)
    big[0, 1:5, 1:5] = 1.0  # 16 active cells, same peak
    assert pool(stack_of(small), "max").values[0] == pool(stack_of(big), "max").values[0]
    assert pool(stack_of(small), "avg").values[0] < pool(stack_of(big), "avg").values[0]


def test_unknown_strategy_is_usage_error():
    with pytest.raises(UsageError):
        pool(TWO_MAPS, "median")


def test_batch_equals_map_and_preserves_order():
    rng = np.random.default_rng(7)
    stacks = [stack_of(rng.standard_normal((8, 3, 3)), image_id=f"i{i}") for i in range(12)]
    batch = pool_batch(stacks, "hybrid")
    assert [d.image_id for d in batch] == [s.image_id for s in stacks]
    for s, d in zip(stacks, batch):
        assert d == pool(s, "hybrid")
    perm = rng.permutation(len(stacks))
    shuffled = pool_batch([stacks[i] for i in perm], "hybrid")
    assert shuffled == [batch[i] for i in perm]


def test_batch_singleton():
    assert pool_batch([TWO_MAPS], "max") == [pool(TWO_MAPS, "max")]


def test_batch_parallel_equals_serial():
    rng = np.random.default_rng(8)
    stacks = [stack_of(rng.standard_normal((16, 4, 4)), image_id=f"i{i}") for i in range(50)]
    for strategy in ("max", "avg"):
        serial = pool_batch(stacks, strategy, threads=1)
        parallel = pool_batch(stacks, strategy, threads=8)
        for a, b in zip(serial, parallel):
            assert a.values.tobytes() == b.values.tobytes()


def test_batch_mixed_k_rejected():
    stacks = [stack_of(np.zeros((2, 2, 2))), stack_of(np.zeros((3, 2, 2)))]
    with pytest.raises(DataError) as exc:
        pool_batch(stacks, "max")
    assert exc.value.code == "mixed_k"


def test_descriptor_requires_finite():
    with pytest.raises(DataError):
        Descriptor("d", "rot0", np.array([np.inf], dtype=np.float32))


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    d = pool(stack_of(rng.standard_normal((8, 3, 3)), image_id="img/with weird:chars"), "avg")
    p = tmp_path / descriptor_filename(d.image_id, d.view)
    write_descriptor(d, p)
    back = read_descriptor(p)
    assert back.image_id == d.image_id
    assert back.view == d.view
    assert back.values.tobytes() == d.values.tobytes()


def test_descriptor_filename_round_trip():
    for image_id in ("plain", "has__underscores", "a b/c%d"):
        name = descriptor_filename(image_id, "rot180")
        assert parse_descriptor_filename(name) == (image_id, "rot180")


def test_descriptor_file_rejects_spatial_stack(tmp_path):
    from poolrank.tensor_store import write_stack

    p = tmp_path / "bad.fms"
    write_stack(stack_of(np.zeros((2, 2, 2))), p)
    with pytest.raises(DataError) as exc:
        read_descriptor(p, image_id="x", view="rot0")
    assert exc.value.code == "bad_dims"
