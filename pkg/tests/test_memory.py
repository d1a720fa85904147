import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from txlmem.memory import LayerMemory, MemoryConfig, MemoryManager, arrange, state_size, update

from oracles import first_oracle, last_oracle


def test_first_and_last_match_enumeration_oracle():
    for layers in range(1, 49):
        for k in range(layers + 1):
            assert arrange(layers, k, "first") == first_oracle(layers, k)
            assert arrange(layers, k, "last") == last_oracle(layers, k)


@pytest.mark.parametrize("layers,k,expected", [
    (24, 1, (23,)),
    (24, 4, (5, 11, 17, 23)),
    (24, 12, tuple(range(1, 24, 2))),
    (24, 24, tuple(range(24))),
    (12, 6, (1, 3, 5, 7, 9, 11)),
    (12, 2, (5, 11)),
    (12, 0, ()),
])
def test_interleaved_examples(layers, k, expected):
    assert arrange(layers, k, "interleaved") == expected


def test_middle_is_centered_block():
    assert arrange(12, 2, "middle") == (5, 6)
    assert arrange(12, 4, "middle") == (4, 5, 6, 7)
    assert arrange(5, 5, "middle") == tuple(range(5))


@given(st.integers(1, 48), st.data())
def test_arrange_size_range_and_order(layers, data):
    k = data.draw(st.integers(0, layers))
    for pattern in ("interleaved", "first", "last", "middle"):
        out = arrange(layers, k, pattern)
        assert len(out) == len(set(out)) == k
        assert list(out) == sorted(out)
        assert all(0 <= i < layers for i in out)


def test_interleaved_always_includes_top_layer():
    for layers, k in itertools.product(range(1, 49), range(1, 49)):
        if k <= layers:
            assert layers - 1 in arrange(layers, k, "interleaved")


def test_arrange_rejects_bad_input():
    with pytest.raises(ValueError):
        arrange(24, 25, "last")
    with pytest.raises(ValueError):
        arrange(24, -1, "first")
    with pytest.raises(ValueError):
        arrange(24, 2, "sideways")


def test_state_size_published_figure():
    cfg = MemoryConfig(num_layers=24, lrm_length=3800, srm_length=3800)
    size = state_size(cfg, 1024, 4)
    assert size == 373_555_200
    assert abs(size / 2**20 - 356) < 1


def test_state_size_heterogeneous():
    cfg = MemoryConfig(num_layers=24, lrm_length=2304, srm_length=128, num_lrm=4)
    expected = sum(m * 1024 * 4 for m in [2304] * 4 + [128] * 20)
    assert state_size(cfg, 1024, 4) == expected == 48_234_496


def test_eval_length_changes_lrm_layers_only():
    cfg = MemoryConfig(num_layers=4, lrm_length=8, srm_length=2, num_lrm=2, pattern="first",
                       lrm_length_eval=20)
    assert cfg.capacities() == [8, 8, 2, 2]
    assert cfg.capacities(eval=True) == [20, 20, 2, 2]


def test_explicit_layers():
    cfg = MemoryConfig(num_layers=6, lrm_length=8, srm_length=1, pattern="explicit", lrm_layers=(4, 0))
    assert cfg.lrm_layer_set() == (0, 4) and cfg.resolved_num_lrm == 2
    with pytest.raises(ValueError):
        MemoryConfig(num_layers=6, lrm_length=8, srm_length=1, pattern="explicit", lrm_layers=(6,))
    with pytest.raises(ValueError):
        MemoryConfig(num_layers=6, lrm_length=8, srm_length=1, lrm_layers=(1,))


def test_config_validation():
    with pytest.raises(ValueError):
        MemoryConfig(num_layers=0, lrm_length=1, srm_length=1)
    with pytest.raises(ValueError):
        MemoryConfig(num_layers=2, lrm_length=-1, srm_length=1)
    with pytest.raises(ValueError):
        MemoryConfig(num_layers=2, lrm_length=1, srm_length=1, num_lrm=3)


@given(st.integers(0, 7), st.lists(st.integers(1, 5), min_size=1, max_size=6))
def test_update_is_fifo(capacity, sizes):
    mem = LayerMemory(0, capacity)
    stream = []
    counter = 0
    for s in sizes:
        rows = np.arange(counter, counter + s, dtype=float)[:, None] * np.ones((1, 3))
        counter += s
        stream.extend(rows)
        mem = update(mem, rows)
        expected = stream[max(len(stream) - capacity, 0):] if capacity else []
        assert len(mem) == len(expected) <= capacity
        if expected:
            np.testing.assert_array_equal(mem.rows, np.array(expected))


def test_update_copies_input():
    src = np.ones((2, 3))
    mem = update(LayerMemory(0, 4), src)
    src[...] = 7
    assert np.all(mem.rows == 1)


def test_update_rejects_shape_change():
    mem = update(LayerMemory(0, 4), np.ones((2, 3)))
    with pytest.raises(ValueError):
        update(mem, np.ones((2, 5)))


def test_manager_tracks_state():
    cfg = MemoryConfig(num_layers=3, lrm_length=4, srm_length=1, num_lrm=1, pattern="last")
    mgr = MemoryManager(cfg)
    mgr.update_all([np.ones((2, 3, 5))] * 3)
    assert mgr.state() == [1, 1, 3]
    mgr.update_all([np.ones((2, 3, 5))] * 3)
    assert mgr.state() == [1, 1, 4]
    mgr.reset()
    assert mgr.state() == [0, 0, 0]
