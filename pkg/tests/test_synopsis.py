import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olaraw.pipeline import in_chunk_permutation
from olaraw.query import parse_query
from olaraw.synopsis import Answerability, Synopsis, SynopsisError


def vals(n, offset=0):
    return np.arange(n, dtype=np.float64).reshape(n, 1) + offset


def make_syn(budget=100, columns=("a1",), schedule=(0, 1, 2, 3, 4, 5)):
    return Synopsis(budget_tuples=budget, columns=columns, file_path="/data/f.csv", origin_schedule=schedule)


def test_insert_within_budget_keeps_everything():
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(40), (0, 0), 200, local_variance=5.0)
    sc = syn.chunks[0]
    assert sc.length == 40 and sc.start == 0 and sc.cursor == 40
    assert syn.total_retained == 40


def test_variance_proportional_allocation_example():
    # budget 100, variances 30 and 10 -> allocations 75 and 25
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(80), (0, 0), 200, local_variance=30.0)
    syn.insert_chunk(1, vals(60), (0, 1), 200, local_variance=10.0)
    assert syn.chunks[0].length == 75
    assert syn.chunks[1].length == 25
    assert syn.total_retained == 100
    # shrinking dropped the front of chunk 0's permutation window
    assert syn.chunks[0].start == 5
    assert syn.chunks[0].values[0, 0] == 5.0
    # the new chunk kept the back of its own sample
    assert syn.chunks[1].start == 35
    assert syn.chunks[1].values[0, 0] == 35.0
    # cursors still point at the end of what was extracted
    assert syn.chunks[0].cursor == 80 % 200
    assert syn.chunks[1].cursor == 60 % 200


def test_zero_variances_split_equally():
    syn = make_syn(budget=40)
    syn.insert_chunk(0, vals(40), (0, 0), 100, local_variance=0.0)
    syn.insert_chunk(1, vals(40), (0, 1), 100, local_variance=0.0)
    assert syn.chunks[0].length == 20
    assert syn.chunks[1].length == 20


def test_eviction_when_budget_cannot_float_all():
    syn = make_syn(budget=5)
    syn.insert_chunk(0, vals(4), (0, 0), 100, local_variance=1.0)
    syn.insert_chunk(1, vals(4), (0, 1), 100, local_variance=9.0)
    # floor is 2 per chunk; 5 < 2*3 would trigger on a third insert
    syn.insert_chunk(2, vals(4), (0, 2), 100, local_variance=5.0)
    assert len(syn.chunks) == 2
    assert 0 not in syn.chunks  # lowest variance chunk evicted
    assert syn.total_retained <= 5


def test_insert_duplicate_rejected():
    syn = make_syn()
    syn.insert_chunk(0, vals(4), (0, 0), 100, local_variance=1.0)
    with pytest.raises(SynopsisError):
        syn.insert_chunk(0, vals(4), (0, 0), 100, local_variance=1.0)


# -------------------------------------------------------------- resample


def test_resample_continues_at_cursor():
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(4), (0, 0), 6, local_variance=1.0)  # window [0,4)
    fetched = {}

    def fetch(sc, ring):
        fetched["ring"] = ring.tolist()
        return vals(len(ring), offset=100)

    added = syn.resample_chunk(0, 2, fetch)
    assert added == 2
    assert fetched["ring"] == [4, 5]
    sc = syn.chunks[0]
    assert sc.length == 6 and sc.exhausted
    assert sc.cursor == 0  # wrapped


def test_resample_caps_at_full_chunk_never_double_counts():
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(4), (0, 0), 6, local_variance=1.0)
    added = syn.resample_chunk(0, 10, lambda sc, ring: vals(len(ring)))
    assert added == 2  # only 2 positions remained
    assert syn.resample_chunk(0, 5, lambda sc, ring: vals(len(ring))) == 0


def test_resample_wraps_circularly_after_front_drop():
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(5), (0, 0), 8, local_variance=1.0)
    syn.chunks[0].drop_front(3)  # window [3,5) of the permutation
    sc = syn.chunks[0]
    assert sc.start == 3 and sc.length == 2 and sc.cursor == 5
    rings = []
    syn.resample_chunk(0, 4, lambda sc, ring: (rings.append(ring.tolist()), vals(len(ring)))[1])
    assert rings[0] == [5, 6, 7, 0]  # circular restart at the permutation head


def test_resample_zero_needed_noop():
    syn = make_syn(budget=100)
    syn.insert_chunk(0, vals(4), (0, 0), 6, local_variance=1.0)
    before = syn.chunks[0].values.copy()
    assert syn.resample_chunk(0, 0, lambda sc, ring: vals(0)) == 0
    assert np.array_equal(syn.chunks[0].values, before)


def test_resample_rebalances_budget():
    syn = make_syn(budget=10)
    syn.insert_chunk(0, vals(5), (0, 0), 50, local_variance=1.0)
    syn.insert_chunk(1, vals(5), (0, 1), 50, local_variance=1.0)
    syn.resample_chunk(0, 5, lambda sc, ring: vals(len(ring)), new_variance=9.0)
    assert syn.total_retained <= 10
    assert syn.chunks[0].length > syn.chunks[1].length  # variance-driven


# ------------------------------------------------------------ answerability


def test_can_answer_modes():
    syn = make_syn(columns=("a1", "a2"), schedule=(2, 0, 1))
    q = parse_query("SELECT SUM(a1) FROM t")
    assert syn.can_answer(q, 3, "/data/f.csv") == Answerability.REBUILD  # empty
    syn.insert_chunk(0, np.zeros((4, 2)), (0, 0), 10, 1.0)
    assert syn.can_answer(q, 3, "/data/f.csv") == Answerability.PARTIAL
    syn.insert_chunk(1, np.zeros((4, 2)), (0, 1), 10, 1.0)
    syn.insert_chunk(2, np.zeros((4, 2)), (0, 2), 10, 1.0)
    assert syn.can_answer(q, 3, "/data/f.csv") == Answerability.FULL
    q2 = parse_query("SELECT SUM(zz) FROM t")
    assert syn.can_answer(q2, 3, "/data/f.csv") == Answerability.REBUILD
    assert syn.can_answer(q, 3, "/data/other.csv") == Answerability.REBUILD


def test_plan_access_order_partial_appends_unsatisfied_last():
    syn = make_syn(columns=("a1",), schedule=(5, 2, 9, 7))
    for j in (5, 2, 9):
        syn.insert_chunk(j, vals(4), (0, j), 10, 1.0)
    plan = syn.plan_access_order(Answerability.PARTIAL, 4, unsatisfied=[2])
    assert plan.memory == [5, 9]
    assert plan.missing == [7]
    assert plan.deferred == [2]


def test_plan_access_order_full_refetch_by_variance():
    syn = make_syn(columns=("a1",), schedule=(2, 7, 4))
    syn.insert_chunk(2, vals(4), (0, 2), 10, 9.0)
    syn.insert_chunk(7, vals(4), (0, 7), 10, 1.0)
    syn.insert_chunk(4, vals(4), (0, 4), 10, 4.0)
    plan = syn.plan_access_order(Answerability.FULL, 3, unsatisfied=[2, 7, 4])
    assert plan.deferred == [2, 4, 7]
    assert plan.missing == []


# ------------------------------------------------------------- properties


@given(
    ops=st.lists(
        st.tuples(st.integers(0, 5), st.integers(1, 30), st.floats(0.0, 100.0), st.booleans()),
        min_size=1,
        max_size=25,
    ),
    budget=st.integers(4, 60),
)
@settings(max_examples=150, deadline=None)
def test_budget_never_exceeded(ops, budget):
    syn = make_syn(budget=budget, schedule=tuple(range(6)))
    for j, size, var, resample in ops:
        if j in syn.chunks:
            syn.resample_chunk(j, size, lambda sc, ring: vals(len(ring)), new_variance=var)
        elif not resample:
            syn.insert_chunk(j, vals(min(size, 40)), (0, j), 40, local_variance=var)
        assert syn.total_retained <= budget
        for sc in syn.chunks.values():
            assert 1 <= sc.length <= sc.n_records


def test_window_is_uniform_srswor_after_pruning():
    # After insertion forces pruning, the retained set is a contiguous
    # permutation window, hence uniform over subsets of its size.
    counts = collections.Counter()
    runs = 30_000
    m_total = 5
    for s in range(runs):
        perm = in_chunk_permutation((s, 1), m_total)
        # retain the window [2,4): drop 2 from the front of a 4-prefix
        kept = frozenset(perm[2:4].tolist())
        counts[kept] += 1
    assert len(counts) == 10
    for c in counts.values():
        assert abs(c / runs - 0.1) < 0.01


def test_export_load_round_trip(tmp_path):
    syn = make_syn(budget=100, columns=("a1", "a2"), schedule=(1, 0))
    syn.insert_chunk(1, np.arange(8, dtype=np.float64).reshape(4, 2), (7, 1), 10, 3.5)
    syn.insert_chunk(0, np.arange(6, dtype=np.float64).reshape(3, 2) + 50, (7, 0), 12, 1.25)
    path = tmp_path / "syn.txt"
    syn.export(path)
    loaded = Synopsis.load(path)
    assert loaded.budget == syn.budget
    assert loaded.columns == syn.columns
    assert loaded.origin_schedule == syn.origin_schedule
    assert set(loaded.chunks) == set(syn.chunks)
    for j in syn.chunks:
        assert np.array_equal(loaded.chunks[j].values, syn.chunks[j].values)
        assert loaded.chunks[j].start == syn.chunks[j].start
        assert loaded.chunks[j].variance == syn.chunks[j].variance
        assert loaded.chunks[j].tuple_seed == syn.chunks[j].tuple_seed
