import math
from itertools import product

from hypothesis import given
from hypothesis import strategies as st

from orion.core import ReplicaId
from orion.global_consensus import global_targets
from orion.params import ProtocolParams
from orion.roles import RoleSchedule, backoff_timeout, first_healthy_view

sizes = st.lists(st.sampled_from([1, 4, 7]), min_size=1, max_size=4).map(tuple)


@given(sizes)
def test_every_global_group_appears_once_per_period(cluster_sizes):
    sched = RoleSchedule(cluster_sizes)
    groups = [tuple(r.index for r in sched.representatives(v)) for v in range(sched.period)]
    assert sorted(groups) == sorted(product(*(range(n) for n in cluster_sizes)))
    assert sched.period == math.prod(cluster_sizes)


@given(sizes, st.integers(0, 500), st.integers(0, 500))
def test_local_roles_are_distinct_from_the_representative(cluster_sizes, lview, gview):
    sched = RoleSchedule(cluster_sizes)
    for c, n in enumerate(cluster_sizes):
        rep = sched.representative(c, gview)
        leader = sched.local_leader(c, lview, gview)
        diss = sched.disseminator(c, lview, gview)
        assert leader.cluster == diss.cluster == c
        if n > 1:
            assert leader != rep
        if n > 2:
            assert diss not in (leader, rep)


def test_local_leader_rotates_over_the_cluster():
    sched = RoleSchedule((4, 4, 4))
    leaders = {sched.local_leader(0, lv, 0) for lv in range(4)}
    assert leaders == {ReplicaId(0, 1), ReplicaId(0, 2), ReplicaId(0, 3)}


@given(st.integers(0, 1000))
def test_global_leader_is_a_representative(view):
    sched = RoleSchedule((4, 4, 4))
    leader = sched.global_leader_replica(view)
    assert leader.cluster == view % 3
    assert leader in sched.representatives(view)


@given(st.integers(0, 300), st.sampled_from([(4, 4, 4), (7, 4, 10)]))
def test_global_targets_include_representative(view, cluster_sizes):
    sched = RoleSchedule(cluster_sizes)
    params = ProtocolParams(cluster_sizes)
    for c in range(len(cluster_sizes)):
        targets = global_targets(sched, params, c, view)
        assert len(set(targets)) == params.f(c) + 1
        assert sched.representative(c, view) in targets
        assert all(t.cluster == c for t in targets)


def test_backoff_doubles_until_cap():
    assert [backoff_timeout(10, k) for k in range(4)] == [10, 20, 40, 80]
    assert [backoff_timeout(10, k, cap=2) for k in range(5)] == [10, 20, 40, 40, 40]


@given(st.sets(st.integers(0, 3), max_size=1), st.sets(st.integers(0, 3), max_size=1),
       st.sets(st.integers(0, 3), max_size=1), st.integers(0, 200))
def test_rotation_reaches_a_healthy_group_within_one_period(b0, b1, b2, start):
    sched = RoleSchedule((4, 4, 4))
    faulty = {ReplicaId(c, i) for c, bad in enumerate((b0, b1, b2)) for i in bad}
    v = first_healthy_view(sched, faulty, set(), start)
    assert start <= v < start + sched.period
    assert not set(sched.representatives(v)) & faulty


def test_rotation_ignores_crashed_clusters():
    sched = RoleSchedule((4, 4, 4))
    faulty = {ReplicaId(2, i) for i in range(4)}
    assert first_healthy_view(sched, faulty, {2}) == 0
    assert first_healthy_view(sched, faulty, set()) == -1


def test_schedule_table_shape():
    rows = RoleSchedule((4, 4, 4)).table(5)
    assert [r["view"] for r in rows] == list(range(5))
    assert rows[1]["representatives"] == ["r0.1", "r1.0", "r2.0"]
