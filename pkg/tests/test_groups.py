from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetcomm.errors import GridMismatch, HeterogeneityNotSupported
from hetcomm.groups import Backend, Grid, GroupKind, assign_backends, build_groups, parallel_groups
from hetcomm.topology import make_topology


def test_testbed_hetero_layout(testbed):
    tp, dp, pp = build_groups(testbed, 1, 2, 8)
    assert [g.members for g in pp] == [(i, i + 8) for i in range(8)]
    assert [g.members for g in dp] == [tuple(range(8)), tuple(range(8, 16))]
    assert len(tp) == 16 and all(len(g.members) == 1 for g in tp)
    tp, dp, pp = assign_backends((tp, dp, pp), testbed)
    assert all(g.backend is Backend.HETERO for g in pp)
    assert all(g.backend is Backend.VENDOR_CCL for g in dp + tp)


def test_single_node_layout():
    t = make_topology(["nvidia"], devices_per_node=8)
    groups = parallel_groups(t, 1, 2, 4)
    assert [len(gs) for gs in groups] == [8, 2, 4]
    assert all(g.backend is Backend.VENDOR_CCL for gs in groups for g in gs)


@pytest.mark.parametrize("tp,pp,dp", [(3, 1, 1), (1, 3, 3), (2, 2, 4), (0, 8, 1)])
def test_grid_mismatch(tp, pp, dp):
    with pytest.raises(GridMismatch):
        build_groups(make_topology(["nvidia"], devices_per_node=8), tp, pp, dp)


@pytest.mark.parametrize("tp,pp,dp", [(1, 1, 16), (2, 1, 8), (16, 1, 1), (4, 1, 4)])
def test_cross_vendor_tp_dp_rejected(testbed, tp, pp, dp):
    with pytest.raises(HeterogeneityNotSupported):
        parallel_groups(testbed, tp, pp, dp)


def test_single_group_assignment(testbed):
    tp, dp, pp = build_groups(testbed, 1, 2, 8)
    assert assign_backends(pp[0], testbed).backend is Backend.HETERO
    assert [g.backend for g in assign_backends(dp, testbed)] == [Backend.VENDOR_CCL] * 2


grids = st.sampled_from([1, 2, 4]).flatmap(
    lambda tp: st.sampled_from([1, 2, 4]).flatmap(lambda pp: st.just((tp, pp, 16 // (tp * pp))))
)


@settings(max_examples=30, deadline=None)
@given(grids)
def test_partition_and_round_trip(grid):
    tp, pp, dp = grid
    t = make_topology(["amd", "nvidia"], devices_per_node=8)
    g = Grid(tp, pp, dp)
    for r in range(16):
        assert g.rank(*g.coords(r)) == r
    for groups in build_groups(t, tp, pp, dp):
        members = sorted(m for grp in groups for m in grp.members)
        assert members == list(range(16))
    try:
        assigned = parallel_groups(t, tp, pp, dp)
    except HeterogeneityNotSupported:
        return
    for gs in assigned:
        for grp in gs:
            vendors = {t.vendor_of(r) for r in grp.members}
            if grp.backend is Backend.VENDOR_CCL:
                assert len(vendors) == 1
            else:
                assert grp.kind is GroupKind.PP
