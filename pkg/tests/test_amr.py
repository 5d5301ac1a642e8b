"""Block-structured AMR: boxes, flagging, clustering, transfer and the level driver."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptfv import metrics as M
from adaptfv.amr import (
    Box, MissingBracketingStates, TimeMismatch, _LevelState, advance_level, average_down, box_efficiency,
    boxes_mask, build_hierarchy, cluster, encode_hierarchy, flag_cells, hierarchy_summary, prolong_level,
    remesh, run_amr, sync_ghosts,
)
from adaptfv.cases import get_case, reference_manager, with_overrides
from adaptfv.euler import prim_to_cons
from adaptfv.grid import GHOST, coarsen_mean
from adaptfv.scheme import SchemeConfig
from adaptfv.unigrid import run_uniform


def _blob_case(periodic=True):
    def init(X):
        x, y = X
        r2 = (x - 0.5) ** 2 + (y - 0.5) ** 2
        return np.stack([1 + 2 * np.exp(-r2 / 0.01) + 0 * x, 0.4 + 0 * x, -0.3 + 0 * x,
                         1 + np.exp(-r2 / 0.01)])
    return with_overrides(get_case("lax_liu_6"), init_prim=init, t_end=0.05,
                          bc_kind="periodic" if periodic else "outflow")


def _state(rho, n=12):
    W = np.stack([rho, np.zeros((n, n)), np.zeros((n, n)), np.ones((n, n))])
    return prim_to_cons(W, 1.4)


# ---------------------------------------------------------------- boxes

def test_box_invariants():
    with pytest.raises(ValueError):
        Box((0, 0), (0, 3))
    b = Box((1, 2), (3, 5), 1)
    assert b.shape == (2, 3) and b.size == 6
    assert b.refine() == Box((2, 4), (6, 10), 2) and b.refine().coarsen() == b
    assert b.contains(Box((1, 3), (2, 5))) and not b.contains(Box((0, 3), (2, 5)))
    assert b.intersects(Box((2, 4), (9, 9))) and not b.intersects(Box((3, 0), (4, 9)))


# ---------------------------------------------------------------- clustering

def test_cluster_single_cell():
    f = np.zeros((8, 8), dtype=bool)
    f[3, 5] = True
    (b,) = cluster(f, 0.8)
    assert b == Box((3, 5), (4, 6)) and box_efficiency(b, f) == 1.0


def test_cluster_full_mask():
    assert cluster(np.ones((8, 8), dtype=bool), 0.8) == [Box((0, 0), (8, 8))]


def test_cluster_two_distant_cells():
    f = np.zeros((16, 16), dtype=bool)
    f[1, 2] = f[13, 11] = True
    assert cluster(f, 0.8) == [Box((1, 2), (2, 3)), Box((13, 11), (14, 12))]


def test_cluster_empty_and_bad_tolerance():
    assert cluster(np.zeros((4, 4), dtype=bool), 0.8) == []
    with pytest.raises(ValueError):
        cluster(np.ones((4, 4), dtype=bool), 0.0)


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, (16, 16), elements=st.booleans()), st.sampled_from([0.5, 0.8, 1.0]))
def test_cluster_postconditions(flags, eta):
    boxes = cluster(flags, eta)
    cover = np.zeros(flags.shape, dtype=int)
    for b in boxes:
        cover[b.slices()] += 1
        assert box_efficiency(b, flags) >= eta or b.size == 1
    assert cover.max(initial=0) <= 1
    assert np.all(cover[flags] == 1)


# ---------------------------------------------------------------- flagging

def test_constant_field_has_no_flags():
    assert not flag_cells(_state(np.full((12, 12), 1.3)), 0.05, 0.05).any()


def test_density_spike_flags():
    rho = np.ones((12, 12))
    rho[5, 5] += 2 * 0.05
    U = _state(rho)
    pairs = flag_cells(U, 0.05, 0.05, buffer=0)
    expect = np.zeros((12, 12), dtype=bool)
    expect[4:7, 4:7] = True
    expect[4, 6] = expect[6, 4] = False  # no forward offset links these to the spike
    assert np.array_equal(pairs, expect)
    buffered = flag_cells(U, 0.05, 0.05)
    assert buffered.sum() == 23 and not buffered[3, 7] and not buffered[7, 3]


def test_lax_liu_flags_follow_interfaces():
    U = get_case("lax_liu_6").initial_cells(4)
    flags = flag_cells(U, 0.05, 0.05)
    expect = np.zeros((16, 16), dtype=bool)
    expect[6:10, :] = True
    expect[:, 6:10] = True
    assert np.array_equal(flags, expect)


# ---------------------------------------------------------------- transfer

def test_prolongation_reproduces_linear_averages():
    def averages(n):
        h = 1.0 / n
        c = (np.arange(-GHOST, n + GHOST) + 0.5) * h
        return (1.0 + 2.0 * c[:, None] - 0.5 * c[None, :])[None].repeat(4, axis=0)
    fine = prolong_level(averages(8))
    assert np.abs(fine - averages(16)[:, GHOST:-GHOST, GHOST:-GHOST]).max() < 1e-13


def test_average_down_examples():
    h = build_hierarchy(get_case("lax_liu_6"), 5, base_level=4, eps_rho=-1.0, eps_p=-1.0)
    assert h.num_levels == 2
    fine = h.level_data(1)
    fine[0, 0:2, 0:2] = [[1.0, 2.0], [3.0, 4.0]]
    before = fine.sum(axis=(1, 2)) * h.dx(1) ** 2
    average_down(h, 0)
    assert h.level_data(0)[0, 0, 0] == 2.5
    after = h.level_data(0).sum(axis=(1, 2)) * h.dx(0) ** 2
    assert np.allclose(after, before, rtol=1e-15, atol=0)
    untouched = h.level_data(0).copy()
    average_down(h, 0)
    assert np.array_equal(h.level_data(0), untouched)


def test_average_down_requires_synchronized_levels():
    h = build_hierarchy(get_case("lax_liu_6"), 5, base_level=4, eps_rho=-1.0, eps_p=-1.0)
    h.patches[1][0].t = 0.5
    with pytest.raises(TimeMismatch):
        average_down(h, 0)


def test_ghosts_from_constant_coarse_level():
    h = build_hierarchy(_blob_case(False), 6, base_level=4)
    assert h.num_levels >= 2
    q = np.array([1.0, 0.1, 0.2, 2.0])[:, None, None]
    for c in h.canvas:
        c[:] = q
    h.level_data(1)[:] = 0.0
    sync_ghosts(h, 1, 0.0)
    halo = h.halo_mask(1)
    assert halo.any() and np.all(h.level_data(1)[:, halo] == q[:, :, 0])


def test_ghosts_interpolate_in_time():
    h = build_hierarchy(_blob_case(False), 6, base_level=4)
    old, new = h.canvas[0].copy(), h.canvas[0].copy()
    old[:] = np.array([1.0, 0.0, 0.0, 2.0])[:, None, None]
    new[:] = np.array([3.0, 0.0, 0.0, 4.0])[:, None, None]
    states = {0: _LevelState(old, 0.0, new, 0.2)}
    sync_ghosts(h, 1, 0.1, states)
    halo = h.halo_mask(1)
    assert np.allclose(h.level_data(1)[:, halo], np.array([2.0, 0.0, 0.0, 3.0])[:, None], rtol=0, atol=1e-15)
    with pytest.raises(MissingBracketingStates):
        sync_ghosts(h, 1, 0.3, states)


# ---------------------------------------------------------------- remesh

def test_remesh_without_flags_removes_fine_levels():
    h = build_hierarchy(_blob_case(False), 6, base_level=4)
    assert h.num_levels > 1
    for c in h.canvas:
        c[:] = np.array([1.0, 0.0, 0.0, 2.0])[:, None, None]
    remesh(h, 0)
    assert h.num_levels == 1


def test_remesh_with_unchanged_flags_keeps_everything():
    h = build_hierarchy(_blob_case(False), 6, base_level=4)
    boxes = [h.boxes(k) for k in range(h.num_levels)]
    data = [h.level_data(k)[:, h.patch_mask(k)].copy() for k in range(h.num_levels)]
    remesh(h, 0)
    assert [h.boxes(k) for k in range(h.num_levels)] == boxes
    for k in range(h.num_levels):
        assert np.array_equal(h.level_data(k)[:, h.patch_mask(k)], data[k])


def test_level_zero_covers_domain():
    h = build_hierarchy(get_case("lax_liu_6"), 6)
    assert h.patch_mask(0).all()
    h.check_nesting()


@pytest.mark.parametrize("lt", [False, True])
def test_nesting_holds_during_runs(lt):
    h, rep = run_amr(get_case("lax_liu_6"), 6, lt=lt, nesting_checks=True)
    assert h.num_levels == 3 and rep.fallbacks == 0


# ---------------------------------------------------------------- stepping

def test_single_level_matches_uniform_solver():
    case = get_case("lax_liu_6")
    g, _ = run_uniform(case, 4, 20, SchemeConfig.amr_preset())
    h, _ = run_amr(case, 4, 20, base_level=4)
    assert h.num_levels == 1 and np.array_equal(h.level_data(0), g.interior)


@pytest.mark.parametrize("lt", [False, True])
def test_full_refinement_matches_uniform_solver(lt):
    case = get_case("lax_liu_6")
    g, _ = run_uniform(case, 5, 40, SchemeConfig.amr_preset())
    h, _ = run_amr(case, 5, 40, lt=lt, eps_rho=-1.0, eps_p=-1.0, base_level=3)
    assert h.num_levels == 3
    assert np.abs(h.level_data(2) - g.interior).max() <= 1e-11


@pytest.mark.parametrize("lt", [False, True])
def test_constant_state_unchanged(lt):
    case = get_case("lax_liu_6")
    h = build_hierarchy(case, 5, base_level=3, eps_rho=-1.0, eps_p=-1.0)
    q = np.array([1.2, 0.3, -0.2, 2.1])[:, None, None]
    for c in h.canvas:
        c[:] = q
    advance_level(h, 0, 0.002, SchemeConfig.amr_preset(), lt)
    for k in range(h.num_levels):
        assert np.allclose(h.level_data(k), q, rtol=0, atol=1e-14)


def _mass_history(lt, flux_correction):
    case = _blob_case()
    hist = []
    h, _ = run_amr(case, 6, 16, lt=lt, base_level=4, eps_rho=0.02, eps_p=0.02,
                   flux_correction=flux_correction, callback=lambda s, hh: hist.append(hh.totals()))
    assert 1 < h.num_levels
    start = build_hierarchy(case, 6, base_level=4, eps_rho=0.02, eps_p=0.02).totals()
    return start, hist


@pytest.mark.parametrize("lt", [False, True])
def test_periodic_conservation(lt):
    m0, hist = _mass_history(lt, True)
    for m in hist:
        assert np.all(np.abs(m - m0) <= 1e-12 * np.maximum(np.abs(m0), 1.0))


def test_conservation_defect_without_flux_correction():
    m0, hist = _mass_history(False, False)
    assert max(np.abs(m - m0).max() for m in hist) > 1e-8


# ---------------------------------------------------------------- output

def test_hierarchy_snapshot_is_deterministic():
    a = build_hierarchy(get_case("lax_liu_6"), 6)
    b = build_hierarchy(get_case("lax_liu_6"), 6)
    assert encode_hierarchy(a) == encode_hierarchy(b)
    lines = hierarchy_summary(a).splitlines()[1:]
    assert len(lines) == sum(len(a.boxes(k)) for k in range(a.num_levels))


def test_boxes_mask_matches_boxes():
    m = boxes_mask([Box((0, 0), (2, 3)), Box((4, 4), (5, 5))], 8, 2)
    assert m.sum() == 7


# ---------------------------------------------------------------- Lax-Liu level 7

def test_local_stepping_agrees_with_global_at_level7():
    case = get_case("lax_liu_6")
    ref = reference_manager(case, 9, SchemeConfig.amr_preset())
    errs = {}
    for lt in (False, True):
        h, rep = run_amr(case, 7, lt=lt)
        errs[lt] = M.l1_error_amr(h, ref)["rho"]
    assert abs(errs[True] - errs[False]) / errs[False] < 0.10
